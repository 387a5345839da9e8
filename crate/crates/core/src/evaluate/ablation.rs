use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::matching::MatchConfig;
use super::report::{evaluate_sections, MetricsReport};
use crate::continuity::PriorStack;
use crate::domain::SectionRecord;
use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::model::{ModelConfig, MultiTaskNet};
use crate::pipeline::{detect_stack, FilterConfig};
use crate::trainer::{pretrain, te_train, EpochRecord, TrainConfig};

/// Training variants, each adding one ingredient to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "focal")]
    Focal,
    #[serde(rename = "focal+sscon")]
    FocalSscon,
    #[serde(rename = "focal+sscon+te")]
    FocalSsconTe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ce, Variant::Focal, Variant::FocalSscon, Variant::FocalSsconTe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ce => "ce",
            Variant::Focal => "focal",
            Variant::FocalSscon => "focal+sscon",
            Variant::FocalSsconTe => "focal+sscon+te",
        }
    }

    /// Training settings for the supervised stage of this variant.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Ce => {
                cfg.focal = FocalParams::cross_entropy();
                cfg.use_contrastive = false;
            }
            Variant::Focal => cfg.use_contrastive = false,
            Variant::FocalSscon | Variant::FocalSsconTe => cfg.use_contrastive = true,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}; expected one of ce, focal, focal+sscon, focal+sscon+te")))
    }
}

/// Everything shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub match_config: MatchConfig,
}

/// One table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub tpr_dense: Option<f64>,
    pub tpr_moderate: Option<f64>,
    pub abs_delta_dense: Option<f64>,
    pub abs_delta_moderate: Option<f64>,
    pub fp_avg: f64,
}

impl AblationRow {
    pub fn from_report(variant: Variant, r: &MetricsReport) -> Self {
        AblationRow {
            variant,
            tpr_dense: r.tpr_dense,
            tpr_moderate: r.tpr_moderate,
            abs_delta_dense: r.mean_abs_delta_dense,
            abs_delta_moderate: r.mean_abs_delta_moderate,
            fp_avg: r.fp_avg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    /// After continuity filtering and postprocessing.
    pub filtered: MetricsReport,
    /// Thresholded detections only.
    pub raw: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub model: MultiTaskNet,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub rows: Vec<AblationRow>,
    pub results: Vec<VariantResult>,
}

impl AblationRun {
    pub fn result(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

/// Trains and evaluates each requested variant from the same initial
/// weights, with identical filtering. The TE variant continues from the
/// focal+sscon model, which is trained even when not requested.
pub fn ablation_harness(
    train: &[SectionRecord],
    test: &[SectionRecord],
    test_priors: Option<&PriorStack>,
    variants: &[Variant],
    plan: &AblationPlan,
) -> Result<AblationRun> {
    plan.train.validate()?;
    plan.filter.validate()?;
    plan.match_config.validate()?;
    if variants.is_empty() {
        return Err(Error::Empty("ablation variants".into()));
    }
    let mut wanted: Vec<Variant> = variants.to_vec();
    wanted.sort();
    wanted.dedup();

    let evaluate = |variant: Variant, model: MultiTaskNet, history: Vec<EpochRecord>| -> Result<VariantResult> {
        let det = detect_stack(&model, test, &plan.train.tile, test_priors, &plan.filter)?;
        let raw = evaluate_sections(test, &det.raw, &plan.match_config)?;
        let filtered = evaluate_sections(test, &det.filtered, &plan.match_config)?;
        info!(
            "{variant}: dense TPR {:?}, moderate TPR {:?}, FP_avg {:.2} (raw {:.2})",
            filtered.tpr_dense, filtered.tpr_moderate, filtered.fp_avg, raw.fp_avg
        );
        Ok(VariantResult {
            variant,
            filtered,
            raw,
            history,
            model,
        })
    };

    let mut results = Vec::new();
    for &v in &wanted {
        if v == Variant::FocalSsconTe {
            continue;
        }
        info!("training variant {v}");
        let cfg = v.train_config(&plan.train);
        let out = pretrain(MultiTaskNet::new(plan.model.clone(), plan.train.seed)?, train, &cfg)?;
        results.push(evaluate(v, out.model, out.history)?);
    }
    if wanted.contains(&Variant::FocalSsconTe) {
        let cfg = Variant::FocalSsconTe.train_config(&plan.train);
        let (start, mut history) = match results.iter().find(|r| r.variant == Variant::FocalSscon) {
            Some(r) => (r.model.clone(), r.history.clone()),
            None => {
                info!("training focal+sscon as the starting point for TE");
                let out = pretrain(MultiTaskNet::new(plan.model.clone(), plan.train.seed)?, train, &cfg)?;
                (out.model, out.history)
            }
        };
        info!("training variant {}", Variant::FocalSsconTe);
        let te = te_train(start, train, &cfg)?;
        history.extend(te.history);
        results.push(evaluate(Variant::FocalSsconTe, te.model, history)?);
    }
    let rows = results.iter().map(|r| AblationRow::from_report(r.variant, &r.filtered)).collect();
    Ok(AblationRun { rows, results })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,tpr_dense,tpr_moderate,abs_delta_fib_dens_dense,abs_delta_fib_dens_moderate,fp_avg\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.variant,
            opt(r.tpr_dense),
            opt(r.tpr_moderate),
            opt(r.abs_delta_dense),
            opt(r.abs_delta_moderate),
            r.fp_avg
        );
    }
    out
}

/// Plain-text table: TPR and |δ fib_dens| per severity, then FP_avg.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>10} {:>12} {:>12} {:>8}",
        "variant", "TPR dense", "TPR mod", "|dFD| dense", "|dFD| mod", "FP_avg"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>12} {:>12} {:>8.2}",
            r.variant.name(),
            cell(r.tpr_dense, 3),
            cell(r.tpr_moderate, 3),
            cell(r.abs_delta_dense, 2),
            cell(r.abs_delta_moderate, 2),
            r.fp_avg
        );
    }
    out
}
