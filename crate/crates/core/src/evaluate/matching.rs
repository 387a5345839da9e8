use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{BundleRegion, Severity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    AnyOverlap,
    IouThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct MatchConfig {
    pub match_rule: MatchRule,
    pub iou_min: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            match_rule: MatchRule::AnyOverlap,
            iou_min: 0.1,
        }
    }
}

fn bboxes_intersect(a: &BundleRegion, b: &BundleRegion) -> bool {
    let (ar0, ac0, ar1, ac1) = a.bbox();
    let (br0, bc0, br1, bc1) = b.bbox();
    ar0 <= br1 && br0 <= ar1 && ac0 <= bc1 && bc0 <= ac1
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return Err(Error::Invalid(format!("iou_min {} must be in (0, 1]", self.iou_min)));
        }
        Ok(())
    }

    pub fn matches(&self, pred: &BundleRegion, gt: &BundleRegion) -> bool {
        if pred.is_empty() || gt.is_empty() || !bboxes_intersect(pred, gt) {
            return false;
        }
        match self.match_rule {
            MatchRule::AnyOverlap => pred.overlap(gt) > 0,
            MatchRule::IouThreshold => pred.iou(gt) >= self.iou_min,
        }
    }
}

/// Matching outcome for one section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub dense_hit: Vec<bool>,
    pub moderate_hit: Vec<bool>,
    /// Indices of predicted regions matching no GT bundle.
    pub false_positives: Vec<usize>,
    /// For each predicted region, the GT bundles it matches.
    pub pred_matches: Vec<Vec<(Severity, usize)>>,
}

impl MatchResult {
    pub fn tp_dense(&self) -> usize {
        self.dense_hit.iter().filter(|&&h| h).count()
    }

    pub fn tp_moderate(&self) -> usize {
        self.moderate_hit.iter().filter(|&&h| h).count()
    }

    pub fn fp_count(&self) -> usize {
        self.false_positives.len()
    }
}

pub fn match_regions(
    predicted: &[BundleRegion],
    gt_dense: &[BundleRegion],
    gt_moderate: &[BundleRegion],
    mc: &MatchConfig,
) -> MatchResult {
    let mut out = MatchResult {
        dense_hit: vec![false; gt_dense.len()],
        moderate_hit: vec![false; gt_moderate.len()],
        false_positives: Vec::new(),
        pred_matches: Vec::with_capacity(predicted.len()),
    };
    for (pi, p) in predicted.iter().enumerate() {
        let mut hits = Vec::new();
        for (sev, gts, flags) in [
            (Severity::Dense, gt_dense, &mut out.dense_hit),
            (Severity::Moderate, gt_moderate, &mut out.moderate_hit),
        ] {
            for (gi, g) in gts.iter().enumerate() {
                if mc.matches(p, g) {
                    flags[gi] = true;
                    hits.push((sev, gi));
                }
            }
        }
        if hits.is_empty() {
            out.false_positives.push(pi);
        }
        out.pred_matches.push(hits);
    }
    out
}

/// Hit fraction; `None` when there are no GT bundles.
pub fn tpr(hits: &[bool]) -> Option<f64> {
    if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    }
}

pub fn fp_avg(false_positives: usize, n_sections: usize) -> Result<f64> {
    if n_sections == 0 {
        return Err(Error::Invalid("FP average needs at least one section".into()));
    }
    Ok(false_positives as f64 / n_sections as f64)
}

/// Running totals over sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub sections: usize,
    pub gt_dense: usize,
    pub gt_moderate: usize,
    pub tp_dense: usize,
    pub tp_moderate: usize,
    pub fp: usize,
}

impl Tally {
    pub fn add(&mut self, m: &MatchResult) {
        self.sections += 1;
        self.gt_dense += m.dense_hit.len();
        self.gt_moderate += m.moderate_hit.len();
        self.tp_dense += m.tp_dense();
        self.tp_moderate += m.tp_moderate();
        self.fp += m.fp_count();
    }

    pub fn tpr_dense(&self) -> Option<f64> {
        (self.gt_dense > 0).then(|| self.tp_dense as f64 / self.gt_dense as f64)
    }

    pub fn tpr_moderate(&self) -> Option<f64> {
        (self.gt_moderate > 0).then(|| self.tp_moderate as f64 / self.gt_moderate as f64)
    }

    pub fn fp_avg(&self) -> Result<f64> {
        fp_avg(self.fp, self.sections)
    }
}
