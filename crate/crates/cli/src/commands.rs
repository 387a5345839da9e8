use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::Serialize;

use fiberseg::continuity::{train_prior, PriorModel, PriorSource, PriorStack};
use fiberseg::evaluate::ablation::{ablation_csv, ablation_harness, ablation_table, AblationPlan, AblationRow, Variant};
use fiberseg::evaluate::froc::{elbow, froc_curve, point_at, FrocCase, FrocPoint};
use fiberseg::evaluate::report::{boxplot_svg, froc_csv, froc_svg, sections_csv, write_text};
use fiberseg::evaluate::{evaluate_sections, gt_regions, MatchRule};
use fiberseg::inference::{predict_probability, regions_from_map};
use fiberseg::io::{load_dataset, read_json, read_probability_map, write_dataset, write_json, write_mask_png, write_probability_map};
use fiberseg::pipeline::{filter_section, filter_stack, stack_priors};
use fiberseg::synth::{generate_stack, SynthConfig};
use fiberseg::trainer::{pretrain, te_train, write_history};
use fiberseg::{BundleRegion, MultiTaskNet, RunConfig, SectionRecord};

use crate::runlog::{dataset_files, dir_files, write_run};
use crate::{usage, AblateArgs, CliResult, Ctx, EvalArgs, FilterArgs, FrocArgs, InferArgs, PriorArgs, SynthArgs, TrainArgs};

/// Maps `f` over `items` on up to `jobs` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn finalize(cfg: RunConfig) -> CliResult<RunConfig> {
    let cfg = cfg.seeded();
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

fn out_dir(ctx: &Ctx, out: &Path) -> CliResult<PathBuf> {
    let dir = ctx.path(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load(path: &Path) -> anyhow::Result<Vec<SectionRecord>> {
    let sections = load_dataset(path)?;
    if sections.is_empty() {
        return Err(anyhow!("{} lists no sections", path.display()));
    }
    Ok(sections)
}

fn regions_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.regions.json"))
}

fn prob_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.prob.tiff"))
}

fn read_regions(dir: &Path, sections: &[SectionRecord]) -> anyhow::Result<Vec<Vec<BundleRegion>>> {
    sections
        .iter()
        .map(|s| read_json(&regions_path(dir, &s.id)).with_context(|| format!("detections of section {}", s.id)))
        .collect()
}

enum PriorChoice {
    None,
    Oracle,
    Model(PathBuf),
}

fn prior_choice(ctx: &Ctx, a: &PriorArgs) -> CliResult<PriorChoice> {
    if a.oracle_prior {
        return Ok(PriorChoice::Oracle);
    }
    match &a.prior {
        Some(_) => Ok(PriorChoice::Model(ctx.input("--prior", &a.prior)?)),
        None => Ok(PriorChoice::None),
    }
}

fn compute_priors(sections: &[SectionRecord], choice: &PriorChoice, cfg: &RunConfig) -> anyhow::Result<Option<PriorStack>> {
    Ok(match choice {
        PriorChoice::None => None,
        PriorChoice::Oracle => Some(stack_priors(
            sections,
            PriorSource::Oracle {
                dilation_um: cfg.prior.oracle_dilation_um,
            },
            &cfg.prior,
        )?),
        PriorChoice::Model(p) => {
            let m = PriorModel::load(p)?;
            Some(stack_priors(sections, PriorSource::Model(&m), &cfg.prior)?)
        }
    })
}

pub fn synth(ctx: &mut Ctx, a: &SynthArgs) -> CliResult<()> {
    let mut cfg = ctx.config.clone();
    if a.tiny {
        let n = a.sections.unwrap_or(cfg.synth.n_sections);
        cfg.synth = SynthConfig::tiny(cfg.seed, n);
    }
    if let Some(n) = a.sections {
        cfg.synth.n_sections = n;
    }
    if let Some(k) = a.charted_stride {
        cfg.synth.charted_stride = k;
    }
    let cfg = finalize(cfg)?;
    let out = out_dir(ctx, &a.out)?;
    let sections = generate_stack(&cfg.synth)?;
    let manifest = write_dataset(&sections, &out)?;
    write_run(&out, "synth", &ctx.argv, &cfg, &[])?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    stopped_early: bool,
    epochs: usize,
    te: bool,
    prior: bool,
}

pub fn train(ctx: &mut Ctx, a: &TrainArgs) -> CliResult<()> {
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let mut cfg = ctx.config.clone();
    if let Some(e) = a.pretrain_epochs {
        cfg.train.pretrain_epochs = e;
    }
    if let Some(e) = a.te_epochs {
        cfg.train.te_epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(w) = a.base_width {
        cfg.model.unet.base_width = w;
    }
    let cfg = finalize(cfg)?;
    let sections = load(&manifest)?;
    let out = out_dir(ctx, &a.out)?;

    info!("pretraining on {} sections", sections.len());
    let net = MultiTaskNet::new(cfg.model.clone(), cfg.train.seed)?;
    let mut outcome = pretrain(net, &sections, &cfg.train)?;
    let mut history = outcome.history.clone();
    if !a.pretrain_only {
        info!("temporal ensembling");
        outcome = te_train(outcome.model, &sections, &cfg.train)?;
        history.extend(outcome.history.iter().cloned());
    }
    outcome.model.save_checkpoint(&out.join("model.safetensors"))?;
    write_history(&out.join("history.jsonl"), &history)?;

    if !a.no_prior {
        info!("training the continuity prior");
        let prior = train_prior(&sections, &cfg.prior)?;
        prior.save(&out.join("prior.safetensors"))?;
    }
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            epochs: history.len(),
            te: !a.pretrain_only,
            prior: !a.no_prior,
        },
    )?;
    write_run(&out, "train", &ctx.argv, &cfg, &dataset_files(&manifest)?)?;
    Ok(())
}

pub fn infer(ctx: &mut Ctx, a: &InferArgs) -> CliResult<()> {
    let model_path = ctx.input("--model", &a.model)?;
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let mut cfg = ctx.config.clone();
    if let Some(t) = a.threshold {
        cfg.train.tile.threshold = t;
    }
    let cfg = finalize(cfg)?;
    let model = MultiTaskNet::load_checkpoint(&model_path)?;
    let sections = load(&manifest)?;
    let out = out_dir(ctx, &a.out)?;
    let tile = cfg.train.tile;

    let results = par_map(&sections, ctx.jobs, |s| -> anyhow::Result<usize> {
        let map = predict_probability(&model, s, &tile)?;
        let (mask, regions) = regions_from_map(&map, tile.threshold);
        write_probability_map(&prob_path(&out, &s.id), &map)?;
        write_mask_png(&out.join(format!("{}.mask.png", s.id)), &mask)?;
        write_json(&regions_path(&out, &s.id), &regions)?;
        Ok(regions.len())
    });
    for (s, r) in sections.iter().zip(results) {
        info!("{}: {} regions", s.id, r?);
    }
    let mut inputs = vec![model_path];
    inputs.extend(dataset_files(&manifest)?);
    write_run(&out, "infer", &ctx.argv, &cfg, &inputs)?;
    Ok(())
}

pub fn filter(ctx: &mut Ctx, a: &FilterArgs) -> CliResult<()> {
    let det = ctx.input("--detections", &a.detections)?;
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let choice = prior_choice(ctx, &a.prior)?;
    if matches!(choice, PriorChoice::None) {
        return Err(usage("filter needs --oracle-prior or --prior FILE"));
    }
    let mut cfg = ctx.config.clone();
    if let Some(d) = a.max_distance_um {
        cfg.filter.continuity.max_distance_um = d;
    }
    if let Some(x) = a.min_area_mm2 {
        cfg.filter.postprocess.min_area_mm2 = x;
    }
    if let Some(x) = a.boundary_margin_mm {
        cfg.filter.postprocess.boundary_margin_mm = x;
    }
    let cfg = finalize(cfg)?;
    let sections = load(&manifest)?;
    let raw = read_regions(&det, &sections)?;
    let out = out_dir(ctx, &a.out)?;
    let priors = compute_priors(&sections, &choice, &cfg)?;
    let filtered = filter_stack(&raw, &sections, priors.as_ref(), &cfg.filter)?;
    for (i, (s, f)) in sections.iter().zip(&filtered).enumerate() {
        info!("{}: {} -> {} regions", s.id, raw[i].len(), f.len());
        write_json(&regions_path(&out, &s.id), f)?;
        if let Some(p) = &priors {
            write_mask_png(&out.join(format!("{}.prior.png", s.id)), &p.priors[i].mask)?;
        }
    }
    let mut inputs = dataset_files(&manifest)?;
    inputs.extend(dir_files(&det)?.into_iter().filter(|p| p.to_string_lossy().ends_with(".regions.json")));
    if let PriorChoice::Model(p) = &choice {
        inputs.push(p.clone());
    }
    write_run(&out, "filter", &ctx.argv, &cfg, &inputs)?;
    Ok(())
}

pub fn eval(ctx: &mut Ctx, a: &EvalArgs) -> CliResult<()> {
    let pred = ctx.input("--pred", &a.pred)?;
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let mut cfg = ctx.config.clone();
    if let Some(iou) = a.iou_min {
        cfg.matching.match_rule = MatchRule::IouThreshold;
        cfg.matching.iou_min = iou;
    }
    let cfg = finalize(cfg)?;
    let sections = load(&manifest)?;
    let preds = read_regions(&pred, &sections)?;
    let out = out_dir(ctx, &a.out)?;
    let report = evaluate_sections(&sections, &preds, &cfg.matching)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_text(&out.join("sections.csv"), &sections_csv(&report))?;
    let groups = vec![
        ("dense".to_string(), report.sections.iter().flat_map(|s| s.delta_dense.iter().copied()).collect()),
        ("moderate".to_string(), report.sections.iter().flat_map(|s| s.delta_moderate.iter().copied()).collect()),
    ];
    write_text(&out.join("delta_fib_dens.svg"), &boxplot_svg("delta fib_dens (%)", &groups))?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!(
        "TPR dense {}  TPR moderate {}  FP_avg {:.2}  |dFD| dense {}  |dFD| moderate {}",
        fmt(report.tpr_dense),
        fmt(report.tpr_moderate),
        report.fp_avg,
        fmt(report.mean_abs_delta_dense),
        fmt(report.mean_abs_delta_moderate)
    );
    let mut inputs = dataset_files(&manifest)?;
    inputs.extend(sections.iter().map(|s| regions_path(&pred, &s.id)));
    write_run(&out, "eval", &ctx.argv, &cfg, &inputs)?;
    Ok(())
}

#[derive(Serialize)]
struct FrocSummary {
    points: Vec<FrocPoint>,
    elbow: FrocPoint,
    at_0_4: Option<FrocPoint>,
    filtered: bool,
}

pub fn froc(ctx: &mut Ctx, a: &FrocArgs) -> CliResult<()> {
    let pred = ctx.input("--pred", &a.pred)?;
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let choice = prior_choice(ctx, &a.prior)?;
    if a.no_filter && !matches!(choice, PriorChoice::None) {
        return Err(usage("--no-filter cannot be combined with a prior"));
    }
    if !a.no_filter && matches!(choice, PriorChoice::None) {
        return Err(usage("froc needs --oracle-prior, --prior FILE or --no-filter"));
    }
    let cfg = finalize(ctx.config.clone())?;
    let sections = load(&manifest)?;
    let maps = sections
        .iter()
        .map(|s| read_probability_map(&prob_path(&pred, &s.id), &s.id))
        .collect::<fiberseg::Result<Vec<_>>>()?;
    let gts = sections
        .iter()
        .map(|s| gt_regions(s).ok_or_else(|| anyhow!("section {} has no charting", s.id)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let priors = compute_priors(&sections, &choice, &cfg)?;
    let out = out_dir(ctx, &a.out)?;

    let cases: Vec<FrocCase<'_>> = maps
        .iter()
        .zip(&gts)
        .map(|(m, (d, mo))| FrocCase {
            map: m,
            gt_dense: d,
            gt_moderate: mo,
        })
        .collect();
    let pipeline = |i: usize, regions: Vec<BundleRegion>| -> Vec<BundleRegion> {
        if a.no_filter {
            regions
        } else {
            filter_section(regions, i, &sections[i], priors.as_ref(), &cfg.filter)
        }
    };
    let points = froc_curve(&cases, &cfg.froc_thresholds, &cfg.matching, &pipeline)?;
    let knee = elbow(&points)?;
    write_text(&out.join("froc.csv"), &froc_csv(&points))?;
    write_text(&out.join("froc.svg"), &froc_svg(&points, Some(&knee)))?;
    write_json(
        &out.join("froc.json"),
        &FrocSummary {
            at_0_4: point_at(&points, 0.4),
            points,
            elbow: knee,
            filtered: !a.no_filter,
        },
    )?;
    println!(
        "elbow at threshold {:.2}: TPR dense {:?}, FP/section {:.2}",
        knee.threshold, knee.tpr_dense, knee.fp_per_section
    );
    let mut inputs = dataset_files(&manifest)?;
    inputs.extend(sections.iter().map(|s| prob_path(&pred, &s.id)));
    if let PriorChoice::Model(p) = &choice {
        inputs.push(p.clone());
    }
    write_run(&out, "froc", &ctx.argv, &cfg, &inputs)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput {
    filtered: Vec<AblationRow>,
    raw: Vec<AblationRow>,
}

pub fn ablate(ctx: &mut Ctx, a: &AblateArgs) -> CliResult<()> {
    let manifest = ctx.input("--manifest", &a.manifest)?;
    let test_manifest = ctx.input("--test-manifest", &a.test_manifest)?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.trim().parse::<Variant>())
        .collect::<fiberseg::Result<Vec<_>>>()
        .map_err(|e| usage(format!("--variants: {e}")))?;
    let mut cfg = ctx.config.clone();
    if let Some(e) = a.pretrain_epochs {
        cfg.train.pretrain_epochs = e;
    }
    if let Some(e) = a.te_epochs {
        cfg.train.te_epochs = e;
    }
    let cfg = finalize(cfg)?;
    let train = load(&manifest)?;
    let test = load(&test_manifest)?;
    let out = out_dir(ctx, &a.out)?;

    let priors = if a.oracle_prior {
        compute_priors(&test, &PriorChoice::Oracle, &cfg)?
    } else {
        info!("training the continuity prior");
        let m = train_prior(&train, &cfg.prior)?;
        m.save(&out.join("prior.safetensors"))?;
        Some(stack_priors(&test, PriorSource::Model(&m), &cfg.prior)?)
    };
    let plan = AblationPlan {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        filter: cfg.filter,
        match_config: cfg.matching,
    };
    let run = ablation_harness(&train, &test, priors.as_ref(), &variants, &plan)?;
    // Rows follow the harness order; requested-only variants are reported.
    let rows: Vec<AblationRow> = run.rows.iter().filter(|r| variants.contains(&r.variant)).cloned().collect();
    let raw: Vec<AblationRow> = run
        .results
        .iter()
        .filter(|r| variants.contains(&r.variant))
        .map(|r| AblationRow::from_report(r.variant, &r.raw))
        .collect();
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(&out.join("ablation_raw.csv"), &ablation_csv(&raw))?;
    let table = ablation_table(&rows);
    write_text(&out.join("ablation.txt"), &table)?;
    write_json(&out.join("ablation.json"), &AblationOutput { filtered: rows, raw })?;
    for r in &run.results {
        write_history(&out.join(format!("{}.history.jsonl", r.variant)), &r.history)?;
    }
    print!("{table}");
    let mut inputs = dataset_files(&manifest)?;
    inputs.extend(dataset_files(&test_manifest)?);
    write_run(&out, "ablate", &ctx.argv, &cfg, &inputs)?;
    Ok(())
}
