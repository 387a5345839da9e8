//! Supervised pretraining on charted sections followed by temporal-ensembling
//! over unlabeled sections, with early stopping on validation loss.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::augment::{patch_sampler, positive_pair, warp, GeoAugConfig, GeoParams, PairAugConfig, PatchSample, PatchSource};
use crate::domain::{Mask, Raster, SectionRecord};
use crate::error::{Error, Result};
use crate::evaluate::{gt_regions, match_regions, MatchConfig, Tally};
use crate::inference::{predict_probability, regions_from_map, TileSpec};
use crate::losses::{focal_loss_logits, contrastive_loss_batch, ContrastiveParams, FocalParams};
use crate::model::{stack, MultiTaskNet};
use crate::nn::{Adam, AdamConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub te_epochs: usize,
    pub patience: usize,
    /// TE history length.
    pub r: usize,
    pub pseudo_label_threshold: f32,
    /// TE epochs that train on the pretrained model's predictions.
    pub warmup_epochs: usize,
    pub focal: FocalParams,
    pub contrastive: ContrastiveParams,
    /// Trains the classification arm with the contrastive term.
    pub use_contrastive: bool,
    pub batches_per_epoch: usize,
    pub fiber_fraction: f64,
    pub geo: GeoAugConfig,
    pub pair: PairAugConfig,
    /// Downsample factor of the stored TE predictions.
    pub buffer_downsample: usize,
    pub val_fraction: f64,
    pub val_patches: usize,
    pub tile: TileSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            pretrain_epochs: 100,
            te_epochs: 100,
            patience: 25,
            r: 3,
            pseudo_label_threshold: 0.5,
            warmup_epochs: 3,
            focal: FocalParams::default(),
            contrastive: ContrastiveParams::default(),
            use_contrastive: true,
            batches_per_epoch: 20,
            fiber_fraction: 0.5,
            geo: GeoAugConfig::default(),
            pair: PairAugConfig::default(),
            buffer_downsample: 4,
            val_fraction: 0.1,
            val_patches: 16,
            tile: TileSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.r < 1 {
            return bad("r must be at least 1".into());
        }
        if self.patience > self.te_epochs {
            return bad(format!("patience {} exceeds te_epochs {}", self.patience, self.te_epochs));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.batches_per_epoch == 0 || self.buffer_downsample == 0 || self.val_patches == 0 {
            return bad("batches_per_epoch, buffer_downsample and val_patches must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.fiber_fraction) {
            return bad("val_fraction must be in [0,1) and fiber_fraction in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_threshold) {
            return bad(format!("pseudo_label_threshold {} outside [0,1]", self.pseudo_label_threshold));
        }
        self.focal.validate()?;
        self.contrastive.validate()?;
        self.geo.validate()?;
        self.tile.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..Default::default()
        }
    }
}

/// Ring buffer of the last `r` downsampled predictions of one section.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBuffer {
    capacity: usize,
    entries: VecDeque<(usize, Raster<f32>)>,
}

impl PredictionBuffer {
    pub fn new(capacity: usize) -> Self {
        PredictionBuffer {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn maps(&self) -> impl Iterator<Item = &Raster<f32>> {
        self.entries.iter().map(|e| &e.1)
    }

    /// Adds a map, evicting the oldest when full. Epochs must not decrease
    /// and all maps must share one geometry.
    pub fn push(&mut self, epoch: usize, map: Raster<f32>) -> Result<()> {
        if let Some((last, first)) = self.entries.back().map(|e| e.0).zip(self.entries.front()) {
            if epoch < last {
                return Err(Error::Invalid(format!("epoch {epoch} arrives after epoch {last}")));
            }
            if first.1.dims() != map.dims() {
                return Err(Error::shape(format!("{:?}", first.1.dims()), format!("{:?}", map.dims())));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((epoch, map));
        Ok(())
    }

    /// Pixelwise mean of the stored maps.
    pub fn mean(&self) -> Result<Raster<f32>> {
        let first = self.entries.front().ok_or_else(|| Error::Empty("prediction buffer".into()))?;
        let (h, w) = first.1.dims();
        let mut acc = vec![0.0f64; h * w];
        for (_, m) in &self.entries {
            for (a, &v) in acc.iter_mut().zip(m.as_slice()) {
                *a += v as f64;
            }
        }
        let n = self.entries.len() as f64;
        Raster::from_vec(h, w, acc.into_iter().map(|v| (v / n) as f32).collect())
    }
}

/// Mean of the buffered maps, binarized at `>= threshold`.
pub fn pseudo_label(buffer: &PredictionBuffer, threshold: f32) -> Result<Mask> {
    Ok(Mask::threshold(&buffer.mean()?, threshold))
}

/// Block-mean downsampling; partial border blocks average their valid pixels.
pub fn downsample_mean(map: &Raster<f32>, factor: usize) -> Raster<f32> {
    let (h, w) = map.dims();
    let (lh, lw) = (h.div_ceil(factor), w.div_ceil(factor));
    Raster::from_fn(lh, lw, |r, c| {
        let (r1, c1) = (((r + 1) * factor).min(h), ((c + 1) * factor).min(w));
        let mut s = 0.0f64;
        let mut n = 0usize;
        for y in r * factor..r1 {
            for x in c * factor..c1 {
                s += map.get(y, x) as f64;
                n += 1;
            }
        }
        (s / n as f64) as f32
    })
}

/// Nearest-neighbour upsampling to `dims`.
pub fn upsample_nearest<T: Copy>(low: &Raster<T>, factor: usize, dims: (usize, usize)) -> Raster<T> {
    let (lh, lw) = low.dims();
    Raster::from_fn(dims.0, dims.1, |r, c| low.get((r / factor).min(lh - 1), (c / factor).min(lw - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Manual,
    Pretrained,
    Ensemble,
}

/// Target bookkeeping for unlabeled sections during TE.
#[derive(Debug, Clone)]
pub struct TemporalEnsemble {
    pretrained: Vec<Raster<f32>>,
    buffers: Vec<PredictionBuffer>,
    dims: Vec<(usize, usize)>,
    factor: usize,
    threshold: f32,
    warmup_epochs: usize,
}

impl TemporalEnsemble {
    /// `pretrained` holds the pretrained model's downsampled predictions,
    /// `dims` the full-resolution geometry of each section.
    pub fn new(
        pretrained: Vec<Raster<f32>>,
        dims: Vec<(usize, usize)>,
        r: usize,
        factor: usize,
        threshold: f32,
        warmup_epochs: usize,
    ) -> Result<Self> {
        if pretrained.len() != dims.len() {
            return Err(Error::Invalid(format!("{} maps for {} sections", pretrained.len(), dims.len())));
        }
        for (m, &(h, w)) in pretrained.iter().zip(&dims) {
            if m.dims() != (h.div_ceil(factor), w.div_ceil(factor)) {
                return Err(Error::shape(format!("{h}x{w} / {factor}"), format!("{:?}", m.dims())));
            }
        }
        Ok(TemporalEnsemble {
            buffers: vec![PredictionBuffer::new(r); pretrained.len()],
            pretrained,
            dims,
            factor,
            threshold,
            warmup_epochs,
        })
    }

    pub fn len(&self) -> usize {
        self.pretrained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pretrained.is_empty()
    }

    pub fn buffer(&self, i: usize) -> &PredictionBuffer {
        &self.buffers[i]
    }

    pub fn record(&mut self, i: usize, epoch: usize, low: Raster<f32>) -> Result<()> {
        self.buffers[i].push(epoch, low)
    }

    /// Where the targets of TE epoch `epoch` (1-based) come from.
    pub fn source(&self, epoch: usize) -> TargetSource {
        if epoch <= self.warmup_epochs {
            TargetSource::Pretrained
        } else {
            TargetSource::Ensemble
        }
    }

    /// Full-resolution target of section `i` for TE epoch `epoch`.
    pub fn target(&self, i: usize, epoch: usize) -> Result<Mask> {
        let low = match self.source(epoch) {
            TargetSource::Pretrained => Mask::threshold(&self.pretrained[i], self.threshold),
            _ => pseudo_label(&self.buffers[i], self.threshold)?,
        };
        Ok(upsample_nearest(&low, self.factor, self.dims[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based epoch of the lowest validation loss (first on ties).
    pub best_epoch: usize,
}

/// `None` for an empty history.
pub fn early_stopping(history: &[f64], patience: usize) -> Option<StopDecision> {
    let mut best = None::<(usize, f64)>;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    let (best_idx, _) = best?;
    let since = history.len() - 1 - best_idx;
    Some(StopDecision {
        stop: since >= patience,
        best_epoch: best_idx + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Te,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub seg_loss: f64,
    pub contrastive_loss: Option<f64>,
    pub val_loss: f64,
    pub val_tpr_dense: Option<f64>,
    pub val_tpr_moderate: Option<f64>,
    pub target_source: TargetSource,
    /// Largest TE buffer occupancy over sections.
    pub buffer_entries: usize,
    /// Fraction of unlabeled pixels labeled fiber this epoch.
    pub pseudo_positive_fraction: Option<f64>,
    pub pair_fallbacks: usize,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub model: MultiTaskNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in history {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Deterministic charted split: (training, validation) indices into `sections`.
/// A single charted section serves both roles.
pub fn split_charted(sections: &[SectionRecord], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut charted: Vec<usize> = (0..sections.len()).filter(|&i| sections[i].charted).collect();
    if charted.len() < 2 || val_fraction == 0.0 {
        return (charted.clone(), charted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5b11);
    charted.shuffle(&mut rng);
    let n_val = ((val_fraction * charted.len() as f64).round() as usize).clamp(1, charted.len() - 1);
    let val = charted[..n_val].to_vec();
    let mut train = charted[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

struct StepStats {
    seg: f64,
    contrastive: Option<f64>,
    fallbacks: usize,
}

struct Validation {
    loss: f64,
    tpr_dense: Option<f64>,
    tpr_moderate: Option<f64>,
}

struct Session<'a> {
    cfg: &'a TrainConfig,
    model: MultiTaskNet,
    opt: Adam,
    rng: ChaCha8Rng,
    labeled: Vec<PatchSource>,
    unlabeled: Vec<PatchSource>,
    val_sections: Vec<&'a SectionRecord>,
    val_batches: Vec<(Tensor, Vec<u8>)>,
    pair: PairAugConfig,
    patch: usize,
}

fn manual_target(s: &SectionRecord) -> Result<Mask> {
    s.bundle_mask()
        .ok_or_else(|| Error::Invalid(format!("section {} has no charting", s.id)))
}

impl<'a> Session<'a> {
    fn new(model: MultiTaskNet, sections: &'a [SectionRecord], cfg: &'a TrainConfig, phase_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patch = model.config().unet.patch_size;
        let (train_idx, val_idx) = split_charted(sections, cfg.val_fraction, cfg.seed);
        if train_idx.is_empty() {
            return Err(Error::Empty("no charted sections to train on".into()));
        }
        if val_idx == train_idx {
            warn!("only one charted section; it is used for both training and validation");
        }
        let labeled = train_idx
            .iter()
            .map(|&i| PatchSource::new(&sections[i], manual_target(&sections[i])?))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = sections
            .iter()
            .filter(|s| !s.charted)
            .map(|s| PatchSource::new(s, Mask::filled(s.height(), s.width(), 0)))
            .collect::<Result<Vec<_>>>()?;
        let pair = cfg.pair.clone().for_resolution(&sections[train_idx[0]].resolution);
        pair.validate(&sections[train_idx[0]].resolution)?;
        let val_sections: Vec<&SectionRecord> = val_idx.iter().map(|&i| &sections[i]).collect();

        let val_sources = val_sections
            .iter()
            .map(|s| PatchSource::new(s, manual_target(s)?))
            .collect::<Result<Vec<_>>>()?;
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_da7e);
        let has_pos = val_sources.iter().any(|s| s.target.count() > 0);
        let samples = patch_sampler(
            &val_sources,
            patch,
            cfg.val_patches,
            if has_pos { cfg.fiber_fraction } else { 0.0 },
            &mut vrng,
        )?;
        let val_batches = samples
            .chunks(cfg.batch_size)
            .map(|c| {
                let x = stack(&c.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
                let y = c.iter().flat_map(|s| s.mask.as_slice().iter().copied()).collect();
                (x, y)
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(phase_seed);
        Ok(Session {
            cfg,
            model,
            opt: Adam::new(cfg.adam()),
            rng,
            labeled,
            unlabeled,
            val_sections,
            val_batches,
            pair,
            patch,
        })
    }

    fn augment_batch(&mut self, sources: &[PatchSource], samples: &[PatchSample]) -> (Tensor, Vec<u8>) {
        let p = self.patch;
        let mut xs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len() * p * p);
        for s in samples {
            let src = &sources[s.source];
            let params = GeoParams::draw(&self.cfg.geo, &mut self.rng);
            let half = (p as f64 - 1.0) / 2.0;
            let center = (s.origin.0 as f64 + half, s.origin.1 as f64 + half);
            let (x, m) = warp(&src.image, Some(&src.target), center, &params, p, p);
            xs.push(x);
            ys.extend_from_slice(m.expect("mask requested").as_slice());
        }
        (stack(&xs), ys)
    }

    fn step(&mut self, use_unlabeled: bool) -> Result<StepStats> {
        let cfg = self.cfg;
        let sources = if use_unlabeled {
            std::mem::take(&mut self.unlabeled)
        } else {
            std::mem::take(&mut self.labeled)
        };
        let result = self.step_on(&sources);
        if use_unlabeled {
            self.unlabeled = sources;
        } else {
            self.labeled = sources;
        }
        let stats = result?;
        if !stats.seg.is_finite() || stats.contrastive.is_some_and(|c| !c.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite loss (seg {}, contrastive {:?}) with learning rate {}",
                stats.seg, stats.contrastive, cfg.learning_rate
            )));
        }
        Ok(stats)
    }

    fn step_on(&mut self, sources: &[PatchSource]) -> Result<StepStats> {
        let cfg = self.cfg;
        let has_pos = sources.iter().any(|s| s.target.count() > 0);
        let fiber_fraction = if has_pos { cfg.fiber_fraction } else { 0.0 };
        let samples = patch_sampler(sources, self.patch, cfg.batch_size, fiber_fraction, &mut self.rng)?;
        let (x, y) = self.augment_batch(sources, &samples);

        let (logits, cache) = self.model.seg_forward_train(&x)?;
        let (seg, grad) = focal_loss_logits(&logits.data, &y, &cfg.focal)?;
        let dl = Tensor::from_vec([logits.n(), logits.c(), logits.h(), logits.w()], grad);
        self.model.seg_backward(cache, &dl);

        let mut contrastive = None;
        let mut fallbacks = 0;
        if cfg.use_contrastive {
            let mut a = Vec::with_capacity(samples.len());
            let mut b = Vec::with_capacity(samples.len());
            for s in &samples {
                let pp = positive_pair(&sources[s.source], s.origin, self.patch, &self.pair, &mut self.rng)?;
                fallbacks += usize::from(pp.fallback);
                a.push(pp.view_a);
                b.push(pp.view_b);
            }
            a.extend(b);
            let views = stack(&a);
            let (emb, ccache) = self.model.class_forward_train(&views)?;
            let dim = emb.c();
            let (lc, mut g) = contrastive_loss_batch(&emb.data, dim, &cfg.contrastive)?;
            let lam = cfg.contrastive.lambda_weight as f32;
            g.iter_mut().for_each(|v| *v *= lam);
            let demb = Tensor::from_vec([emb.n(), dim, 1, 1], g);
            self.model.class_backward(ccache, &demb);
            contrastive = Some(lc);
        }
        self.opt.step(&mut self.model);
        Ok(StepStats {
            seg,
            contrastive,
            fallbacks,
        })
    }

    fn validate(&self) -> Result<Validation> {
        let (mut total, mut n) = (0.0, 0usize);
        for (x, y) in &self.val_batches {
            let logits = self.model.seg_logits(x)?;
            let (l, _) = focal_loss_logits(&logits.data, y, &self.cfg.focal)?;
            total += l * y.len() as f64;
            n += y.len();
        }
        let mut tally = Tally::default();
        for s in &self.val_sections {
            let map = predict_probability(&self.model, s, &self.cfg.tile)?;
            let (_, regions) = regions_from_map(&map, self.cfg.tile.threshold);
            let (dense, moderate) = gt_regions(s).expect("validation sections are charted");
            tally.add(&match_regions(&regions, &dense, &moderate, &MatchConfig::default()));
        }
        Ok(Validation {
            loss: total / n as f64,
            tpr_dense: tally.tpr_dense(),
            tpr_moderate: tally.tpr_moderate(),
        })
    }

    /// Runs one epoch; with `interleave`, odd batches come from unlabeled sections.
    fn epoch(&mut self, interleave: bool) -> Result<(f64, f64, Option<f64>, usize)> {
        let cfg = self.cfg;
        let (mut seg, mut con, mut fb) = (0.0, 0.0, 0);
        for b in 0..cfg.batches_per_epoch {
            let s = self.step(interleave && b % 2 == 1)?;
            seg += s.seg;
            con += s.contrastive.unwrap_or(0.0);
            fb += s.fallbacks;
        }
        let k = cfg.batches_per_epoch as f64;
        let seg = seg / k;
        let con = cfg.use_contrastive.then_some(con / k);
        let total = seg + con.map_or(0.0, |c| cfg.contrastive.lambda_weight * c);
        Ok((total, seg, con, fb))
    }
}

struct Tracker {
    best: Option<(f64, MultiTaskNet)>,
    best_epoch: usize,
    val: Vec<f64>,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            best: None,
            best_epoch: 0,
            val: Vec::new(),
        }
    }

    /// Returns whether this epoch is the new best.
    fn observe(&mut self, epoch: usize, loss: f64, model: &MultiTaskNet) -> bool {
        self.val.push(loss);
        let better = match &self.best {
            None => loss.is_finite(),
            Some((b, _)) => loss < *b,
        };
        if better {
            self.best = Some((loss, model.clone()));
            self.best_epoch = epoch;
        }
        better
    }

    fn finish(self, last: MultiTaskNet) -> (MultiTaskNet, usize) {
        match self.best {
            Some((_, m)) => (m, self.best_epoch),
            None => (last, 0),
        }
    }
}

/// Supervised training on the charted sections of `sections`.
pub fn pretrain(model: MultiTaskNet, sections: &[SectionRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut session = Session::new(model, sections, cfg, 1)?;
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    let mut tracker = Tracker::new();
    for epoch in 1..=cfg.pretrain_epochs {
        let (total, seg, con, fb) = session.epoch(false)?;
        let v = session.validate()?;
        let best = tracker.observe(epoch, v.loss, &session.model);
        info!(
            "pretrain epoch {epoch}: loss {total:.4} (seg {seg:.4}) val {:.4} tpr {:?}",
            v.loss, v.tpr_dense
        );
        history.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            train_loss: total,
            seg_loss: seg,
            contrastive_loss: con,
            val_loss: v.loss,
            val_tpr_dense: v.tpr_dense,
            val_tpr_moderate: v.tpr_moderate,
            target_source: TargetSource::Manual,
            buffer_entries: 0,
            pseudo_positive_fraction: None,
            pair_fallbacks: fb,
            best,
        });
    }
    let (model, best_epoch) = tracker.finish(session.model);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early: false,
    })
}

fn predict_low(model: &MultiTaskNet, s: &SectionRecord, cfg: &TrainConfig) -> Result<Raster<f32>> {
    Ok(downsample_mean(&predict_probability(model, s, &cfg.tile)?.values, cfg.buffer_downsample))
}

/// Temporal-ensembling training, starting from pretrained parameters.
pub fn te_train(model: MultiTaskNet, sections: &[SectionRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let unlabeled: Vec<&SectionRecord> = sections.iter().filter(|s| !s.charted).collect();
    if unlabeled.is_empty() {
        warn!("no unlabeled sections; continuing with supervised training only");
    }
    let mut session = Session::new(model, sections, cfg, 2)?;
    let pretrained = unlabeled
        .iter()
        .map(|s| predict_low(&session.model, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut ens = TemporalEnsemble::new(
        pretrained.clone(),
        unlabeled.iter().map(|s| s.dims()).collect(),
        cfg.r,
        cfg.buffer_downsample,
        cfg.pseudo_label_threshold,
        cfg.warmup_epochs,
    )?;
    let mut history = Vec::new();
    let mut tracker = Tracker::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.te_epochs {
        // The model entering epoch N has produced P_{N-1}; at N = 1 that is P_Np.
        for (i, s) in unlabeled.iter().enumerate() {
            let low = if epoch == 1 {
                pretrained[i].clone()
            } else {
                predict_low(&session.model, s, cfg)?
            };
            ens.record(i, epoch, low)?;
        }
        let mut positive = 0usize;
        let mut pixels = 0usize;
        for i in 0..ens.len() {
            let t = ens.target(i, epoch)?;
            positive += t.count();
            pixels += t.len();
            session.unlabeled[i].set_target(t);
        }
        let source = if ens.is_empty() {
            TargetSource::Manual
        } else {
            ens.source(epoch)
        };
        let (total, seg, con, fb) = session.epoch(!ens.is_empty())?;
        let v = session.validate()?;
        let best = tracker.observe(epoch, v.loss, &session.model);
        let buffer_entries = (0..ens.len()).map(|i| ens.buffer(i).len()).max().unwrap_or(0);
        info!(
            "te epoch {epoch}: loss {total:.4} (seg {seg:.4}) val {:.4} tpr {:?} targets {source:?}",
            v.loss, v.tpr_dense
        );
        history.push(EpochRecord {
            phase: Phase::Te,
            epoch,
            train_loss: total,
            seg_loss: seg,
            contrastive_loss: con,
            val_loss: v.loss,
            val_tpr_dense: v.tpr_dense,
            val_tpr_moderate: v.tpr_moderate,
            target_source: source,
            buffer_entries,
            pseudo_positive_fraction: (pixels > 0).then(|| positive as f64 / pixels as f64),
            pair_fallbacks: fb,
            best,
        });
        if early_stopping(&tracker.val, cfg.patience).is_some_and(|d| d.stop) && epoch < cfg.te_epochs {
            info!("early stop after te epoch {epoch}");
            stopped_early = true;
            break;
        }
    }
    let (model, best_epoch) = tracker.finish(session.model);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierArmConfig, ModelConfig, UNetConfig};
    use crate::synth::{generate_stack, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn pseudo_label_examples() {
        let mut b = PredictionBuffer::new(3);
        for (e, v) in [(1, 0.2f32), (2, 0.4), (3, 0.6)] {
            b.push(e, Raster::filled(2, 2, v)).unwrap();
        }
        assert!((b.mean().unwrap().get(0, 0) - 0.4).abs() < 1e-6);
        assert_eq!(pseudo_label(&b, 0.5).unwrap().count(), 0);
        let mut one = PredictionBuffer::new(3);
        one.push(1, Raster::filled(2, 2, 0.9)).unwrap();
        assert_eq!(pseudo_label(&one, 0.5).unwrap().count(), 4);
        assert!(pseudo_label(&PredictionBuffer::new(3), 0.5).is_err());
    }

    #[test]
    fn buffer_ring_invariants() {
        let mut b = PredictionBuffer::new(3);
        for e in 1..=10 {
            b.push(e, Raster::filled(3, 3, e as f32 / 10.0)).unwrap();
            assert!(b.len() <= 3);
        }
        assert_eq!(b.epochs(), vec![8, 9, 10]);
        assert!(b.push(5, Raster::filled(3, 3, 0.0)).is_err());
        assert!(b.push(11, Raster::filled(2, 3, 0.0)).is_err());
    }

    #[test]
    fn history_of_one_is_last_thresholded_prediction() {
        let mut b = PredictionBuffer::new(1);
        b.push(1, Raster::filled(2, 2, 0.9)).unwrap();
        let last = Raster::from_vec(2, 2, vec![0.1, 0.7, 0.5, 0.49]).unwrap();
        b.push(2, last.clone()).unwrap();
        assert_eq!(pseudo_label(&b, 0.5).unwrap(), Mask::threshold(&last, 0.5));
    }

    proptest! {
        #[test]
        fn buffer_mean_matches_brute_force(maps in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 12), 1..6), t in 0.05f32..0.95) {
            let mut b = PredictionBuffer::new(3);
            for (e, m) in maps.iter().enumerate() {
                b.push(e, Raster::from_vec(3, 4, m.clone()).unwrap()).unwrap();
            }
            let kept = &maps[maps.len().saturating_sub(3)..];
            let got = pseudo_label(&b, t).unwrap();
            for i in 0..12 {
                let mean = kept.iter().map(|m| m[i] as f64).sum::<f64>() / kept.len() as f64;
                prop_assert_eq!(got.as_slice()[i], u8::from(mean as f32 >= t));
            }
            let mut rev = PredictionBuffer::new(3);
            for m in kept.iter().rev() {
                rev.push(0, Raster::from_vec(3, 4, m.clone()).unwrap()).unwrap();
            }
            prop_assert_eq!(pseudo_label(&rev, t).unwrap(), pseudo_label(&b, t).unwrap());
        }
    }

    #[test]
    fn warmup_targets_come_from_pretrained_predictions() {
        // Sentinels: the pretrained map is all-fiber, live predictions are all-background.
        let dims = vec![(8, 12)];
        let mut ens = TemporalEnsemble::new(vec![Raster::filled(2, 3, 0.9)], dims, 3, 4, 0.5, 3).unwrap();
        for epoch in 1..=6 {
            ens.record(0, epoch, Raster::filled(2, 3, 0.05)).unwrap();
            let t = ens.target(0, epoch).unwrap();
            assert_eq!(t.dims(), (8, 12));
            if epoch <= 3 {
                assert_eq!(ens.source(epoch), TargetSource::Pretrained);
                assert_eq!(t.count(), 96, "epoch {epoch}");
            } else {
                assert_eq!(ens.source(epoch), TargetSource::Ensemble);
                assert_eq!(t.count(), 0, "epoch {epoch}");
            }
            assert!(ens.buffer(0).len() <= 3);
        }
    }

    #[test]
    fn early_stopping_examples() {
        let d = early_stopping(&[1.0, 1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(d, StopDecision { stop: true, best_epoch: 1 });
        assert!(!early_stopping(&[1.0, 1.0, 1.0], 3).unwrap().stop);
        let dec: Vec<f64> = (0..50).map(|i| 10.0 - i as f64 * 0.1).collect();
        for k in 1..=dec.len() {
            assert!(!early_stopping(&dec[..k], 3).unwrap().stop);
        }
        assert_eq!(early_stopping(&[3.0, 1.0, 2.0, 0.5, 0.7], 5).unwrap().best_epoch, 4);
        assert!(early_stopping(&[], 3).is_none());
    }

    #[test]
    fn resampling_helpers() {
        let m = Raster::from_fn(5, 6, |r, c| (r * 6 + c) as f32);
        let low = downsample_mean(&m, 4);
        assert_eq!(low.dims(), (2, 2));
        let want: f32 = (0..4).flat_map(|r| (0..4).map(move |c| (r * 6 + c) as f32)).sum::<f32>() / 16.0;
        assert_eq!(low.get(0, 0), want);
        assert_eq!(low.get(1, 1), (28.0 + 29.0) / 2.0);
        let up = upsample_nearest(&low, 4, (5, 6));
        assert_eq!(up.get(4, 5), low.get(1, 1));
        assert_eq!(up.get(3, 3), low.get(0, 0));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { r: 0, ..Default::default() },
            TrainConfig { patience: 101, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn split_keeps_one_section_for_validation() {
        let mut cfg = SynthConfig::tiny(3, 12);
        cfg.charted_stride = 2;
        let sections = generate_stack(&cfg).unwrap();
        let (train, val) = split_charted(&sections, 0.1, 0);
        assert_eq!((train.len(), val.len()), (5, 1));
        assert!(train.iter().all(|i| !val.contains(i)));
        assert_eq!(split_charted(&sections, 0.1, 0), (train, val));
    }

    pub(crate) fn tiny_setup() -> (MultiTaskNet, TrainConfig) {
        let model = MultiTaskNet::new(
            ModelConfig {
                unet: UNetConfig {
                    base_width: 4,
                    depth: 2,
                    patch_size: 32,
                    ..Default::default()
                },
                arm: ClassifierArmConfig {
                    fc_sizes: vec![16, 8],
                    ..Default::default()
                },
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            pretrain_epochs: 5,
            te_epochs: 4,
            patience: 2,
            batches_per_epoch: 4,
            val_patches: 4,
            learning_rate: 3e-3,
            geo: GeoAugConfig {
                translate_px: (-4, 4),
                ..Default::default()
            },
            tile: TileSpec {
                tile_size: 64,
                overlap_px: 16,
                threshold: 0.4,
            },
            seed: 9,
            ..Default::default()
        };
        (model, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, mut cfg) = tiny_setup();
        cfg.learning_rate = 0.0;
        cfg.pretrain_epochs = 2;
        let sections = generate_stack(&SynthConfig::tiny(4, 2)).unwrap();
        let out = pretrain(model.clone(), &sections, &cfg).unwrap();
        let trainable = |m: &MultiTaskNet| {
            let mut v = Vec::new();
            crate::nn::Module::visit(m, "", &mut |n, p| {
                if p.trainable {
                    v.push((n.to_string(), p.value.clone()));
                }
            });
            v
        };
        assert_eq!(trainable(&out.model), trainable(&model));
    }

    #[test]
    fn empty_labeled_set_is_an_error() {
        let (model, cfg) = tiny_setup();
        let mut cfg_s = SynthConfig::tiny(4, 2);
        cfg_s.charted_stride = 5;
        cfg_s.charted_offset = 3;
        let sections = generate_stack(&cfg_s).unwrap();
        assert!(sections.iter().all(|s| !s.charted));
        assert!(matches!(pretrain(model, &sections, &cfg), Err(Error::Empty(_))));
    }
}
