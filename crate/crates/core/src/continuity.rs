//! Rostrocaudal continuity: stack alignment, a coarse dense-bundle prior
//! from three orthogonal planes, neighbor-based filtering and final cleanup.

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{BundleRegion, Mask, Raster, Resolution, SectionRecord, LABEL_DENSE};
use crate::error::{Error, Result};
use crate::losses::{focal_loss_logits, FocalParams};
use crate::model::{reflect, ClassifierArmConfig, ModelConfig, MultiTaskNet, UNetConfig};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::raster::distance_transform;
use crate::trainer::{downsample_mean, upsample_nearest};

pub const DEFAULT_DOWNSAMPLE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Landmark {
    VentricleCentroid,
    LateralEdges,
}

/// Per-section translations `(rows, cols)` mapping each section onto the
/// first one. Aligned pixel `p` shows section pixel `p - t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackAlignment {
    pub translations: Vec<(i64, i64)>,
    pub landmarks: Vec<Landmark>,
    pub downsample_factor: usize,
}

impl StackAlignment {
    pub fn len(&self) -> usize {
        self.translations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.translations.is_empty()
    }
}

/// Aligned, block-averaged RGB stack laid out `[section][channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Working-resolution dims of the sections.
    pub section_dims: (usize, usize),
    pub factor: usize,
}

impl AlignedVolume {
    /// Per-channel zero mean, unit variance copy. Constant channels are only centered.
    pub fn standardized(&self) -> AlignedVolume {
        let plane = self.height * self.width;
        let mut out = self.clone();
        for ch in 0..3 {
            let vals = || (0..self.depth).flat_map(move |z| self.data[(z * 3 + ch) * plane..(z * 3 + ch + 1) * plane].iter());
            let n = (self.depth * plane) as f64;
            let mean = vals().map(|&v| v as f64).sum::<f64>() / n;
            let var = vals().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
            for z in 0..self.depth {
                for v in &mut out.data[(z * 3 + ch) * plane..(z * 3 + ch + 1) * plane] {
                    *v = ((*v as f64 - mean) / sd) as f32;
                }
            }
        }
        out
    }

    fn at(&self, z: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[((z * 3 + ch) * self.height + y) * self.width + x]
    }
}

fn ventricle_centroid(s: &SectionRecord) -> Option<(f64, f64)> {
    let m = s.ventricle_mask.as_ref()?;
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) != 0 {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sr / n as f64, sc / n as f64))
}

fn lateral_center(s: &SectionRecord) -> (f64, f64) {
    let t = s.tissue_or_estimate();
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..t.height() {
        for c in 0..t.width() {
            if t.get(r, c) != 0 {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
    }
    if top == usize::MAX {
        let (h, w) = s.dims();
        return ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    }
    ((top + bottom) as f64 / 2.0, (left + right) as f64 / 2.0)
}

/// Translation-only alignment onto the first section. Ventricle centroids
/// are matched where both sections have one; otherwise the tissue bounding
/// box centers (lateral edges) are.
pub fn align_stack(sections: &[SectionRecord]) -> Result<StackAlignment> {
    let first = sections.first().ok_or_else(|| Error::Empty("stack with no sections".into()))?;
    if sections.windows(2).any(|w| w[0].rostrocaudal_index > w[1].rostrocaudal_index) {
        return Err(Error::Invalid("sections must be sorted by rostrocaudal index".into()));
    }
    let ref_vent = ventricle_centroid(first);
    let ref_lat = lateral_center(first);
    let mut translations = Vec::with_capacity(sections.len());
    let mut landmarks = Vec::with_capacity(sections.len());
    for s in sections {
        let (lm, reference, own) = match (ref_vent, ventricle_centroid(s)) {
            (Some(a), Some(b)) => (Landmark::VentricleCentroid, a, b),
            _ => (Landmark::LateralEdges, ref_lat, lateral_center(s)),
        };
        translations.push(((reference.0 - own.0).round() as i64, (reference.1 - own.1).round() as i64));
        landmarks.push(lm);
    }
    let n_lat = landmarks.iter().filter(|&&l| l == Landmark::LateralEdges).count();
    if n_lat > 0 {
        info!("{n_lat} of {} sections aligned by lateral tissue edges", sections.len());
    }
    Ok(StackAlignment {
        translations,
        landmarks,
        downsample_factor: DEFAULT_DOWNSAMPLE,
    })
}

/// Moves a raster into the aligned frame: `out(p) = in(p - t)`.
pub fn to_aligned<T: Copy>(r: &Raster<T>, t: (i64, i64), fill: T) -> Raster<T> {
    r.crop(-t.0 as isize, -t.1 as isize, r.height(), r.width(), fill)
}

/// Moves an aligned raster back to section coordinates: `out(q) = in(q + t)`.
pub fn from_aligned<T: Copy>(r: &Raster<T>, t: (i64, i64), fill: T) -> Raster<T> {
    r.crop(t.0 as isize, t.1 as isize, r.height(), r.width(), fill)
}

/// Aligns the stack and builds its downsampled volume.
pub fn build_stack(sections: &[SectionRecord], factor: usize) -> Result<(StackAlignment, AlignedVolume)> {
    if factor == 0 {
        return Err(Error::Invalid("downsample factor must be positive".into()));
    }
    let mut alignment = align_stack(sections)?;
    alignment.downsample_factor = factor;
    let dims = sections[0].dims();
    if let Some(s) = sections.iter().find(|s| s.dims() != dims) {
        return Err(Error::shape(format!("{dims:?} for every section"), format!("{} {:?}", s.id, s.dims())));
    }
    let (lh, lw) = (dims.0.div_ceil(factor), dims.1.div_ceil(factor));
    let mut data = Vec::with_capacity(sections.len() * 3 * lh * lw);
    for (s, &t) in sections.iter().zip(&alignment.translations) {
        let corner = s.image.get_pixel(0, 0).0;
        for ch in 0..3 {
            let plane = Raster::from_fn(dims.0, dims.1, |r, c| s.image.get_pixel(c as u32, r as u32).0[ch] as f32 / 255.0);
            let low = downsample_mean(&to_aligned(&plane, t, corner[ch] as f32 / 255.0), factor);
            data.extend_from_slice(low.as_slice());
        }
    }
    Ok((
        alignment,
        AlignedVolume {
            depth: sections.len(),
            height: lh,
            width: lw,
            data,
            section_dims: dims,
            factor,
        },
    ))
}

/// Binary dense-bundle prior of one section, in that section's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub section_id: String,
    pub mask: Mask,
    pub resolution: Resolution,
}

/// Priors for a whole stack plus the alignment that relates their frames.
#[derive(Debug, Clone)]
pub struct PriorStack {
    pub alignment: StackAlignment,
    pub priors: Vec<PriorMap>,
}

impl PriorStack {
    pub fn new(alignment: StackAlignment, priors: Vec<PriorMap>) -> Result<Self> {
        if alignment.len() != priors.len() {
            return Err(Error::shape(format!("{} priors", alignment.len()), priors.len()));
        }
        Ok(PriorStack { alignment, priors })
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Prior of section `j` expressed in the coordinates of section `i`.
    pub fn in_frame_of(&self, j: usize, i: usize) -> Mask {
        let (ti, tj) = (self.alignment.translations[i], self.alignment.translations[j]);
        let m = &self.priors[j].mask;
        m.crop((ti.0 - tj.0) as isize, (ti.1 - tj.1) as isize, m.height(), m.width(), 0)
    }
}

/// Ground-truth dense bundles dilated by `dilation_um`, for testing the
/// filter logic independently of the prior network.
pub fn oracle_priors(sections: &[SectionRecord], dilation_um: f64) -> Result<Vec<PriorMap>> {
    sections
        .iter()
        .map(|s| {
            let dense = s
                .label_mask(LABEL_DENSE)
                .ok_or_else(|| Error::Invalid(format!("oracle prior needs charting for section {}", s.id)))?;
            let radius = s.resolution.um_to_px(dilation_um).round().max(0.0) as usize;
            Ok(PriorMap {
                section_id: s.id.clone(),
                mask: dense.dilate(radius),
                resolution: s.resolution,
            })
        })
        .collect()
}

/// Settings of the coarse prior network and its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub downsample: usize,
    pub base_width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Side of the square training crops.
    pub crop_size: usize,
    /// A low-resolution voxel is labeled dense when at least this fraction
    /// of its pixels is.
    pub label_fraction: f32,
    pub threshold: f32,
    pub focal: FocalParams,
    pub oracle_dilation_um: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            downsample: DEFAULT_DOWNSAMPLE,
            base_width: 8,
            depth: 3,
            epochs: 60,
            learning_rate: 3e-3,
            batch_size: 16,
            steps_per_epoch: 20,
            crop_size: 32,
            label_fraction: 0.5,
            threshold: 0.5,
            focal: FocalParams::default(),
            oracle_dilation_um: 100.0,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.base_width == 0 || self.batch_size < 2 {
            return Err(Error::Invalid("prior downsample and base_width must be positive, batch_size >= 2".into()));
        }
        if self.crop_size == 0 || self.crop_size % (1 << self.depth) != 0 {
            return Err(Error::Invalid(format!("prior crop_size must be a positive multiple of {}", 1 << self.depth)));
        }
        if self.depth < 2 {
            return Err(Error::Invalid(format!("prior depth must be >= 2, got {}", self.depth)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("prior learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Invalid("prior label_fraction and threshold must be in [0, 1]".into()));
        }
        self.focal.validate()
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                base_width: self.base_width,
                depth: self.depth,
                patch_size: 1 << (self.depth + 2),
                ..Default::default()
            },
            arm: ClassifierArmConfig {
                fc_sizes: vec![8],
                ..Default::default()
            },
        }
    }
}

/// The prior network. Only a trained or loaded model can produce priors.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub net: MultiTaskNet,
    trained: bool,
}

impl PriorModel {
    pub fn untrained(cfg: &PriorConfig) -> Result<Self> {
        Ok(PriorModel {
            net: MultiTaskNet::new(cfg.model_config(), cfg.seed)?,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save_checkpoint(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(PriorModel {
            net: MultiTaskNet::load_checkpoint(path)?,
            trained: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plane {
    Coronal,
    Axial,
    Sagittal,
}

const PLANES: [Plane; 3] = [Plane::Coronal, Plane::Axial, Plane::Sagittal];

/// Slice geometry: (count, rows, cols) and the voxel behind slice pixel (k, r, c).
fn plane_geometry(p: Plane, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
    match p {
        Plane::Coronal => (d, h, w),
        Plane::Axial => (h, d, w),
        Plane::Sagittal => (w, d, h),
    }
}

fn voxel(p: Plane, k: usize, r: usize, c: usize) -> (usize, usize, usize) {
    match p {
        Plane::Coronal => (k, r, c),
        Plane::Axial => (r, k, c),
        Plane::Sagittal => (r, c, k),
    }
}

fn padded(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-padded slice tensors `[1, 3, ph, pw]` and the unpadded shape.
fn slice_tensor(vol: &AlignedVolume, p: Plane, k: usize, m: usize) -> (Tensor, usize, usize) {
    let (_, rows, cols) = plane_geometry(p, vol.depth, vol.height, vol.width);
    let (ph, pw) = (padded(rows, m), padded(cols, m));
    let mut t = Tensor::zeros([1, 3, ph, pw]);
    for r in 0..ph {
        let sr = reflect(r as isize, rows as isize) as usize;
        for c in 0..pw {
            let sc = reflect(c as isize, cols as isize) as usize;
            let (z, y, x) = voxel(p, k, sr, sc);
            for ch in 0..3 {
                t.data[(ch * ph + r) * pw + c] = vol.at(z, ch, y, x);
            }
        }
    }
    (t, rows, cols)
}

fn concat(batch: &[Tensor]) -> Tensor {
    crate::model::stack(batch)
}

/// Per-voxel probabilities from one plane, `[z][y][x]`.
fn plane_probabilities(net: &MultiTaskNet, vol: &AlignedVolume, p: Plane) -> Result<Vec<f32>> {
    let m = net.config().size_multiple();
    let (count, rows, cols) = plane_geometry(p, vol.depth, vol.height, vol.width);
    let (ph, pw) = (padded(rows, m), padded(cols, m));
    let mut out = vec![0.0f32; vol.depth * vol.height * vol.width];
    for chunk in (0..count).collect::<Vec<_>>().chunks(8) {
        let xs: Vec<Tensor> = chunk.iter().map(|&k| slice_tensor(vol, p, k, m).0).collect();
        let y = net.seg_forward(&concat(&xs))?;
        for (b, &k) in chunk.iter().enumerate() {
            let s = y.sample(b);
            for r in 0..rows {
                for c in 0..cols {
                    let (z, yy, x) = voxel(p, k, r, c);
                    out[(z * vol.height + yy) * vol.width + x] = s[r * pw + c];
                }
            }
        }
        debug_assert_eq!(y.h(), ph);
    }
    Ok(out)
}

/// Element-wise mean of the three plane probability volumes.
pub fn fuse_planes(a: &[f32], b: &[f32], c: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(Error::shape(a.len(), format!("{} and {}", b.len(), c.len())));
    }
    Ok(a.iter().zip(b).zip(c).map(|((x, y), z)| (x + y + z) / 3.0).collect())
}

/// Where the prior comes from.
pub enum PriorSource<'a> {
    Model(&'a PriorModel),
    /// Dilated ground truth; every section must be charted.
    Oracle { dilation_um: f64 },
}

/// Per-section priors: the three-plane prediction of the volume, fused,
/// thresholded, upsampled and moved back into each section's frame.
pub fn triplanar_prior(
    sections: &[SectionRecord],
    alignment: &StackAlignment,
    volume: &AlignedVolume,
    source: PriorSource<'_>,
    threshold: f32,
) -> Result<Vec<PriorMap>> {
    if alignment.len() != sections.len() || volume.depth != sections.len() {
        return Err(Error::shape(format!("{} sections", sections.len()), format!("alignment {} volume {}", alignment.len(), volume.depth)));
    }
    let model = match source {
        PriorSource::Oracle { dilation_um } => return oracle_priors(sections, dilation_um),
        PriorSource::Model(m) if !m.is_trained() => {
            return Err(Error::Invalid("prior model is untrained; train it or use the oracle prior".into()))
        }
        PriorSource::Model(m) => m,
    };
    let volume = &volume.standardized();
    let planes = PLANES
        .iter()
        .map(|&p| plane_probabilities(&model.net, volume, p))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_planes(&planes[0], &planes[1], &planes[2])?;
    let plane_len = volume.height * volume.width;
    Ok(sections
        .iter()
        .enumerate()
        .map(|(z, s)| {
            let low = Raster::from_vec(
                volume.height,
                volume.width,
                fused[z * plane_len..(z + 1) * plane_len].iter().map(|&v| u8::from(v >= threshold)).collect(),
            )
            .expect("plane size");
            let up = upsample_nearest(&low, volume.factor, volume.section_dims);
            PriorMap {
                section_id: s.id.clone(),
                mask: from_aligned(&up, alignment.translations[z], 0),
                resolution: s.resolution,
            }
        })
        .collect())
}

/// Low-resolution dense labels in the aligned frame; `None` for uncharted sections.
fn label_volume(sections: &[SectionRecord], alignment: &StackAlignment, cfg: &PriorConfig) -> Vec<Option<Raster<u8>>> {
    sections
        .iter()
        .zip(&alignment.translations)
        .map(|(s, &t)| {
            let dense = s.label_mask(LABEL_DENSE)?.map(f32::from);
            let low = downsample_mean(&to_aligned(&dense, t, 0.0), cfg.downsample);
            Some(low.map(|v| u8::from(v >= cfg.label_fraction)))
        })
        .collect()
}

/// One training crop: input `[3, n, n]`, targets and loss mask `[n, n]`.
struct Crop {
    x: Vec<f32>,
    target: Vec<u8>,
    weight: Vec<bool>,
}

/// A square crop of plane `p` with top-left `(r0, c0)` in slice `k`, reflected
/// at the borders. Only pixels inside the plane with a label are weighted,
/// optionally mirrored.
#[allow(clippy::too_many_arguments)]
fn crop(
    vol: &AlignedVolume,
    labels: &[Option<Raster<u8>>],
    p: Plane,
    k: usize,
    (r0, c0): (isize, isize),
    n: usize,
    (flip_v, flip_h): (bool, bool),
) -> Crop {
    let (_, rows, cols) = plane_geometry(p, vol.depth, vol.height, vol.width);
    let mut out = Crop {
        x: vec![0.0; 3 * n * n],
        target: vec![0; n * n],
        weight: vec![false; n * n],
    };
    for i in 0..n {
        let r = r0 + if flip_v { n - 1 - i } else { i } as isize;
        let sr = reflect(r, rows as isize) as usize;
        for j in 0..n {
            let c = c0 + if flip_h { n - 1 - j } else { j } as isize;
            let sc = reflect(c, cols as isize) as usize;
            let (z, y, x) = voxel(p, k, sr, sc);
            for ch in 0..3 {
                out.x[(ch * n + i) * n + j] = vol.at(z, ch, y, x);
            }
            let inside = r == sr as isize && c == sc as isize;
            if let (true, Some(l)) = (inside, &labels[z]) {
                out.target[i * n + j] = l.get(y, x);
                out.weight[i * n + j] = true;
            }
        }
    }
    out
}

/// Trains the prior network on random crops mixing coronal, axial and
/// sagittal slices of the aligned volume. Each crop is anchored on a voxel of
/// a charted section (a dense one half of the time) and only charted voxels
/// contribute to the loss.
pub fn train_prior(sections: &[SectionRecord], cfg: &PriorConfig) -> Result<PriorModel> {
    cfg.validate()?;
    if !sections.iter().any(|s| s.charted) {
        return Err(Error::Empty("no charted sections to train the prior on".into()));
    }
    let (alignment, vol) = build_stack(sections, cfg.downsample)?;
    let vol = vol.standardized();
    let labels = label_volume(sections, &alignment, cfg);
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (z, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        for y in 0..vol.height {
            for x in 0..vol.width {
                anchors.push((z, y, x));
                if l.get(y, x) != 0 {
                    positives.push((z, y, x));
                }
            }
        }
    }
    let mut model = PriorModel::untrained(cfg)?;
    let n = cfg.crop_size;
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_696f_72);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let crops: Vec<Crop> = (0..cfg.batch_size)
                .map(|_| {
                    let pool = if !positives.is_empty() && rng.random_bool(0.5) { &positives } else { &anchors };
                    let (z, y, x) = pool[rng.random_range(0..pool.len())];
                    let p = PLANES[rng.random_range(0..3)];
                    let (k, r, c) = match p {
                        Plane::Coronal => (z, y, x),
                        Plane::Axial => (y, z, x),
                        Plane::Sagittal => (x, z, y),
                    };
                    let origin = (
                        r as isize - rng.random_range(0..n) as isize,
                        c as isize - rng.random_range(0..n) as isize,
                    );
                    crop(&vol, &labels, p, k, origin, n, (rng.random_bool(0.5), rng.random_bool(0.5)))
                })
                .collect();
            let x = Tensor::from_vec([crops.len(), 3, n, n], crops.iter().flat_map(|c| c.x.iter().copied()).collect());
            let target: Vec<u8> = crops.iter().flat_map(|c| c.target.iter().copied()).collect();
            let weight: Vec<bool> = crops.iter().flat_map(|c| c.weight.iter().copied()).collect();

            let (logits, cache) = model.net.seg_forward_train(&x)?;
            let keep: Vec<usize> = (0..weight.len()).filter(|&i| weight[i]).collect();
            let sub_logits: Vec<f32> = keep.iter().map(|&i| logits.data[i]).collect();
            let sub_targets: Vec<u8> = keep.iter().map(|&i| target[i]).collect();
            let (loss, sub_grad) = focal_loss_logits(&sub_logits, &sub_targets, &cfg.focal)?;
            let mut grad = vec![0.0f32; logits.len()];
            for (&i, g) in keep.iter().zip(sub_grad) {
                grad[i] = g;
            }
            model.net.seg_backward(cache, &Tensor::from_vec(logits.shape, grad));
            opt.step(&mut model.net);
            total += loss;
        }
        debug!("prior epoch {}: loss {:.5}", epoch + 1, total / cfg.steps_per_epoch.max(1) as f64);
    }
    model.trained = true;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Closest pixel of the region.
    MinPixel,
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuityConfig {
    pub max_distance_um: f64,
    pub distance_mode: DistanceMode,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        ContinuityConfig {
            max_distance_um: 200.0,
            distance_mode: DistanceMode::MinPixel,
        }
    }
}

impl ContinuityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_distance_um >= 0.0 && self.max_distance_um.is_finite()) {
            return Err(Error::Invalid("max_distance_um must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Averaged prior of the immediate neighbors of section `i`, in its frame.
/// Two binary masks averaged and cut at 0.5 keep every pixel either marks.
pub fn neighbor_prior(priors: &PriorStack, i: usize) -> Option<Mask> {
    let neighbors: Vec<usize> = [i.checked_sub(1), Some(i + 1)]
        .into_iter()
        .flatten()
        .filter(|&j| j < priors.len())
        .collect();
    let masks: Vec<Mask> = neighbors.iter().map(|&j| priors.in_frame_of(j, i)).collect();
    let first = masks.first()?;
    let (h, w) = first.dims();
    Some(Raster::from_fn(h, w, |r, c| {
        let mean = masks.iter().map(|m| m.get(r, c) as f32).sum::<f32>() / masks.len() as f32;
        u8::from(mean >= 0.5)
    }))
}

/// Keeps regions lying within `max_distance_um` of the neighbors' prior.
/// With no neighbors every region is kept.
pub fn continuity_filter(
    regions: Vec<BundleRegion>,
    section_index: usize,
    priors: &PriorStack,
    cfg: &ContinuityConfig,
) -> Vec<BundleRegion> {
    let Some(avg) = neighbor_prior(priors, section_index) else {
        info!("section {section_index}: no neighboring priors, continuity filter skipped");
        return regions;
    };
    let res = priors.priors[section_index].resolution;
    let dist = distance_transform(&avg, &res);
    let (h, w) = dist.dims();
    let before = regions.len();
    let kept: Vec<BundleRegion> = regions
        .into_iter()
        .filter(|reg| {
            let d = match cfg.distance_mode {
                DistanceMode::MinPixel => reg
                    .pixels
                    .iter()
                    .map(|&(r, c)| dist.get(r as usize, c as usize))
                    .fold(f64::INFINITY, f64::min),
                DistanceMode::Centroid => {
                    let r = (reg.centroid.0.round() as usize).min(h - 1);
                    let c = (reg.centroid.1.round() as usize).min(w - 1);
                    dist.get(r, c)
                }
            };
            d <= cfg.max_distance_um
        })
        .collect();
    debug!("section {section_index}: continuity kept {} of {before}", kept.len());
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub min_area_mm2: f64,
    /// Regions whose centroid is closer than this to the tissue outline go.
    pub boundary_margin_mm: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            min_area_mm2: 2.0,
            boundary_margin_mm: 1.0,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("min_area_mm2", self.min_area_mm2), ("boundary_margin_mm", self.boundary_margin_mm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Distance in μm from each pixel to the nearest non-tissue pixel, with
/// everything outside the image counted as non-tissue.
pub fn boundary_distance(tissue: &Mask, res: &Resolution) -> Raster<f64> {
    let (h, w) = tissue.dims();
    let outside = Raster::from_fn(h + 2, w + 2, |r, c| {
        u8::from(r == 0 || c == 0 || r == h + 1 || c == w + 1 || tissue.get(r - 1, c - 1) == 0)
    });
    let d = distance_transform(&outside, res);
    Raster::from_fn(h, w, |r, c| d.get(r + 1, c + 1))
}

/// Drops small regions and regions hugging the tissue outline.
pub fn postprocess(regions: Vec<BundleRegion>, section: &SectionRecord, cfg: &PostprocessConfig) -> Vec<BundleRegion> {
    let res = section.resolution;
    let dist = boundary_distance(&section.tissue_or_estimate(), &res);
    let (h, w) = dist.dims();
    let margin_um = cfg.boundary_margin_mm * 1000.0;
    regions
        .into_iter()
        .filter(|reg| {
            let r = (reg.centroid.0.round() as usize).min(h - 1);
            let c = (reg.centroid.1.round() as usize).min(w - 1);
            reg.area_mm2(&res) >= cfg.min_area_mm2 && dist.get(r, c) >= margin_um
        })
        .collect()
}
