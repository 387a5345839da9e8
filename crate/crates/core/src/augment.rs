//! Geometric augmentation, white-matter-constrained positive pairs for the
//! contrastive arm, and class-balanced patch sampling.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{Mask, Resolution, SectionRecord};
use crate::error::{Error, Result};
use crate::model::image_to_tensor;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct GeoAugConfig {
    /// Translation range in pixels, per axis.
    pub translate_px: (i32, i32),
    pub rotate_deg: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    pub scale: (f64, f64),
}

impl Default for GeoAugConfig {
    fn default() -> Self {
        GeoAugConfig {
            translate_px: (-50, 50),
            rotate_deg: (-20.0, 20.0),
            hflip: true,
            vflip: true,
            scale: (0.9, 1.2),
        }
    }
}

impl GeoAugConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.translate_px.0 <= self.translate_px.1
            && self.rotate_deg.0 <= self.rotate_deg.1
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid geometric augmentation ranges: {self:?}")))
        }
    }
}

/// One concrete draw of the geometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoParams {
    /// (rows, cols).
    pub translate: (f64, f64),
    pub rotate_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
}

impl GeoParams {
    pub const IDENTITY: GeoParams = GeoParams {
        translate: (0.0, 0.0),
        rotate_deg: 0.0,
        hflip: false,
        vflip: false,
        scale: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(cfg: &GeoAugConfig, rng: &mut R) -> Self {
        let span = |lo: f64, hi: f64, rng: &mut R| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (tlo, thi) = (cfg.translate_px.0 as f64, cfg.translate_px.1 as f64);
        GeoParams {
            translate: (span(tlo, thi, rng).round(), span(tlo, thi, rng).round()),
            rotate_deg: span(cfg.rotate_deg.0, cfg.rotate_deg.1, rng),
            hflip: cfg.hflip && rng.random_bool(0.5),
            vflip: cfg.vflip && rng.random_bool(0.5),
            scale: span(cfg.scale.0, cfg.scale.1, rng),
        }
    }

    /// Maps an output pixel (relative to the output center) back to input
    /// coordinates (relative to the input center).
    fn inverse(&self, y: f64, x: f64) -> (f64, f64) {
        let (y, x) = (y - self.translate.0, x - self.translate.1);
        let (s, c) = self.rotate_deg.to_radians().sin_cos();
        let (y, x) = ((c * y - s * x) / self.scale, (s * y + c * x) / self.scale);
        let y = if self.vflip { -y } else { y };
        let x = if self.hflip { -x } else { x };
        (y, x)
    }

    fn is_identity(&self) -> bool {
        *self == GeoParams::IDENTITY
    }
}

fn reflect_f(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let m = v.rem_euclid(period);
    if m <= max {
        m
    } else {
        period - m
    }
}

/// Resamples a window of `src` (a `[1, C, H, W]` tensor) centered at
/// `center` under `params`; bilinear for the image, nearest for the mask,
/// mirror-reflected at the source borders.
pub fn warp(
    src: &Tensor,
    mask: Option<&Mask>,
    center: (f64, f64),
    params: &GeoParams,
    out_h: usize,
    out_w: usize,
) -> (Tensor, Option<Mask>) {
    let (ch, h, w) = (src.c(), src.h(), src.w());
    let mut out = Tensor::zeros([1, ch, out_h, out_w]);
    let mut out_mask = mask.map(|_| Mask::filled(out_h, out_w, 0));
    let (oc_y, oc_x) = ((out_h as f64 - 1.0) / 2.0, (out_w as f64 - 1.0) / 2.0);
    let plane = h * w;
    let oplane = out_h * out_w;
    for r in 0..out_h {
        for c in 0..out_w {
            let (dy, dx) = params.inverse(r as f64 - oc_y, c as f64 - oc_x);
            let (sy, sx) = (reflect_f(center.0 + dy, h), reflect_f(center.1 + dx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for k in 0..ch {
                let p = &src.data[k * plane..(k + 1) * plane];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                out.data[k * oplane + r * out_w + c] = top * (1.0 - ty) + bot * ty;
            }
            if let (Some(m), Some(om)) = (mask, out_mask.as_mut()) {
                let (ny, nx) = (sy.round() as usize, sx.round() as usize);
                om.set(r, c, m.get(ny.min(h - 1), nx.min(w - 1)));
            }
        }
    }
    (out, out_mask)
}

/// Applies one random geometric draw identically to a patch and its mask.
pub fn geo_augment<R: Rng + ?Sized>(patch: &Tensor, mask: &Mask, cfg: &GeoAugConfig, rng: &mut R) -> (Tensor, Mask) {
    let params = GeoParams::draw(cfg, rng);
    apply_geo(patch, mask, &params)
}

pub fn apply_geo(patch: &Tensor, mask: &Mask, params: &GeoParams) -> (Tensor, Mask) {
    assert_eq!((patch.h(), patch.w()), mask.dims(), "patch and mask must be aligned");
    if params.is_identity() {
        return (patch.clone(), mask.clone());
    }
    let center = ((patch.h() as f64 - 1.0) / 2.0, (patch.w() as f64 - 1.0) / 2.0);
    let (t, m) = warp(patch, Some(mask), center, params, patch.h(), patch.w());
    (t, m.expect("mask requested"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct PairAugConfig {
    pub max_crop_offset_um: f64,
    pub blur_sigma: (f64, f64),
    /// Additive Gaussian noise, as a fraction of the [0, 1] dynamic range.
    pub noise_std: f64,
    /// Fixed band of acceptable crop means (fractions of 255); estimated
    /// per section when absent.
    pub wm_mean_band: Option<(f64, f64)>,
    pub max_resample_attempts: usize,
}

impl Default for PairAugConfig {
    fn default() -> Self {
        PairAugConfig {
            max_crop_offset_um: 20.0,
            blur_sigma: (0.05, 0.3),
            noise_std: 0.02,
            wm_mean_band: None,
            max_resample_attempts: 50,
        }
    }
}

impl PairAugConfig {
    /// Raises the offset bound to one pixel when the resolution is coarser
    /// than the configured physical bound.
    pub fn for_resolution(mut self, res: &Resolution) -> Self {
        self.max_crop_offset_um = self.max_crop_offset_um.max(res.microns_per_pixel);
        self
    }

    pub fn max_offset_px(&self, res: &Resolution) -> f64 {
        res.um_to_px(self.max_crop_offset_um)
    }

    pub fn validate(&self, res: &Resolution) -> Result<()> {
        if self.max_offset_px(res) < 1.0 - 1e-9 {
            return Err(Error::Invalid(format!(
                "max_crop_offset_um {} is below one pixel at {} um/px",
                self.max_crop_offset_um, res.microns_per_pixel
            )));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) || self.noise_std < 0.0 {
            return Err(Error::Invalid("blur_sigma must be a positive range and noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// Section-level data needed to draw positive pairs and training patches.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub id: String,
    pub resolution: Resolution,
    /// `[1, 3, H, W]`, scaled to [0, 1].
    pub image: Tensor,
    /// Segmentation target (binary).
    pub target: Mask,
    pub tissue: Mask,
    /// Grayscale band (0–255) of white matter crop means.
    pub wm_band: (f64, f64),
    gray_integral: Vec<f64>,
    target_integral: Vec<u32>,
    positives: Vec<u32>,
}

fn integral<T: Copy + Into<f64>>(h: usize, w: usize, v: impl Fn(usize) -> T) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += v(r * w + c).into();
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn window_sum<T: Copy + std::ops::Add<Output = T> + std::ops::Sub<Output = T>>(
    s: &[T],
    w: usize,
    r: usize,
    c: usize,
    ph: usize,
    pw: usize,
) -> T {
    let stride = w + 1;
    (s[(r + ph) * stride + c + pw] + s[r * stride + c]) - (s[r * stride + c + pw] + s[(r + ph) * stride + c])
}

/// White-matter intensity band: mode of the tissue histogram ± one sample
/// standard deviation of white-matter grayscale values.
pub fn wm_band(section: &SectionRecord) -> (f64, f64) {
    let gray = section.grayscale();
    let tissue = section.tissue_or_estimate();
    let mut hist = [0usize; 256];
    for (g, &t) in gray.as_slice().iter().zip(tissue.as_slice()) {
        if t != 0 {
            hist[g.round().clamp(0.0, 255.0) as usize] += 1;
        }
    }
    let mode = hist.iter().enumerate().max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i))).map(|(i, _)| i).unwrap_or(0) as f64;
    let wm: Vec<f64> = match &section.wm_mask {
        Some(m) => gray.as_slice().iter().zip(m.as_slice()).filter(|(_, &v)| v != 0).map(|(&g, _)| g as f64).collect(),
        None => gray
            .as_slice()
            .iter()
            .zip(tissue.as_slice())
            .filter(|(&g, &t)| t != 0 && (g as f64 - mode).abs() < 20.0)
            .map(|(&g, _)| g as f64)
            .collect(),
    };
    let n = wm.len() as f64;
    let std = if n > 1.0 {
        let mean = wm.iter().sum::<f64>() / n;
        (wm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mode - std, mode + std)
}

impl PatchSource {
    pub fn new(section: &SectionRecord, target: Mask) -> Result<Self> {
        if target.dims() != section.dims() {
            return Err(Error::shape(format!("{:?}", section.dims()), format!("target {:?}", target.dims())));
        }
        let (h, w) = section.dims();
        let gray = section.grayscale();
        let g = gray.as_slice();
        let t = target.as_slice();
        let ti = integral(h, w, |i| t[i] as u32);
        let positives = t.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i as u32).collect();
        Ok(PatchSource {
            id: section.id.clone(),
            resolution: section.resolution,
            image: image_to_tensor(&section.image, 0, 0, h, w),
            tissue: section.tissue_or_estimate(),
            wm_band: wm_band(section),
            gray_integral: integral(h, w, |i| g[i]),
            target_integral: ti.into_iter().map(|v| v as u32).collect(),
            target,
            positives,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.image.h(), self.image.w())
    }

    /// Replaces the segmentation target (pseudo-labels change every epoch).
    pub fn set_target(&mut self, target: Mask) {
        let (h, w) = self.dims();
        assert_eq!(target.dims(), (h, w), "target dims");
        let t = target.as_slice();
        self.target_integral = integral(h, w, |i| t[i] as u32).into_iter().map(|v| v as u32).collect();
        self.positives = t.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i as u32).collect();
        self.target = target;
    }

    pub fn mean_gray(&self, r: usize, c: usize, size: usize) -> f64 {
        let (_, w) = self.dims();
        window_sum(&self.gray_integral, w, r, c, size, size) / (size * size) as f64
    }

    pub fn target_count(&self, r: usize, c: usize, size: usize) -> u32 {
        let (_, w) = self.dims();
        window_sum(&self.target_integral, w, r, c, size, size)
    }

    pub fn crop(&self, r: usize, c: usize, size: usize) -> (Tensor, Mask) {
        (crop_tensor(&self.image, r, c, size), self.target.crop(r as isize, c as isize, size, size, 0))
    }

    /// Patch class: fiber iff at least 0.5% of the patch is target.
    pub fn is_fiber(&self, r: usize, c: usize, size: usize) -> bool {
        self.target_count(r, c, size) as f64 >= FIBER_PATCH_FRACTION * (size * size) as f64
    }
}

pub const FIBER_PATCH_FRACTION: f64 = 0.005;

fn crop_tensor(src: &Tensor, r: usize, c: usize, size: usize) -> Tensor {
    let (ch, w) = (src.c(), src.w());
    let plane = src.h() * w;
    let mut out = Tensor::zeros([1, ch, size, size]);
    for k in 0..ch {
        for y in 0..size {
            let s = k * plane + (r + y) * w + c;
            out.data[k * size * size + y * size..k * size * size + (y + 1) * size].copy_from_slice(&src.data[s..s + size]);
        }
    }
    out
}

fn gaussian_blur(t: &mut Tensor, sigma: f64) {
    let rad = (3.0 * sigma).ceil().max(1.0) as usize;
    let k: Vec<f32> = (0..=2 * rad)
        .map(|i| {
            let d = i as f64 - rad as f64;
            (-d * d / (2.0 * sigma * sigma)).exp() as f32
        })
        .collect();
    let norm: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / norm).collect();
    let (ch, h, w) = (t.c(), t.h(), t.w());
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for p in 0..t.n() * ch {
        let plane = &mut t.data[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                tmp[r * w + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * plane[r * w + clamp(c as isize + i as isize - rad as isize, w)])
                    .sum();
            }
        }
        for r in 0..h {
            for c in 0..w {
                plane[r * w + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[clamp(r as isize + i as isize - rad as isize, h) * w + c])
                    .sum();
            }
        }
    }
}

/// A positive pair with bookkeeping for the offset and WM constraints.
#[derive(Debug, Clone)]
pub struct PositivePair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    /// (rows, cols) offset of view_b from the anchor, in pixels.
    pub offset: (i64, i64),
    pub fallback: bool,
    pub view_b_mean: f64,
    pub blur_sigma: f64,
}

/// Draws a positive pair around the anchor patch at `origin`.
pub fn positive_pair<R: Rng + ?Sized>(
    source: &PatchSource,
    origin: (usize, usize),
    size: usize,
    cfg: &PairAugConfig,
    rng: &mut R,
) -> Result<PositivePair> {
    let (h, w) = source.dims();
    if origin.0 + size > h || origin.1 + size > w {
        return Err(Error::Invalid(format!("anchor patch at {origin:?} exceeds section {h}x{w}")));
    }
    let (lo, hi) = match cfg.wm_mean_band {
        Some((a, b)) => (a * 255.0, b * 255.0),
        None => source.wm_band,
    };
    let max_off = cfg.max_offset_px(&source.resolution);
    let m = max_off.floor() as i64;
    let mut found = None;
    for _ in 0..cfg.max_resample_attempts {
        let dy = rng.random_range(-m..=m);
        let dx = rng.random_range(-m..=m);
        if ((dy * dy + dx * dx) as f64).sqrt() > max_off {
            continue;
        }
        let (r, c) = (origin.0 as i64 + dy, origin.1 as i64 + dx);
        if r < 0 || c < 0 || r as usize + size > h || c as usize + size > w {
            continue;
        }
        let mean = source.mean_gray(r as usize, c as usize, size);
        if (lo..=hi).contains(&mean) {
            found = Some(((dy, dx), mean));
            break;
        }
    }
    let fallback = found.is_none();
    let ((dy, dx), mean) = found.unwrap_or(((0, 0), source.mean_gray(origin.0, origin.1, size)));
    let view_b = crop_tensor(&source.image, (origin.0 as i64 + dy) as usize, (origin.1 as i64 + dx) as usize, size);

    let mut view_a = crop_tensor(&source.image, origin.0, origin.1, size);
    let sigma = if cfg.blur_sigma.1 > cfg.blur_sigma.0 {
        rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1)
    } else {
        cfg.blur_sigma.0
    };
    gaussian_blur(&mut view_a, sigma);
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std as f32).expect("valid std");
        view_a.data.iter_mut().for_each(|v| *v = (*v + noise.sample(rng)).clamp(0.0, 1.0));
    }
    Ok(PositivePair {
        view_a,
        view_b,
        offset: (dy, dx),
        fallback,
        view_b_mean: mean,
        blur_sigma: sigma,
    })
}

/// One sampled training patch.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub image: Tensor,
    pub mask: Mask,
    pub fiber: bool,
    pub source: usize,
    pub origin: (usize, usize),
}

const MAX_SAMPLE_ATTEMPTS: usize = 200;

/// Draws `batch_size` patches; each is a fiber patch with probability
/// `fiber_fraction`, otherwise a background patch centered in tissue.
pub fn patch_sampler<R: Rng + ?Sized>(
    sources: &[PatchSource],
    size: usize,
    batch_size: usize,
    fiber_fraction: f64,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    if sources.is_empty() {
        return Err(Error::Empty("patch sampler needs at least one section".into()));
    }
    if !(0.0..=1.0).contains(&fiber_fraction) {
        return Err(Error::Invalid(format!("fiber_fraction must be in [0,1], got {fiber_fraction}")));
    }
    if sources.iter().any(|s| s.dims().0 < size || s.dims().1 < size) {
        return Err(Error::Invalid(format!("sections must be at least {size}x{size}")));
    }
    let total_pos: usize = sources.iter().map(|s| s.positives.len()).sum();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let want_fiber = fiber_fraction > 0.0 && rng.random_bool(fiber_fraction);
        if want_fiber && total_pos == 0 {
            return Err(Error::Empty("fiber patches requested but no target pixels exist".into()));
        }
        let draw = |fiber: bool, rng: &mut R| {
            if fiber {
                draw_fiber(sources, size, total_pos, rng)
            } else {
                draw_background(sources, size, rng)
            }
        };
        // When one class cannot be found (e.g. pseudo-labels covering all
        // tissue), the patch is drawn from the other class.
        let (fiber, picked) = match draw(want_fiber, rng) {
            Some(p) => (want_fiber, Some(p)),
            None if want_fiber || total_pos > 0 => (!want_fiber, draw(!want_fiber, rng)),
            None => (false, None),
        };
        let (si, r, c) = picked.ok_or_else(|| {
            Error::Empty(format!(
                "no fiber or background patch found after {MAX_SAMPLE_ATTEMPTS} attempts each"

            ))
        })?;
        let (image, mask) = sources[si].crop(r, c, size);
        out.push(PatchSample {
            image,
            mask,
            fiber,
            source: si,
            origin: (r, c),
        });
    }
    Ok(out)
}

fn draw_fiber<R: Rng + ?Sized>(sources: &[PatchSource], size: usize, total_pos: usize, rng: &mut R) -> Option<(usize, usize, usize)> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let mut k = rng.random_range(0..total_pos);
        let si = sources
            .iter()
            .position(|s| {
                if k < s.positives.len() {
                    true
                } else {
                    k -= s.positives.len();
                    false
                }
            })
            .expect("k < total");
        let s = &sources[si];
        let (h, w) = s.dims();
        let p = s.positives[k] as usize;
        let (pr, pc) = (p / w, p % w);
        let r = pr.saturating_sub(rng.random_range(0..size)).min(h - size);
        let c = pc.saturating_sub(rng.random_range(0..size)).min(w - size);
        if s.is_fiber(r, c, size) {
            return Some((si, r, c));
        }
    }
    None
}

fn draw_background<R: Rng + ?Sized>(sources: &[PatchSource], size: usize, rng: &mut R) -> Option<(usize, usize, usize)> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let si = rng.random_range(0..sources.len());
        let s = &sources[si];
        let (h, w) = s.dims();
        let r = rng.random_range(0..=h - size);
        let c = rng.random_range(0..=w - size);
        if s.tissue.get(r + size / 2, c + size / 2) != 0 && !s.is_fiber(r, c, size) {
            return Some((si, r, c));
        }
    }
    None
}

/// Converts an image patch back to 8-bit RGB (for debugging output).
pub fn tensor_to_image(t: &Tensor) -> RgbImage {
    let (h, w) = (t.h(), t.w());
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (t.data[k * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_section, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn section() -> SectionRecord {
        generate_section(&SynthConfig::tiny(4, 1), 0).unwrap()
    }

    fn random_patch(seed: u64, size: usize) -> (Tensor, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_vec([1, 3, size, size], (0..3 * size * size).map(|_| rng.random()).collect());
        let m = Mask::from_fn(size, size, |r, c| u8::from((r / 16 + c / 16) % 2 == 0));
        (t, m)
    }

    #[test]
    fn identity_draw_is_identity() {
        let (t, m) = random_patch(1, 32);
        let cfg = GeoAugConfig {
            translate_px: (0, 0),
            rotate_deg: (0.0, 0.0),
            hflip: false,
            vflip: false,
            scale: (1.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(geo_augment(&t, &m, &cfg, &mut rng), (t, m));
    }

    #[test]
    fn hflip_is_an_involution() {
        let (t, m) = random_patch(2, 31);
        let p = GeoParams {
            hflip: true,
            ..GeoParams::IDENTITY
        };
        let (t1, m1) = apply_geo(&t, &m, &p);
        assert_ne!(m1, m);
        let (t2, m2) = apply_geo(&t1, &m1, &p);
        assert_eq!(m2, m);
        assert!(t2.data.iter().zip(&t.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn rotation_round_trip_agrees_on_interior() {
        let s = section();
        let src = PatchSource::new(&s, s.bundle_mask().unwrap()).unwrap();
        let (t, m) = src.crop(0, 16, 128);
        assert!(m.count() > 500);
        let fwd = GeoParams {
            rotate_deg: 20.0,
            ..GeoParams::IDENTITY
        };
        let back = GeoParams {
            rotate_deg: -20.0,
            ..GeoParams::IDENTITY
        };
        let (t1, m1) = apply_geo(&t, &m, &fwd);
        let (t2, m2) = apply_geo(&t1, &m1, &back);
        let (mut agree, mut total) = (0, 0);
        let mut abs_err = 0.0f32;
        let plane = 128 * 128;
        for r in 32..96 {
            for c in 32..96 {
                total += 1;
                agree += usize::from(m2.get(r, c) == m.get(r, c));
                let i = r * 128 + c;
                abs_err += (0..3).map(|k| (t2.data[k * plane + i] - t.data[k * plane + i]).abs()).sum::<f32>() / 3.0;
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "mask {agree}/{total}");
        // Two bilinear passes blur thin streaks; the mean error stays small.
        let mae = abs_err / total as f32;
        assert!(mae < 0.02, "image mean abs error {mae}");
        assert!(m2.is_binary());
    }

    #[test]
    fn random_draws_stay_in_range_and_keep_masks_binary() {
        let (t, m) = random_patch(4, 32);
        let cfg = GeoAugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = GeoParams::draw(&cfg, &mut rng);
            assert!((-50.0..=50.0).contains(&p.translate.0) && (-20.0..=20.0).contains(&p.rotate_deg));
            assert!((0.9..=1.2).contains(&p.scale));
            let (_, m2) = apply_geo(&t, &m, &p);
            assert!(m2.is_binary());
        }
    }

    #[test]
    fn positive_pairs_respect_offset_and_band() {
        let s = section();
        let src = PatchSource::new(&s, s.bundle_mask().unwrap()).unwrap();
        let cfg = PairAugConfig::default().for_resolution(&s.resolution);
        let max_px = cfg.max_offset_px(&s.resolution);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (lo, hi) = src.wm_band;
        let mut accepted = 0;
        for i in 0..1000 {
            let origin = (40 + i % 20, 50 + i % 30);
            let p = positive_pair(&src, origin, 32, &cfg, &mut rng).unwrap();
            if p.fallback {
                assert_eq!(p.offset, (0, 0));
                continue;
            }
            accepted += 1;
            let d = ((p.offset.0.pow(2) + p.offset.1.pow(2)) as f64).sqrt();
            assert!(d <= max_px + 1e-9 && d * s.resolution.microns_per_pixel <= cfg.max_crop_offset_um + 1e-9);
            assert!((lo..=hi).contains(&p.view_b_mean));
            assert!((0.05..=0.3).contains(&p.blur_sigma));
        }
        assert!(accepted > 0);
    }

    #[test]
    fn impossible_band_falls_back() {
        let s = section();
        let src = PatchSource::new(&s, s.bundle_mask().unwrap()).unwrap();
        let cfg = PairAugConfig {
            wm_mean_band: Some((2.0, 3.0)),
            noise_std: 0.0,
            blur_sigma: (0.05, 0.05),
            ..PairAugConfig::default().for_resolution(&s.resolution)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = positive_pair(&src, (40, 40), 32, &cfg, &mut rng).unwrap();
        assert!(p.fallback);
        assert_eq!(p.offset, (0, 0));
        // A 0.05 px blur changes values only marginally.
        let diff = p.view_a.data.iter().zip(&p.view_b.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn sub_pixel_offset_bound_is_rejected() {
        let cfg = PairAugConfig::default();
        assert!(cfg.validate(&Resolution::new(40.0, 400.0).unwrap()).is_err());
        assert!(cfg.validate(&Resolution::default()).is_ok());
    }

    #[test]
    fn sampler_class_balance() {
        let s = section();
        let src = vec![PatchSource::new(&s, s.bundle_mask().unwrap()).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = patch_sampler(&src, 32, 10_000, 0.5, &mut rng).unwrap();
        let fiber = batch.iter().filter(|p| p.fiber).count() as f64 / 1e4;
        assert!((fiber - 0.5).abs() < 0.02, "{fiber}");
        for p in batch.iter().take(500) {
            let frac = p.mask.count() as f64 / (32.0 * 32.0);
            assert_eq!(p.fiber, frac >= FIBER_PATCH_FRACTION);
        }
        let bg = patch_sampler(&src, 32, 200, 0.0, &mut rng).unwrap();
        assert!(bg.iter().all(|p| !p.fiber));
    }

    #[test]
    fn sampler_errors_without_fiber_pixels() {
        let s = section();
        let (h, w) = s.dims();
        let src = vec![PatchSource::new(&s, Mask::filled(h, w, 0)).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(patch_sampler(&src, 32, 4, 0.5, &mut rng).is_err());
        assert!(patch_sampler(&src, 32, 4, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn patch_inside_bundle_is_fiber() {
        let s = section();
        let (h, w) = s.dims();
        let src = PatchSource::new(&s, Mask::filled(h, w, 1)).unwrap();
        assert!(src.is_fiber(10, 10, 16));
    }
}
