//! Procedural tracer sections: textured white/gray matter, a ventricle,
//! dark fiber streaks grouped into charted bundles, and uncharted
//! confounders (terminal fields, speckle, glare).
//!
//! Bundles belong to the stack rather than a single section. Each bundle
//! follows a bounded sinusoidal drift along the rostrocaudal axis so that
//! adjacent sections see it at nearly the same place.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{Mask, Raster, Resolution, SectionRecord, LABEL_DENSE, LABEL_MODERATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sections: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    #[serde(default = "default_mpp")]
    pub microns_per_pixel: f64,
    #[serde(default = "default_gap")]
    pub section_gap_um: f64,
    pub n_dense_bundles: (usize, usize),
    pub n_moderate_bundles: (usize, usize),
    /// Fraction of bundle pixels covered by fiber streaks.
    pub fiber_density_dense: (f64, f64),
    pub fiber_density_moderate: (f64, f64),
    pub artifact_rate: f64,
    pub terminal_field_rate: f64,
    pub drift_px_per_section: f64,
    /// Bundle extents in μm: (min, max) of length and width.
    #[serde(default = "default_dense_length")]
    pub dense_length_um: (f64, f64),
    #[serde(default = "default_dense_width")]
    pub dense_width_um: (f64, f64),
    #[serde(default = "default_moderate_length")]
    pub moderate_length_um: (f64, f64),
    #[serde(default = "default_moderate_width")]
    pub moderate_width_um: (f64, f64),
    /// Every `charted_stride`-th section (starting at `charted_offset`)
    /// keeps its charting; the others are unlabeled.
    #[serde(default = "one")]
    pub charted_stride: usize,
    #[serde(default)]
    pub charted_offset: usize,
    #[serde(default = "default_macaque")]
    pub macaque_id: String,
}

fn default_mpp() -> f64 {
    40.0
}
fn default_gap() -> f64 {
    crate::domain::SECTION_GAP_UM
}
fn default_dense_length() -> (f64, f64) {
    (3600.0, 4600.0)
}
fn default_dense_width() -> (f64, f64) {
    (1000.0, 1300.0)
}
fn default_moderate_length() -> (f64, f64) {
    (2600.0, 3400.0)
}
fn default_moderate_width() -> (f64, f64) {
    (700.0, 900.0)
}
fn one() -> usize {
    1
}
fn default_macaque() -> String {
    "synth".to_string()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_sections: 12,
            image_size: (512, 640),
            microns_per_pixel: default_mpp(),
            section_gap_um: default_gap(),
            n_dense_bundles: (2, 3),
            n_moderate_bundles: (1, 2),
            fiber_density_dense: (0.10, 0.14),
            fiber_density_moderate: (0.04, 0.07),
            artifact_rate: 0.5,
            terminal_field_rate: 0.5,
            drift_px_per_section: 1.5,
            dense_length_um: default_dense_length(),
            dense_width_um: default_dense_width(),
            moderate_length_um: default_moderate_length(),
            moderate_width_um: default_moderate_width(),
            charted_stride: 1,
            charted_offset: 0,
            macaque_id: default_macaque(),
        }
    }
}

impl SynthConfig {
    /// A small configuration for fast tests: 128×160 sections.
    pub fn tiny(seed: u64, n_sections: usize) -> Self {
        SynthConfig {
            seed,
            n_sections,
            image_size: (128, 160),
            n_dense_bundles: (1, 1),
            n_moderate_bundles: (0, 1),
            dense_length_um: (1400.0, 1800.0),
            dense_width_um: (500.0, 600.0),
            moderate_length_um: (1000.0, 1200.0),
            moderate_width_um: (350.0, 450.0),
            ..Default::default()
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            microns_per_pixel: self.microns_per_pixel,
            section_gap_um: self.section_gap_um,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution().validate()?;
        let range01 = |name: &str, (lo, hi): (f64, f64)| {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                Err(Error::Invalid(format!("{name} must be an ordered range within [0,1], got ({lo}, {hi})")))
            } else {
                Ok(())
            }
        };
        range01("fiber_density_dense", self.fiber_density_dense)?;
        range01("fiber_density_moderate", self.fiber_density_moderate)?;
        if self.fiber_density_dense.1 <= self.fiber_density_moderate.1 {
            return Err(Error::Invalid(
                "dense fiber density range must extend above the moderate range".into(),
            ));
        }
        for (name, v) in [("artifact_rate", self.artifact_rate), ("terminal_field_rate", self.terminal_field_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} must be in [0,1], got {v}")));
            }
        }
        for (name, (lo, hi)) in [("n_dense_bundles", self.n_dense_bundles), ("n_moderate_bundles", self.n_moderate_bundles)] {
            if lo > hi {
                return Err(Error::Invalid(format!("{name} range is reversed: ({lo}, {hi})")));
            }
        }
        for (name, (lo, hi)) in [
            ("dense_length_um", self.dense_length_um),
            ("dense_width_um", self.dense_width_um),
            ("moderate_length_um", self.moderate_length_um),
            ("moderate_width_um", self.moderate_width_um),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Invalid(format!("{name} must be a positive ordered range, got ({lo}, {hi})")));
            }
        }
        if !(self.drift_px_per_section >= 0.0 && self.drift_px_per_section.is_finite()) {
            return Err(Error::Invalid("drift_px_per_section must be finite and >= 0".into()));
        }
        if self.n_sections == 0 {
            return Err(Error::Invalid("n_sections must be >= 1".into()));
        }
        if self.charted_stride == 0 {
            return Err(Error::Invalid("charted_stride must be >= 1".into()));
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::Generation(format!("image {h}x{w} is too small (minimum 32x32)")));
        }
        Ok(())
    }

    pub fn section_id(&self, index: usize) -> String {
        format!("{}_s{index:03}", self.macaque_id)
    }
}

/// Tissue layout shared by every section of a stack.
#[derive(Debug, Clone)]
struct Anatomy {
    center: (f64, f64),
    tissue_r: (f64, f64),
    wm_r: (f64, f64),
    vent_r: (f64, f64),
    /// Boundary wobble: (amplitude, frequency, phase) of angular harmonics.
    wobble: [(f64, f64, f64); 2],
}

impl Anatomy {
    fn new(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (h as f64, w as f64);
        Anatomy {
            center: (h / 2.0, w / 2.0),
            tissue_r: (0.45 * h, 0.45 * w),
            wm_r: (0.33 * h, 0.36 * w),
            vent_r: (0.04 * h, 0.05 * w),
            wobble: [
                (0.025, 3.0, rng.random_range(0.0..2.0 * PI)),
                (0.015, 5.0, rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    /// Normalized elliptical radius with boundary wobble; < 1 means inside.
    fn rho(&self, r: f64, c: f64, radii: (f64, f64)) -> f64 {
        let dy = (r - self.center.0) / radii.0;
        let dx = (c - self.center.1) / radii.1;
        let theta = dy.atan2(dx);
        let scale = 1.0 + self.wobble.iter().map(|(a, f, p)| a * (f * theta + p).sin()).sum::<f64>();
        (dy * dy + dx * dx).sqrt() / scale
    }

    fn in_tissue(&self, r: f64, c: f64) -> bool {
        self.rho(r, c, self.tissue_r) < 1.0
    }

    fn in_ventricle(&self, r: f64, c: f64) -> bool {
        let dy = (r - self.center.0) / self.vent_r.0;
        let dx = (c - self.center.1) / self.vent_r.1;
        dy * dy + dx * dx < 1.0
    }

    fn in_wm(&self, r: f64, c: f64) -> bool {
        self.rho(r, c, self.wm_r) < 1.0 && !self.in_ventricle(r, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Dense,
    Moderate,
}

/// A curved band with a tapered width. Coordinates are (row, col).
#[derive(Debug, Clone)]
struct Band {
    kind: Kind,
    center: (f64, f64),
    theta: f64,
    length: f64,
    width: f64,
    curvature: f64,
    /// Drift direction, amplitude (px), angular rate and phase.
    drift_dir: (f64, f64),
    drift_amp: f64,
    drift_rate: f64,
    drift_phase: f64,
}

impl Band {
    fn displacement(&self, index: usize) -> (f64, f64) {
        let s = self.drift_amp * (self.drift_rate * index as f64 + self.drift_phase).sin();
        (self.drift_dir.0 * s, self.drift_dir.1 * s)
    }

    fn half_width(&self, t: f64) -> f64 {
        0.5 * self.width * (1.0 - 0.35 * (2.0 * t).powi(4))
    }

    /// Centerline point and unit normal at `t ∈ [-0.5, 0.5]`.
    fn frame(&self, t: f64, offset: (f64, f64)) -> ((f64, f64), (f64, f64)) {
        let e = (self.theta.sin(), self.theta.cos());
        let n = (e.1, -e.0);
        let s = t * self.length;
        let bend = 0.5 * self.curvature * s * s;
        let p = (
            self.center.0 + offset.0 + s * e.0 + bend * n.0,
            self.center.1 + offset.1 + s * e.1 + bend * n.1,
        );
        let d = (e.0 + self.curvature * s * n.0, e.1 + self.curvature * s * n.1);
        let norm = (d.0 * d.0 + d.1 * d.1).sqrt();
        let tangent = (d.0 / norm, d.1 / norm);
        (p, (tangent.1, -tangent.0))
    }

    fn samples(&self) -> usize {
        (self.length * 2.0).ceil() as usize + 1
    }

    /// Pixels of the band at a given drift offset (may lie outside the image).
    fn pixels(&self, offset: (f64, f64)) -> Vec<(i64, i64)> {
        let n = self.samples();
        let mut out = Vec::new();
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64 - 0.5;
            let (p, _) = self.frame(t, offset);
            let hw = self.half_width(t);
            let rad = hw.ceil() as i64;
            let (pr, pc) = (p.0.round() as i64, p.1.round() as i64);
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let (r, c) = (pr + dr, pc + dc);
                    let (fy, fx) = (r as f64 - p.0, c as f64 - p.1);
                    if fy * fy + fx * fx <= hw * hw {
                        out.push((r, c));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Band orientation kept at least 15° off the image axes.
fn oblique_angle(rng: &mut ChaCha8Rng) -> f64 {
    let quadrant = if rng.random_bool(0.5) { 0.0 } else { 0.5 * PI };
    quadrant + rng.random_range(15f64.to_radians()..75f64.to_radians())
}

fn count_in(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

const MAX_PLACEMENT_ATTEMPTS: usize = 400;

/// Draws the stack-level bundle layout.
fn place_bundles(cfg: &SynthConfig, anat: &Anatomy, rng: &mut ChaCha8Rng) -> Result<Vec<Band>> {
    let res = cfg.resolution();
    let (h, w) = cfg.image_size;
    let n_dense = count_in(rng, cfg.n_dense_bundles);
    let n_mod = count_in(rng, cfg.n_moderate_bundles);
    let drift = cfg.drift_px_per_section;
    let amp = if drift > 0.0 {
        (0.04 * h.min(w) as f64).min(8.0).max(drift)
    } else {
        0.0
    };
    let mut bands: Vec<Band> = Vec::new();
    let mut occupied = vec![false; h * w];
    let spacing = res.um_to_px(500.0).ceil() as i64;

    let fits = |band: &Band, occupied: &[bool], parent_gap: bool| -> bool {
        let margin = amp + 2.0;
        let px = band.pixels((0.0, 0.0));
        for &(r, c) in &px {
            let (rf, cf) = (r as f64, c as f64);
            // Every drift position must stay inside white matter.
            for (dy, dx) in [(0.0, 0.0), (margin, 0.0), (-margin, 0.0), (0.0, margin), (0.0, -margin)] {
                if !anat.in_wm(rf + dy, cf + dx) {
                    return false;
                }
            }
        }
        let sep = if parent_gap { 1 } else { spacing };
        for &(r, c) in &px {
            for dr in [-sep, 0, sep] {
                for dc in [-sep, 0, sep] {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && occupied[rr as usize * w + cc as usize] {
                        return false;
                    }
                }
            }
        }
        true
    };
    let mark = |band: &Band, occupied: &mut [bool]| {
        for (r, c) in band.pixels((0.0, 0.0)) {
            occupied[r as usize * w + c as usize] = true;
        }
    };
    let drift_params = |rng: &mut ChaCha8Rng| {
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        ((a.sin(), a.cos()), rng.random_range(0.0..2.0 * PI))
    };

    for k in 0..n_dense {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let length = res.um_to_px(uniform(rng, cfg.dense_length_um));
            let width = res.um_to_px(uniform(rng, cfg.dense_width_um));
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            let rad = rng.random_range(0.0f64..1.0).sqrt() * 0.75;
            let center = (
                anat.center.0 + rad * anat.wm_r.0 * a.sin(),
                anat.center.1 + rad * anat.wm_r.1 * a.cos(),
            );
            let (dir, phase) = drift_params(rng);
            let band = Band {
                kind: Kind::Dense,
                center,
                theta: oblique_angle(rng),
                length,
                width,
                curvature: rng.random_range(-1.2..1.2) / length,
                drift_dir: dir,
                drift_amp: amp,
                drift_rate: if amp > 0.0 { drift / amp } else { 0.0 },
                drift_phase: phase,
            };
            if fits(&band, &occupied, false) {
                mark(&band, &mut occupied);
                bands.push(band);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place dense bundle {} of {n_dense} inside a {h}x{w} image",
                k + 1
            )));
        }
    }

    let n_parents = bands.len();
    for k in 0..n_mod {
        let mut placed = false;
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let length = res.um_to_px(uniform(rng, cfg.moderate_length_um));
            let width = res.um_to_px(uniform(rng, cfg.moderate_width_um));
            let flank = n_parents > 0 && attempt < MAX_PLACEMENT_ATTEMPTS / 2;
            let band = if flank {
                // Moderate bundles flank a dense one, sharing its drift.
                let parent = bands[rng.random_range(0..n_parents)].clone();
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let along = rng.random_range(-0.25..0.25);
                let (p, nrm) = parent.frame(along, (0.0, 0.0));
                let dist = parent.half_width(along) + 0.5 * width + rng.random_range(1.0..3.0);
                Band {
                    kind: Kind::Moderate,
                    center: (p.0 + side * dist * nrm.0, p.1 + side * dist * nrm.1),
                    length,
                    width,
                    ..parent
                }
            } else {
                let a: f64 = rng.random_range(0.0..2.0 * PI);
                let rad = rng.random_range(0.0f64..1.0).sqrt() * 0.75;
                let (dir, phase) = drift_params(rng);
                Band {
                    kind: Kind::Moderate,
                    center: (
                        anat.center.0 + rad * anat.wm_r.0 * a.sin(),
                        anat.center.1 + rad * anat.wm_r.1 * a.cos(),
                    ),
                    theta: oblique_angle(rng),
                    length,
                    width,
                    curvature: rng.random_range(-1.2..1.2) / length,
                    drift_dir: dir,
                    drift_amp: amp,
                    drift_rate: if amp > 0.0 { drift / amp } else { 0.0 },
                    drift_phase: phase,
                }
            };
            if fits(&band, &occupied, flank) {
                mark(&band, &mut occupied);
                bands.push(band);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place moderate bundle {} of {n_mod} inside a {h}x{w} image",
                k + 1
            )));
        }
    }
    Ok(bands)
}

/// Smooth noise in roughly [-1, 1]: random lattice values, bilinear interpolation.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let fy = r as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for c in 0..w {
            let fx = c as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = (top * (1.0 - ty) + bot * ty) as f32;
        }
    }
    out
}

/// Max-composites a Gaussian dot of peak `strength` into `buf`.
fn splat(buf: &mut [f32], h: usize, w: usize, p: (f64, f64), sigma: f64, strength: f32) {
    let rad = (2.5 * sigma).ceil() as i64;
    let (pr, pc) = (p.0.round() as i64, p.1.round() as i64);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in (pr - rad).max(0)..=(pr + rad).min(h as i64 - 1) {
        for c in (pc - rad).max(0)..=(pc + rad).min(w as i64 - 1) {
            let (dy, dx) = (r as f64 - p.0, c as f64 - p.1);
            let v = strength * (-(dy * dy + dx * dx) * inv).exp() as f32;
            let slot = &mut buf[r as usize * w + c as usize];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

const FIBER_SIGMA: f64 = 0.6;

/// Draws streaks inside the band until the target fraction of its pixels are
/// covered (darkness > 0.5). Darkness outside the band is discarded.
fn render_fibers(
    band: &Band,
    offset: (f64, f64),
    inside: &[(usize, usize)],
    target: f64,
    dark: &mut [f32],
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) {
    if inside.is_empty() || target <= 0.0 {
        return;
    }
    let mut local = vec![0.0f32; h * w];
    let goal = (target * inside.len() as f64).round() as usize;
    let mut iterations = 0;
    loop {
        let covered = inside.iter().filter(|&&(r, c)| local[r * w + c] > 0.5).count();
        if covered >= goal || iterations >= 4000 {
            break;
        }
        iterations += 1;
        let v0 = rng.random_range(-0.95..0.95);
        let span = rng.random_range(0.3..0.9);
        let t0 = rng.random_range(-0.5..0.5 - span);
        let freq = rng.random_range(1.0..4.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let wob = rng.random_range(0.05..0.25);
        let strength = rng.random_range(0.75..1.0);
        let steps = (span * band.length * 2.5).ceil() as usize + 1;
        for i in 0..steps {
            let t = t0 + span * i as f64 / (steps - 1) as f64;
            let (p, n) = band.frame(t, offset);
            let v = (v0 + wob * (2.0 * PI * freq * t + phase).sin()).clamp(-1.0, 1.0) * band.half_width(t);
            splat(&mut local, h, w, (p.0 + v * n.0, p.1 + v * n.1), FIBER_SIGMA, strength);
        }
    }
    for &(r, c) in inside {
        let i = r * w + c;
        dark[i] = dark[i].max(local[i]);
    }
}

fn stack_rng(cfg: &SynthConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    rng
}

fn section_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates section `index` of the stack described by `cfg`.
pub fn generate_section(cfg: &SynthConfig, index: usize) -> Result<SectionRecord> {
    cfg.validate()?;
    if index >= cfg.n_sections {
        return Err(Error::Invalid(format!("section index {index} >= n_sections {}", cfg.n_sections)));
    }
    let mut srng = stack_rng(cfg);
    let (h, w) = cfg.image_size;
    let anat = Anatomy::new(h, w, &mut srng);
    let bands = place_bundles(cfg, &anat, &mut srng)?;
    let res = cfg.resolution();
    let mut rng = section_rng(cfg, index);

    let mut tissue = Mask::filled(h, w, 0);
    let mut wm = Mask::filled(h, w, 0);
    let mut vent = Mask::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            let (rf, cf) = (r as f64, c as f64);
            if anat.in_tissue(rf, cf) {
                tissue.set(r, c, 1);
                if anat.in_ventricle(rf, cf) {
                    vent.set(r, c, 1);
                } else if anat.in_wm(rf, cf) {
                    wm.set(r, c, 1);
                }
            }
        }
    }

    // Base grayscale with compartment means and texture.
    let coarse = value_noise(h, w, 24.0, &mut rng);
    let fine = value_noise(h, w, 5.0, &mut rng);
    let pixel_noise = Normal::new(0.0f32, 3.0).expect("valid std");
    let mut gray = vec![0.0f32; h * w];
    for i in 0..h * w {
        let (r, c) = (i / w, i % w);
        let base = if tissue.get(r, c) == 0 || vent.get(r, c) == 1 {
            236.0 + 1.5 * fine[i]
        } else if wm.get(r, c) == 1 {
            200.0 + 8.0 * coarse[i] + 5.0 * fine[i]
        } else {
            160.0 + 10.0 * coarse[i] + 4.0 * fine[i]
        };
        gray[i] = base + pixel_noise.sample(&mut rng);
    }

    // Glare: soft bright patches.
    let n_glare = (cfg.artifact_rate * 2.0).round() as usize;
    for _ in 0..n_glare {
        let (cr, cc) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let rad = rng.random_range(0.03..0.06) * h as f64;
        let amp = rng.random_range(15.0..30.0);
        for r in 0..h {
            for c in 0..w {
                let d2 = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (rad * rad);
                if d2 < 9.0 && tissue.get(r, c) == 1 {
                    gray[r * w + c] += (amp * (-0.5 * d2).exp()) as f32;
                }
            }
        }
    }

    let mut charting = Raster::filled(h, w, 0u8);
    let mut fiber_dark = vec![0.0f32; h * w];
    let mut haze = vec![0.0f32; h * w];
    let in_image = |(r, c): (i64, i64)| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
    for band in &bands {
        let off = band.displacement(index);
        let inside: Vec<(usize, usize)> = band
            .pixels(off)
            .into_iter()
            .filter(|&p| in_image(p))
            .map(|(r, c)| (r as usize, c as usize))
            .collect();
        let (label, density, tint) = match band.kind {
            Kind::Dense => (LABEL_DENSE, uniform(&mut rng, cfg.fiber_density_dense), 14.0),
            Kind::Moderate => (LABEL_MODERATE, uniform(&mut rng, cfg.fiber_density_moderate), 7.0),
        };
        for &(r, c) in &inside {
            if charting.get(r, c) < label {
                charting.set(r, c, label);
            }
            haze[r * w + c] = haze[r * w + c].max(tint);
        }
        render_fibers(band, off, &inside, density, &mut fiber_dark, h, w, &mut rng);
    }
    // Bundle haze softens toward the edges.
    let haze = box_blur(&haze, h, w, 2);

    // Terminal fields: stippled blobs away from bundles.
    let keep_out = charting.map(|v| u8::from(v != 0)).dilate(res.um_to_px(600.0).ceil() as usize);
    let mut stipple = vec![0.0f32; h * w];
    for _ in 0..3 {
        if !rng.random_bool(cfg.terminal_field_rate) {
            continue;
        }
        let sigma = res.um_to_px(uniform(&mut rng, (400.0, 560.0)));
        let mut center = None;
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            let rho = rng.random_range(0.85..1.15);
            let p = (
                anat.center.0 + rho * anat.wm_r.0 * a.sin(),
                anat.center.1 + rho * anat.wm_r.1 * a.cos(),
            );
            let (pr, pc) = (p.0.round() as i64, p.1.round() as i64);
            if in_image((pr, pc))
                && tissue.get(pr as usize, pc as usize) == 1
                && keep_out.get(pr as usize, pc as usize) == 0
                && pr.min(h as i64 - pr).min(pc).min(w as i64 - pc) as f64 > 2.0 * sigma
            {
                center = Some(p);
                break;
            }
        }
        let Some(p) = center else { continue };
        let coverage = uniform(&mut rng, (0.06, 0.12));
        let n_dots = (coverage * PI * 4.0 * sigma * sigma / 2.0).round() as usize;
        let spread = Normal::new(0.0, sigma).expect("valid sigma");
        for _ in 0..n_dots {
            let q = (p.0 + spread.sample(&mut rng), p.1 + spread.sample(&mut rng));
            let (qr, qc) = (q.0.round() as i64, q.1.round() as i64);
            if in_image((qr, qc)) && keep_out.get(qr as usize, qc as usize) == 0 {
                splat(&mut stipple, h, w, q, 0.7, rng.random_range(0.7..1.0));
            }
        }
    }

    // Speckle: tiny dark clusters anywhere in tissue.
    let n_speckle = (cfg.artifact_rate * 8.0).round() as usize;
    for _ in 0..n_speckle {
        let p = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (pr, pc) = (p.0 as usize, p.1 as usize);
        if tissue.get(pr, pc) == 0 || charting.get(pr, pc) != 0 {
            continue;
        }
        for _ in 0..rng.random_range(5..15) {
            let q = (p.0 + rng.random_range(-3.0..3.0), p.1 + rng.random_range(-3.0..3.0));
            splat(&mut stipple, h, w, q, 0.6, rng.random_range(0.6..0.9));
        }
    }

    let fiber_rgb = [62.0f32, 44.0, 30.0];
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h * w {
        let (r, c) = (i / w, i % w);
        let g = gray[i] - haze[i];
        let mut rgb = if tissue.get(r, c) == 1 && vent.get(r, c) == 0 {
            [g + 6.0, g, g - 12.0]
        } else {
            [g, g, g - 2.0]
        };
        let a = 0.9 * fiber_dark[i].max(stipple[i]).min(1.0);
        for (v, f) in rgb.iter_mut().zip(fiber_rgb) {
            *v = *v * (1.0 - a) + f * a;
        }
        img.put_pixel(c as u32, r as u32, Rgb(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8)));
    }

    let charted = index % cfg.charted_stride == cfg.charted_offset % cfg.charted_stride;
    let record = SectionRecord {
        id: cfg.section_id(index),
        macaque_id: cfg.macaque_id.clone(),
        rostrocaudal_index: index as i64,
        image: img,
        resolution: res,
        charting: charted.then_some(charting),
        tissue_mask: Some(tissue),
        wm_mask: Some(wm),
        ventricle_mask: Some(vent),
        charted,
    };
    record.validate()?;
    Ok(record)
}

fn box_blur(src: &[f32], h: usize, w: usize, rad: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (lo, hi) = (c.saturating_sub(rad), (c + rad).min(w - 1));
            tmp[r * w + c] = src[r * w + lo..=r * w + hi].iter().sum::<f32>() / (2 * rad + 1) as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let (lo, hi) = (r.saturating_sub(rad), (r + rad).min(h - 1));
        for c in 0..w {
            out[r * w + c] = (lo..=hi).map(|rr| tmp[rr * w + c]).sum::<f32>() / (2 * rad + 1) as f32;
        }
    }
    out
}

/// Generates every section of the stack, in rostrocaudal order.
pub fn generate_stack(cfg: &SynthConfig) -> Result<Vec<SectionRecord>> {
    (0..cfg.n_sections).map(|i| generate_section(cfg, i)).collect()
}

/// Full-label copy of a section: the charting every section would have if
/// all were charted. Used to build held-out references.
pub fn ground_truth(cfg: &SynthConfig, index: usize) -> Result<Raster<u8>> {
    let full = SynthConfig {
        charted_stride: 1,
        charted_offset: 0,
        ..cfg.clone()
    };
    Ok(generate_section(&full, index)?.charting.expect("all sections charted"))
}

/// Writes sections as PNGs plus `manifest.json`; returns the manifest path.
pub fn write_dataset(sections: &[SectionRecord], dir: &Path) -> Result<PathBuf> {
    crate::io::write_dataset(sections, dir)
}
