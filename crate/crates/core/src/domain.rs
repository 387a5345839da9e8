//! Shared domain types: physical resolution, rasters, sections, regions.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Native in-plane resolution of the digitized sections (μm/px).
pub const NATIVE_MICRONS_PER_PIXEL: f64 = 0.4;
/// In-plane downsampling applied before training and testing.
pub const WORKING_DOWNSAMPLE: f64 = 4.0;
/// Distance between consecutive kept sections (every 8th 50 μm section).
pub const SECTION_GAP_UM: f64 = 400.0;

/// Physical pixel size and section spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub microns_per_pixel: f64,
    pub section_gap_um: f64,
}

impl Default for Resolution {
    /// 1.6 μm/px: the native 0.4 μm/px downsampled by 4.
    fn default() -> Self {
        Resolution {
            microns_per_pixel: NATIVE_MICRONS_PER_PIXEL * WORKING_DOWNSAMPLE,
            section_gap_um: SECTION_GAP_UM,
        }
    }
}

impl Resolution {
    pub fn new(microns_per_pixel: f64, section_gap_um: f64) -> Result<Self> {
        let res = Resolution {
            microns_per_pixel,
            section_gap_um,
        };
        res.validate()?;
        Ok(res)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.microns_per_pixel > 0.0 && self.microns_per_pixel.is_finite()) {
            return Err(Error::Invalid(format!(
                "microns_per_pixel must be positive, got {}",
                self.microns_per_pixel
            )));
        }
        if !(self.section_gap_um > 0.0 && self.section_gap_um.is_finite()) {
            return Err(Error::Invalid(format!(
                "section_gap_um must be positive, got {}",
                self.section_gap_um
            )));
        }
        Ok(())
    }

    /// Area of one pixel in mm².
    pub fn pixel_area_mm2(&self) -> f64 {
        self.microns_per_pixel * self.microns_per_pixel * 1e-6
    }

    /// Converts a physical length to (fractional) pixels.
    pub fn um_to_px(&self, um: f64) -> f64 {
        um / self.microns_per_pixel
    }

    pub fn mm_to_px(&self, mm: f64) -> f64 {
        self.um_to_px(mm * 1000.0)
    }

    /// The same spacing after an in-plane downsample by `factor`.
    pub fn downsampled(&self, factor: f64) -> Resolution {
        Resolution {
            microns_per_pixel: self.microns_per_pixel * factor,
            section_gap_um: self.section_gap_um,
        }
    }
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Binary raster with values {0, 1}.
pub type Mask = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Raster {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} values for {height}x{width}", height * width),
                data.len(),
            ));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the window `[row, row+h) x [col, col+w)`; out-of-range pixels take `fill`.
    pub fn crop(&self, row: isize, col: isize, h: usize, w: usize, fill: T) -> Raster<T> {
        Raster::from_fn(h, w, |r, c| {
            let rr = row + r as isize;
            let cc = col + c as isize;
            if rr < 0 || cc < 0 || rr >= self.height as isize || cc >= self.width as isize {
                fill
            } else {
                self.get(rr as usize, cc as usize)
            }
        })
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Pixelwise `value >= threshold`.
    pub fn threshold(values: &Raster<f32>, threshold: f32) -> Mask {
        values.map(|v| u8::from(v >= threshold))
    }

    /// Square-structuring-element dilation by `radius` pixels (Chebyshev).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = self.dims();
        // Separable max filter: rows then columns.
        let mut tmp = Mask::filled(h, w, 0);
        for r in 0..h {
            for c in 0..w {
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(w - 1);
                if (lo..=hi).any(|cc| self.get(r, cc) != 0) {
                    tmp.set(r, c, 1);
                }
            }
        }
        let mut out = Mask::filled(h, w, 0);
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius).min(h - 1);
            for c in 0..w {
                if (lo..=hi).any(|rr| tmp.get(rr, c) != 0) {
                    out.set(r, c, 1);
                }
            }
        }
        out
    }
}

/// Label values of a charting raster.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_MODERATE: u8 = 1;
pub const LABEL_DENSE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Dense,
    Moderate,
    Predicted,
}

impl Severity {
    pub fn label(self) -> Option<u8> {
        match self {
            Severity::Dense => Some(LABEL_DENSE),
            Severity::Moderate => Some(LABEL_MODERATE),
            Severity::Predicted => None,
        }
    }
}

/// One coronal section with optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionRecord {
    pub id: String,
    pub macaque_id: String,
    pub rostrocaudal_index: i64,
    pub image: RgbImage,
    pub resolution: Resolution,
    /// 0 = background, 1 = moderate, 2 = dense.
    pub charting: Option<Raster<u8>>,
    pub tissue_mask: Option<Mask>,
    pub wm_mask: Option<Mask>,
    pub ventricle_mask: Option<Mask>,
    pub charted: bool,
}

impl SectionRecord {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        let dims = self.dims();
        if self.charted != self.charting.is_some() {
            return Err(Error::Invalid(format!(
                "section {}: charted={} but charting {}",
                self.id,
                self.charted,
                if self.charting.is_some() { "present" } else { "absent" }
            )));
        }
        if let Some(ch) = &self.charting {
            if ch.dims() != dims {
                return Err(Error::shape(format!("{dims:?}"), format!("charting {:?}", ch.dims())));
            }
            if ch.as_slice().iter().any(|&v| v > LABEL_DENSE) {
                return Err(Error::Invalid(format!(
                    "section {}: charting labels must be in {{0,1,2}}",
                    self.id
                )));
            }
        }
        for (name, m) in [
            ("tissue_mask", &self.tissue_mask),
            ("wm_mask", &self.wm_mask),
            ("ventricle_mask", &self.ventricle_mask),
        ] {
            if let Some(m) = m {
                if m.dims() != dims {
                    return Err(Error::shape(format!("{dims:?}"), format!("{name} {:?}", m.dims())));
                }
                if !m.is_binary() {
                    return Err(Error::Invalid(format!("section {}: {name} is not binary", self.id)));
                }
            }
        }
        Ok(())
    }

    /// Luma in [0, 255] (Rec. 601 weights).
    pub fn grayscale(&self) -> Raster<f32> {
        let (h, w) = self.dims();
        Raster::from_fn(h, w, |r, c| {
            let p = self.image.get_pixel(c as u32, r as u32).0;
            0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
        })
    }

    /// Binary mask of charting pixels with the given label.
    pub fn label_mask(&self, label: u8) -> Option<Mask> {
        self.charting.as_ref().map(|ch| ch.map(|v| u8::from(v == label)))
    }

    /// Binary mask of all charted bundle pixels.
    pub fn bundle_mask(&self) -> Option<Mask> {
        self.charting.as_ref().map(|ch| ch.map(|v| u8::from(v != 0)))
    }

    /// Tissue mask from the record or, when absent, from intensity:
    /// pixels darker than the slide background.
    pub fn tissue_or_estimate(&self) -> Mask {
        if let Some(t) = &self.tissue_mask {
            return t.clone();
        }
        let gray = self.grayscale();
        let mut vals: Vec<f32> = gray.as_slice().to_vec();
        vals.sort_by(|a, b| a.total_cmp(b));
        // Slide glass is the brightest mode; anything clearly darker is tissue.
        let bright = vals[(vals.len() as f64 * 0.98) as usize % vals.len()];
        gray.map(|v| u8::from(v < bright - 12.0))
    }
}

/// A connected set of pixels, detected or charted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRegion {
    /// (row, col), sorted row-major.
    pub pixels: Vec<(u32, u32)>,
    pub centroid: (f64, f64),
    pub severity: Severity,
    pub mean_probability: f64,
}

impl BundleRegion {
    /// Builds a region from its pixels. Returns `None` for an empty set.
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>, severity: Severity) -> Option<Self> {
        if pixels.is_empty() {
            return None;
        }
        pixels.sort_unstable();
        pixels.dedup();
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        Some(BundleRegion {
            pixels,
            centroid: (sr / n, sc / n),
            severity,
            mean_probability: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn area_mm2(&self, res: &Resolution) -> f64 {
        crate::raster::area_mm2(self, res)
    }

    /// Inclusive bounding box `(row_min, col_min, row_max, col_max)`.
    pub fn bbox(&self) -> (u32, u32, u32, u32) {
        let mut b = (u32::MAX, u32::MAX, 0, 0);
        for &(r, c) in &self.pixels {
            b.0 = b.0.min(r);
            b.1 = b.1.min(c);
            b.2 = b.2.max(r);
            b.3 = b.3.max(c);
        }
        b
    }

    pub fn to_mask(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::filled(height, width, 0);
        for &(r, c) in &self.pixels {
            m.set(r as usize, c as usize, 1);
        }
        m
    }

    /// Sets `mean_probability` from a probability raster.
    pub fn with_mean_probability(mut self, prob: &Raster<f32>) -> Self {
        let s: f64 = self
            .pixels
            .iter()
            .map(|&(r, c)| prob.get(r as usize, c as usize) as f64)
            .sum();
        self.mean_probability = s / self.pixels.len() as f64;
        self
    }

    pub fn overlap(&self, other: &BundleRegion) -> usize {
        // Both pixel lists are sorted; merge-count.
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn iou(&self, other: &BundleRegion) -> f64 {
        let inter = self.overlap(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per-pixel fiber probability aligned to a section.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub section_id: String,
    pub values: Raster<f32>,
}

impl ProbabilityMap {
    pub fn new(section_id: impl Into<String>, values: Raster<f32>) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("probability {v} outside [0,1]")));
        }
        Ok(ProbabilityMap {
            section_id: section_id.into(),
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }
}
