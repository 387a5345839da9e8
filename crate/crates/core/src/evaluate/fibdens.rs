use serde::{Deserialize, Serialize};

use crate::domain::{BundleRegion, Raster, SectionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// Tile grid as (rows, cols).
    pub tiles: (usize, usize),
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            tiles: (8, 8),
            clip_limit: 2.0,
        }
    }
}

/// Reflect-101 index into `0..n` for any integer.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn tile_lut(hist: &mut [u32; 256], area: usize, clip_limit: f64) -> [u8; 256] {
    if clip_limit > 0.0 {
        let clip = ((clip_limit * area as f64 / 256.0) as u32).max(1);
        let mut excess = 0u32;
        for h in hist.iter_mut() {
            if *h > clip {
                excess += *h - clip;
                *h = clip;
            }
        }
        let batch = excess / 256;
        let mut residual = excess % 256;
        for h in hist.iter_mut() {
            *h += batch;
        }
        if residual > 0 {
            let step = (256 / residual as usize).max(1);
            let mut i = 0;
            while i < 256 && residual > 0 {
                hist[i] += 1;
                residual -= 1;
                i += step;
            }
        }
    }
    let scale = 255.0 / area as f64;
    let mut lut = [0u8; 256];
    let mut acc = 0u32;
    for (v, h) in hist.iter().enumerate() {
        acc += h;
        lut[v] = (acc as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Contrast-limited adaptive histogram equalization with bilinear
/// interpolation between per-tile mappings.
pub fn clahe(img: &Raster<u8>, p: &ClaheParams) -> Raster<u8> {
    let (h, w) = img.dims();
    let (gy, gx) = p.tiles;
    let th = h.div_ceil(gy);
    let tw = w.div_ceil(gx);
    let area = th * tw;
    let mut luts = vec![[0u8; 256]; gy * gx];
    for ty in 0..gy {
        for tx in 0..gx {
            let mut hist = [0u32; 256];
            for r in ty * th..(ty + 1) * th {
                for c in tx * tw..(tx + 1) * tw {
                    let v = img.get(reflect101(r as isize, h), reflect101(c as isize, w));
                    hist[v as usize] += 1;
                }
            }
            luts[ty * gx + tx] = tile_lut(&mut hist, area, p.clip_limit);
        }
    }
    let axis = |pos: usize, tile: usize, n: usize| -> (usize, usize, f64) {
        let f = pos as f64 / tile as f64 - 0.5;
        let lo = f.floor();
        let frac = f - lo;
        let lo = lo as isize;
        let a = lo.clamp(0, n as isize - 1) as usize;
        let b = (lo + 1).clamp(0, n as isize - 1) as usize;
        (a, b, frac)
    };
    Raster::from_fn(h, w, |r, c| {
        let v = img.get(r, c) as usize;
        let (y1, y2, fy) = axis(r, th, gy);
        let (x1, x2, fx) = axis(c, tw, gx);
        let at = |y: usize, x: usize| luts[y * gx + x][v] as f64;
        let top = (1.0 - fx) * at(y1, x1) + fx * at(y1, x2);
        let bot = (1.0 - fx) * at(y2, x1) + fx * at(y2, x2);
        ((1.0 - fy) * top + fy * bot).round().clamp(0.0, 255.0) as u8
    })
}

/// Nearest-rank percentile of u8 values, `q` in (0, 100].
pub fn percentile_u8(values: &[u8], q: f64) -> u8 {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let rank = ((q / 100.0 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut acc = 0;
    for (v, n) in hist.iter().enumerate() {
        acc += n;
        if acc >= rank {
            return v as u8;
        }
    }
    255
}

/// Fiber stain intensity: inverted luma, so dark fibers score high.
pub fn stain_intensity(section: &SectionRecord) -> Raster<u8> {
    section.grayscale().map(|g| (255.0 - g).round().clamp(0.0, 255.0) as u8)
}

/// Fiber-pixel ratio of `region` over `stain` (high = fiber).
pub fn fib_dens_raster(stain: &Raster<u8>, region: &BundleRegion, p: &ClaheParams) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Empty("region".into()));
    }
    let (r0, c0, r1, c1) = region.bbox();
    let (h, w) = stain.dims();
    if r1 as usize >= h || c1 as usize >= w {
        return Err(Error::Invalid(format!(
            "region bbox ({r0},{c0})-({r1},{c1}) exceeds {h}x{w} section"
        )));
    }
    let bh = (r1 - r0 + 1) as usize;
    let bw = (c1 - c0 + 1) as usize;
    if bh < 2 || bw < 2 {
        return Err(Error::Invalid(format!("degenerate {bh}x{bw} bounding box")));
    }
    let crop = stain.crop(r0 as isize, c0 as isize, bh, bw, 0);
    let eq = clahe(&crop, p);
    let t = percentile_u8(eq.as_slice(), 95.0);
    let fibers = region
        .pixels
        .iter()
        .filter(|&&(r, c)| eq.get((r - r0) as usize, (c - c0) as usize) > t)
        .count();
    Ok(fibers as f64 / region.len() as f64)
}

pub fn fib_dens(section: &SectionRecord, region: &BundleRegion) -> Result<f64> {
    fib_dens_raster(&stain_intensity(section), region, &ClaheParams::default())
}

/// `(fib_dens(manual) − fib_dens(predicted)) × 100`, for a matched pair.
pub fn delta_fib_dens(manual: &BundleRegion, predicted: &BundleRegion, section: &SectionRecord) -> Result<f64> {
    delta_fib_dens_raster(manual, predicted, &stain_intensity(section), &ClaheParams::default())
}

pub fn delta_fib_dens_raster(
    manual: &BundleRegion,
    predicted: &BundleRegion,
    stain: &Raster<u8>,
    p: &ClaheParams,
) -> Result<f64> {
    if manual.overlap(predicted) == 0 {
        return Err(Error::Invalid("delta needs overlapping regions".into()));
    }
    Ok((fib_dens_raster(stain, manual, p)? - fib_dens_raster(stain, predicted, p)?) * 100.0)
}
