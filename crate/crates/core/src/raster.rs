//! Raster geometry: region labeling and Euclidean distance transforms.

use crate::domain::{BundleRegion, Mask, Raster, Resolution, Severity};

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Labels 8-connected foreground components. Label 0 is background; labels
/// are assigned 1.. in row-major order of each component's first pixel.
pub fn label_components(mask: &Mask) -> (Raster<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = Raster::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 || labels.get(r, c) != 0 {
                continue;
            }
            next += 1;
            labels.set(r, c, next);
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                for (dr, dc) in NEIGHBORS_8 {
                    let nr = pr as isize + dr;
                    let nc = pc as isize + dc;
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) != 0 && labels.get(nr, nc) == 0 {
                        labels.set(nr, nc, next);
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Partitions the foreground into 8-connected regions.
pub fn connected_components(mask: &Mask) -> Vec<BundleRegion> {
    components_with_severity(mask, Severity::Predicted)
}

pub fn components_with_severity(mask: &Mask, severity: Severity) -> Vec<BundleRegion> {
    let (labels, n) = label_components(mask);
    let mut pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
    let (h, w) = mask.dims();
    for r in 0..h {
        for c in 0..w {
            let l = labels.get(r, c);
            if l != 0 {
                pixels[l as usize - 1].push((r as u32, c as u32));
            }
        }
    }
    pixels
        .into_iter()
        .filter_map(|p| BundleRegion::from_pixels(p, severity))
        .collect()
}

/// Region area in mm²: `|pixels| × (μm/px)² × 1e-6`.
pub fn area_mm2(region: &BundleRegion, res: &Resolution) -> f64 {
    region.pixels.len() as f64 * res.pixel_area_mm2()
}

/// Squared Euclidean distance (in pixels²) to the nearest foreground pixel,
/// computed exactly with the separable lower-envelope algorithm. Pixels with
/// no foreground anywhere get `f64::INFINITY`.
pub fn squared_distance_px(mask: &Mask) -> Raster<f64> {
    let (h, w) = mask.dims();
    let mut grid = Raster::from_fn(h, w, |r, c| if mask.get(r, c) != 0 { 0.0 } else { f64::INFINITY });
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    let mut v = vec![0usize; h.max(w)];
    let mut z = vec![0.0; h.max(w) + 1];

    for c in 0..w {
        for r in 0..h {
            f[r] = grid.get(r, c);
        }
        lower_envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid.set(r, c, d[r]);
        }
    }
    for r in 0..h {
        for c in 0..w {
            f[c] = grid.get(r, c);
        }
        lower_envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        for c in 0..w {
            grid.set(r, c, d[c]);
        }
    }
    grid
}

// 1-D squared distance transform of a sampled function (Felzenszwalb & Huttenlocher).
fn lower_envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        let qf = q as f64;
        loop {
            let p = v[k];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for (q, out) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *out = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Euclidean distance in μm to the nearest foreground pixel; foreground is 0.
/// An all-zero mask yields `+∞` everywhere.
pub fn distance_transform(mask: &Mask, res: &Resolution) -> Raster<f64> {
    squared_distance_px(mask).map(|d2| {
        if d2.is_finite() {
            d2.sqrt() * res.microns_per_pixel
        } else {
            f64::INFINITY
        }
    })
}
