//! Whole-section prediction: overlapping tiles, averaged stitching,
//! thresholding and region extraction.

use image::RgbImage;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{BundleRegion, Mask, ProbabilityMap, Raster, SectionRecord};
use crate::error::{Error, Result};
use crate::model::MultiTaskNet;
use crate::raster::connected_components;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct TileSpec {
    pub tile_size: usize,
    pub overlap_px: usize,
    pub threshold: f32,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile_size: 1024,
            overlap_px: 64,
            threshold: 0.4,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.overlap_px >= self.tile_size {
            return Err(Error::Invalid(format!(
                "overlap {} must be smaller than tile size {}",
                self.overlap_px, self.tile_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) && self.threshold != 1.0 {
            return Err(Error::Invalid(format!("threshold {} must be in (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Tile start offsets along one axis. The last tile is flush with the end.
pub fn tile_origins(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < len {
        out.push(o);
        o += stride;
    }
    out.push(len - tile);
    out.dedup();
    out
}

/// A tile window: origin (row, col) and extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub origin: (usize, usize),
    pub height: usize,
    pub width: usize,
}

/// Tile windows covering an `h × w` section.
pub fn tile_windows(h: usize, w: usize, spec: &TileSpec) -> Vec<Tile> {
    let rows = tile_origins(h, spec.tile_size, spec.overlap_px);
    let cols = tile_origins(w, spec.tile_size, spec.overlap_px);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(Tile {
                origin: (r, c),
                height: spec.tile_size.min(h),
                width: spec.tile_size.min(w),
            });
        }
    }
    out
}

/// Cuts the section image into tiles with their origins.
pub fn tile_section(section: &SectionRecord, spec: &TileSpec) -> Vec<(RgbImage, (usize, usize))> {
    let (h, w) = section.dims();
    tile_windows(h, w, spec)
        .into_iter()
        .map(|t| {
            let img = image::imageops::crop_imm(
                &section.image,
                t.origin.1 as u32,
                t.origin.0 as u32,
                t.width as u32,
                t.height as u32,
            )
            .to_image();
            (img, t.origin)
        })
        .collect()
}

/// Averages overlapping tiles into one raster.
pub fn stitch(tile_maps: &[Raster<f32>], origins: &[(usize, usize)], dims: (usize, usize)) -> Result<Raster<f32>> {
    if tile_maps.len() != origins.len() {
        return Err(Error::Invalid(format!(
            "{} tile maps but {} origins",
            tile_maps.len(),
            origins.len()
        )));
    }
    let (h, w) = dims;
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (t, &(r0, c0)) in tile_maps.iter().zip(origins) {
        if r0 + t.height() > h || c0 + t.width() > w {
            return Err(Error::Invalid(format!("tile at ({r0}, {c0}) exceeds {h}x{w}")));
        }
        for r in 0..t.height() {
            for c in 0..t.width() {
                let i = (r0 + r) * w + c0 + c;
                sum[i] += t.get(r, c) as f64;
                count[i] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("pixel ({}, {}) is not covered by any tile", i / w, i % w)));
    }
    Ok(Raster::from_fn(h, w, |r, c| {
        let i = r * w + c;
        (sum[i] / count[i] as f64) as f32
    }))
}

/// Fiber probability for a whole section.
pub fn predict_probability(model: &MultiTaskNet, section: &SectionRecord, spec: &TileSpec) -> Result<ProbabilityMap> {
    spec.validate()?;
    let tiles = tile_section(section, spec);
    let mut maps = Vec::with_capacity(tiles.len());
    let mut origins = Vec::with_capacity(tiles.len());
    for (img, origin) in tiles {
        maps.push(model.predict_image(&img)?);
        origins.push(origin);
    }
    let values = stitch(&maps, &origins, section.dims())?;
    ProbabilityMap::new(section.id.clone(), values.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone)]
pub struct SectionPrediction {
    pub map: ProbabilityMap,
    pub mask: Mask,
    pub regions: Vec<BundleRegion>,
}

/// Thresholds a probability map and extracts regions carrying their mean probability.
pub fn regions_from_map(map: &ProbabilityMap, threshold: f32) -> (Mask, Vec<BundleRegion>) {
    let mask = Mask::threshold(&map.values, threshold);
    let regions = connected_components(&mask)
        .into_iter()
        .map(|r| r.with_mean_probability(&map.values))
        .collect();
    (mask, regions)
}

pub fn predict_section(model: &MultiTaskNet, section: &SectionRecord, spec: &TileSpec) -> Result<SectionPrediction> {
    let map = predict_probability(model, section, spec)?;
    let (mask, regions) = regions_from_map(&map, spec.threshold);
    Ok(SectionPrediction { map, mask, regions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierArmConfig, ModelConfig, UNetConfig};
    use crate::synth::{generate_section, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn single_and_double_tiles() {
        let spec = TileSpec {
            overlap_px: 0,
            ..Default::default()
        };
        assert_eq!(tile_windows(1024, 1024, &spec).len(), 1);
        assert_eq!(tile_windows(1024, 1024, &spec)[0].origin, (0, 0));
        assert_eq!(tile_windows(1024, 2048, &spec).len(), 2);
        assert_eq!(tile_windows(500, 700, &TileSpec::default()).len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tiles_cover_every_pixel(h in 1usize..4096, w in 1usize..4096, tile in 64usize..1100, ov in 0usize..64) {
            let spec = TileSpec { tile_size: tile, overlap_px: ov.min(tile - 1), threshold: 0.4 };
            let rows = tile_origins(h, spec.tile_size, spec.overlap_px);
            let cols = tile_origins(w, spec.tile_size, spec.overlap_px);
            for (len, origins) in [(h, &rows), (w, &cols)] {
                let ext = spec.tile_size.min(len);
                let mut covered = vec![false; len];
                for &o in origins.iter() {
                    prop_assert!(o + ext <= len);
                    covered[o..o + ext].iter_mut().for_each(|v| *v = true);
                }
                prop_assert!(covered.iter().all(|&v| v));
                for pair in origins.windows(2) {
                    prop_assert!(pair[0] + ext >= pair[1] + spec.overlap_px);
                }
            }
        }
    }

    #[test]
    fn stitch_averages_overlaps() {
        let a = Raster::filled(4, 6, 0.2f32);
        let b = Raster::filled(4, 6, 0.6f32);
        let out = stitch(&[a.clone(), b], &[(0, 0), (0, 4)], (4, 10)).unwrap();
        assert!((out.get(1, 2) - 0.2).abs() < 1e-6);
        assert!((out.get(1, 5) - 0.4).abs() < 1e-6);
        assert!((out.get(1, 8) - 0.6).abs() < 1e-6);
        assert_eq!(stitch(&[a.clone()], &[(0, 0)], (4, 6)).unwrap(), a);
        assert!(stitch(&[a], &[(0, 0)], (4, 7)).is_err());
    }

    fn tiny_model() -> MultiTaskNet {
        MultiTaskNet::new(
            ModelConfig {
                unet: UNetConfig {
                    base_width: 4,
                    depth: 2,
                    patch_size: 16,
                    ..Default::default()
                },
                arm: ClassifierArmConfig {
                    fc_sizes: vec![8, 4],
                    ..Default::default()
                },
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn output_shape_and_threshold_extremes() {
        let model = tiny_model();
        let s = generate_section(&SynthConfig::tiny(1, 1), 0).unwrap();
        let spec = TileSpec {
            tile_size: 64,
            overlap_px: 16,
            threshold: 1.0,
        };
        let pred = predict_section(&model, &s, &spec).unwrap();
        assert_eq!(pred.map.dims(), s.dims());
        assert_eq!(pred.mask.count(), pred.map.values.as_slice().iter().filter(|&&v| v >= 1.0).count());
        let mut last = usize::MAX;
        for t in [0.1f32, 0.3, 0.5, 0.7, 0.9] {
            let (m, _) = regions_from_map(&pred.map, t);
            assert!(m.count() <= last);
            last = m.count();
        }
    }

    #[test]
    fn tiling_is_nearly_translation_invariant() {
        let model = tiny_model();
        let s = generate_section(&SynthConfig::tiny(2, 1), 0).unwrap();
        let spec = TileSpec {
            tile_size: 64,
            overlap_px: 16,
            threshold: 0.4,
        };
        let base = predict_probability(&model, &s, &spec).unwrap();
        let (h, w) = s.dims();
        let pad = 16u32;
        let mut padded = s.clone();
        padded.image = RgbImage::from_pixel(w as u32 + pad, h as u32 + pad, image::Rgb([236, 236, 234]));
        image::imageops::replace(&mut padded.image, &s.image, pad as i64, pad as i64);
        padded.tissue_mask = None;
        padded.wm_mask = None;
        padded.ventricle_mask = None;
        padded.charting = None;
        padded.charted = false;
        let shifted = predict_probability(&model, &padded, &spec).unwrap();
        let mut err = 0.0f64;
        for r in 0..h {
            for c in 0..w {
                err += (base.values.get(r, c) - shifted.values.get(r + pad as usize, c + pad as usize)).abs() as f64;
            }
        }
        let mae = err / (h * w) as f64;
        assert!(mae < 0.05, "mean abs difference {mae}");
    }
}
