//! Raster files and the dataset manifest.
//!
//! Images and label rasters are 8-bit PNG. Binary masks are stored as 0/255
//! and read back as "nonzero = 1". Charting rasters store the label values
//! {0,1,2} directly. Probability maps are single-channel 32-bit float TIFF.
//!
//! The manifest is a JSON array of [`ManifestEntry`] objects whose file paths
//! are relative to the manifest's directory (schema: `docs/manifest.schema.json`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{Mask, ProbabilityMap, Raster, Resolution, SectionRecord};
use crate::error::{Error, Result};

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    Ok(img.to_rgb8())
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

/// Reads an 8-bit single-channel PNG verbatim.
pub fn read_gray_png(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Raster::from_vec(h as usize, w as usize, img.into_raw())
}

pub fn write_gray_png(path: &Path, raster: &Raster<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_raw(raster.width() as u32, raster.height() as u32, raster.as_slice().to_vec())
        .ok_or_else(|| Error::format(path, "raster buffer size"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    Ok(read_gray_png(path)?.map(|v| u8::from(v != 0)))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_gray_png(path, &mask.map(|v| if v != 0 { 255 } else { 0 }))
}

pub fn write_f32_tiff(path: &Path, raster: &Raster<f32>) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = tiff::encoder::TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::format(path, e))?;
    enc.write_image::<tiff::encoder::colortype::Gray32Float>(
        raster.width() as u32,
        raster.height() as u32,
        raster.as_slice(),
    )
    .map_err(|e| Error::format(path, e))
}

pub fn read_f32_tiff(path: &Path) -> Result<Raster<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = tiff::decoder::Decoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| Error::format(path, e))?;
    match dec.read_image().map_err(|e| Error::format(path, e))? {
        tiff::decoder::DecodingResult::F32(v) => Raster::from_vec(h as usize, w as usize, v),
        _ => Err(Error::format(path, "expected single-channel 32-bit float TIFF")),
    }
}

pub fn write_probability_map(path: &Path, map: &ProbabilityMap) -> Result<()> {
    write_f32_tiff(path, &map.values)
}

pub fn read_probability_map(path: &Path, section_id: &str) -> Result<ProbabilityMap> {
    ProbabilityMap::new(section_id, read_f32_tiff(path)?)
}

/// One manifest row: section metadata plus relative raster paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub macaque_id: String,
    pub rostrocaudal_index: i64,
    pub image: String,
    #[serde(default)]
    pub charting: Option<String>,
    #[serde(default)]
    pub tissue_mask: Option<String>,
    #[serde(default)]
    pub wm_mask: Option<String>,
    #[serde(default)]
    pub ventricle_mask: Option<String>,
    pub microns_per_pixel: f64,
    pub section_gap_um: f64,
    pub charted: bool,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads every section referenced by a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<SectionRecord>> {
    let entries = read_manifest(manifest)?;
    let base = base_dir(manifest);
    entries.iter().map(|e| load_entry(&base, e)).collect()
}

pub fn load_entry(base: &Path, e: &ManifestEntry) -> Result<SectionRecord> {
    let opt_mask = |p: &Option<String>| -> Result<Option<Mask>> {
        p.as_ref().map(|p| read_mask_png(&base.join(p))).transpose()
    };
    let rec = SectionRecord {
        id: e.id.clone(),
        macaque_id: e.macaque_id.clone(),
        rostrocaudal_index: e.rostrocaudal_index,
        image: read_rgb_png(&base.join(&e.image))?,
        resolution: Resolution::new(e.microns_per_pixel, e.section_gap_um)?,
        charting: e.charting.as_ref().map(|p| read_gray_png(&base.join(p))).transpose()?,
        tissue_mask: opt_mask(&e.tissue_mask)?,
        wm_mask: opt_mask(&e.wm_mask)?,
        ventricle_mask: opt_mask(&e.ventricle_mask)?,
        charted: e.charted,
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes every section's rasters under `dir` and returns the manifest path.
pub fn write_dataset(sections: &[SectionRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sections.len());
    for s in sections {
        s.validate()?;
        let rel = |kind: &str| format!("{kind}/{}.png", s.id);
        write_rgb_png(&dir.join(rel("images")), &s.image)?;
        let mut entry = ManifestEntry {
            id: s.id.clone(),
            macaque_id: s.macaque_id.clone(),
            rostrocaudal_index: s.rostrocaudal_index,
            image: rel("images"),
            charting: None,
            tissue_mask: None,
            wm_mask: None,
            ventricle_mask: None,
            microns_per_pixel: s.resolution.microns_per_pixel,
            section_gap_um: s.resolution.section_gap_um,
            charted: s.charted,
        };
        if let Some(ch) = &s.charting {
            write_gray_png(&dir.join(rel("charting")), ch)?;
            entry.charting = Some(rel("charting"));
        }
        for (kind, mask, slot) in [
            ("tissue", &s.tissue_mask, &mut entry.tissue_mask),
            ("wm", &s.wm_mask, &mut entry.wm_mask),
            ("ventricle", &s.ventricle_mask, &mut entry.ventricle_mask),
        ] {
            if let Some(m) = mask {
                write_mask_png(&dir.join(rel(kind)), m)?;
                *slot = Some(rel(kind));
            }
        }
        entries.push(entry);
    }
    let path = dir.join("manifest.json");
    write_json(&path, &entries)?;
    Ok(path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}
