//! Whole-stack detection: tiled prediction, thresholding, continuity
//! filtering and postprocessing.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::continuity::{
    build_stack, continuity_filter, postprocess, triplanar_prior, ContinuityConfig, PostprocessConfig, PriorConfig,
    PriorSource, PriorStack,
};
use crate::domain::{BundleRegion, ProbabilityMap, SectionRecord};
use crate::error::{Error, Result};
use crate::inference::{predict_probability, regions_from_map, TileSpec};
use crate::model::MultiTaskNet;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub continuity: ContinuityConfig,
    pub postprocess: PostprocessConfig,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.continuity.validate()?;
        self.postprocess.validate()
    }
}

/// Continuity filter (when priors are given) followed by postprocessing.
pub fn filter_section(
    regions: Vec<BundleRegion>,
    index: usize,
    section: &SectionRecord,
    priors: Option<&PriorStack>,
    cfg: &FilterConfig,
) -> Vec<BundleRegion> {
    let regions = match priors {
        Some(p) => continuity_filter(regions, index, p, &cfg.continuity),
        None => regions,
    };
    postprocess(regions, section, &cfg.postprocess)
}

pub fn filter_stack(
    raw: &[Vec<BundleRegion>],
    sections: &[SectionRecord],
    priors: Option<&PriorStack>,
    cfg: &FilterConfig,
) -> Result<Vec<Vec<BundleRegion>>> {
    if raw.len() != sections.len() || priors.is_some_and(|p| p.len() != sections.len()) {
        return Err(Error::Invalid(format!(
            "{} sections, {} detection sets, {} priors",
            sections.len(),
            raw.len(),
            priors.map_or(0, PriorStack::len)
        )));
    }
    Ok(raw
        .iter()
        .zip(sections)
        .enumerate()
        .map(|(i, (r, s))| filter_section(r.clone(), i, s, priors, cfg))
        .collect())
}

/// Aligns a stack and computes its priors.
pub fn stack_priors(sections: &[SectionRecord], source: PriorSource<'_>, cfg: &PriorConfig) -> Result<PriorStack> {
    let (alignment, volume) = build_stack(sections, cfg.downsample)?;
    let priors = triplanar_prior(sections, &alignment, &volume, source, cfg.threshold)?;
    PriorStack::new(alignment, priors)
}

/// Predictions of one stack before and after filtering.
#[derive(Debug, Clone)]
pub struct Detections {
    pub maps: Vec<ProbabilityMap>,
    pub raw: Vec<Vec<BundleRegion>>,
    pub filtered: Vec<Vec<BundleRegion>>,
}

pub fn detect_stack(
    model: &MultiTaskNet,
    sections: &[SectionRecord],
    tile: &TileSpec,
    priors: Option<&PriorStack>,
    cfg: &FilterConfig,
) -> Result<Detections> {
    let maps = sections
        .iter()
        .map(|s| predict_probability(model, s, tile))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<Vec<BundleRegion>> = maps.iter().map(|m| regions_from_map(m, tile.threshold).1).collect();
    let filtered = filter_stack(&raw, sections, priors, cfg)?;
    Ok(Detections { maps, raw, filtered })
}
