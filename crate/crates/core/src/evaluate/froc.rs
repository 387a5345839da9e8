use serde::{Deserialize, Serialize};

use super::matching::{match_regions, MatchConfig, Tally};
use crate::domain::{BundleRegion, Mask, ProbabilityMap};
use crate::error::{Error, Result};
use crate::raster::connected_components;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub tpr_dense: Option<f64>,
    pub tpr_moderate: Option<f64>,
    pub fp_per_section: f64,
}

/// 0.05 to 0.95 in steps of 0.05; 0.4 is on the grid.
pub fn default_thresholds() -> Vec<f32> {
    let mut t: Vec<f32> = (1..=19).map(|k| k as f32 / 20.0).collect();
    if !t.contains(&0.4) {
        t.push(0.4);
        t.sort_by(f32::total_cmp);
    }
    t
}

/// One section's probability map and charted bundles.
pub struct FrocCase<'a> {
    pub map: &'a ProbabilityMap,
    pub gt_dense: &'a [BundleRegion],
    pub gt_moderate: &'a [BundleRegion],
}

/// Detection candidate with its confidence score (peak probability).
#[derive(Debug, Clone)]
pub struct Candidate {
    pub region: BundleRegion,
    pub score: f64,
}

/// Candidate regions of a map: components at `base` after `filter`,
/// each scored by its peak probability.
pub fn candidates(
    map: &ProbabilityMap,
    base: f32,
    filter: &dyn Fn(Vec<BundleRegion>) -> Vec<BundleRegion>,
) -> Vec<Candidate> {
    let regions = connected_components(&Mask::threshold(&map.values, base))
        .into_iter()
        .map(|r| r.with_mean_probability(&map.values))
        .collect();
    filter(regions)
        .into_iter()
        .map(|region| {
            let score = region
                .pixels
                .iter()
                .map(|&(r, c)| map.values.get(r as usize, c as usize) as f64)
                .fold(0.0, f64::max);
            Candidate { region, score }
        })
        .collect()
}

/// FROC sweep over candidate scores. Candidates are extracted once per
/// section at the lowest threshold and passed through `pipeline`
/// (section index, regions) so the curve is monotone by construction.
pub fn froc_curve(
    cases: &[FrocCase<'_>],
    thresholds: &[f32],
    mc: &MatchConfig,
    pipeline: &dyn Fn(usize, Vec<BundleRegion>) -> Vec<BundleRegion>,
) -> Result<Vec<FrocPoint>> {
    if thresholds.len() < 2 {
        return Err(Error::Invalid("FROC needs at least two thresholds".into()));
    }
    if cases.is_empty() {
        return Err(Error::Empty("FROC cases".into()));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f32::total_cmp);
    ts.dedup();
    let base = ts[0];
    let per_case: Vec<Vec<Candidate>> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| candidates(c.map, base, &|r| pipeline(i, r)))
        .collect();
    let mut out = Vec::with_capacity(ts.len());
    for &t in &ts {
        let mut tally = Tally::default();
        for (case, cands) in cases.iter().zip(&per_case) {
            let kept: Vec<BundleRegion> = cands
                .iter()
                .filter(|c| c.score >= t as f64)
                .map(|c| c.region.clone())
                .collect();
            tally.add(&match_regions(&kept, case.gt_dense, case.gt_moderate, mc));
        }
        out.push(FrocPoint {
            threshold: t as f64,
            tpr_dense: tally.tpr_dense(),
            tpr_moderate: tally.tpr_moderate(),
            fp_per_section: tally.fp_avg()?,
        });
    }
    Ok(out)
}

/// Point farthest from the chord joining the first and last points, in
/// (FP/section, dense TPR) space with each axis scaled to its range.
pub fn elbow(points: &[FrocPoint]) -> Result<FrocPoint> {
    let first = points.first().ok_or_else(|| Error::Empty("FROC points".into()))?;
    let last = points.last().unwrap();
    let xy = |p: &FrocPoint| (p.fp_per_section, p.tpr_dense.unwrap_or(0.0));
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let (x, y) = xy(p);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let sx = if xmax > xmin { xmax - xmin } else { 1.0 };
    let sy = if ymax > ymin { ymax - ymin } else { 1.0 };
    let norm = |p: &FrocPoint| {
        let (x, y) = xy(p);
        (x / sx, y / sy)
    };
    let (ax, ay) = norm(first);
    let (bx, by) = norm(last);
    let (dx, dy) = (bx - ax, by - ay);
    let len = (dx * dx + dy * dy).sqrt();
    let dist = |p: &FrocPoint| {
        let (x, y) = norm(p);
        if len == 0.0 {
            ((x - ax).powi(2) + (y - ay).powi(2)).sqrt()
        } else {
            (dy * (x - ax) - dx * (y - ay)).abs() / len
        }
    };
    let mut best = *first;
    let mut best_d = f64::MIN;
    for p in points {
        let d = dist(p);
        if d > best_d {
            best_d = d;
            best = *p;
        }
    }
    Ok(best)
}

/// The point at `threshold`, if on the grid.
pub fn point_at(points: &[FrocPoint], threshold: f64) -> Option<FrocPoint> {
    points.iter().find(|p| (p.threshold - threshold).abs() < 1e-6).copied()
}
