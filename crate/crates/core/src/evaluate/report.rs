use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fibdens::{delta_fib_dens_raster, stain_intensity, ClaheParams};
use super::froc::FrocPoint;
use super::matching::{match_regions, MatchConfig, Tally};
use crate::domain::{BundleRegion, SectionRecord, Severity, LABEL_DENSE, LABEL_MODERATE};
use crate::error::{Error, Result};
use crate::raster::components_with_severity;

/// Charted bundles of a section as (dense, moderate) regions.
pub fn gt_regions(section: &SectionRecord) -> Option<(Vec<BundleRegion>, Vec<BundleRegion>)> {
    let dense = components_with_severity(&section.label_mask(LABEL_DENSE)?, Severity::Dense);
    let moderate = components_with_severity(&section.label_mask(LABEL_MODERATE)?, Severity::Moderate);
    Some((dense, moderate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub section_id: String,
    pub gt_dense: usize,
    pub gt_moderate: usize,
    pub tp_dense: usize,
    pub tp_moderate: usize,
    pub fp: usize,
    pub predicted: usize,
    /// δ fib_dens (%) for each hit dense bundle against its best-overlap match.
    pub delta_dense: Vec<f64>,
    pub delta_moderate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub match_config: MatchConfig,
    pub sections: Vec<SectionMetrics>,
    pub tally: Tally,
    pub tpr_dense: Option<f64>,
    pub tpr_moderate: Option<f64>,
    pub fp_avg: f64,
    pub mean_abs_delta_dense: Option<f64>,
    pub mean_abs_delta_moderate: Option<f64>,
}

fn mean_abs(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x.abs();
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn best_match<'a>(gt: &BundleRegion, preds: &'a [BundleRegion], mc: &MatchConfig) -> Option<&'a BundleRegion> {
    preds
        .iter()
        .filter(|p| mc.matches(p, gt))
        .max_by_key(|p| p.overlap(gt))
}

pub fn evaluate_section(section: &SectionRecord, predicted: &[BundleRegion], mc: &MatchConfig) -> Result<SectionMetrics> {
    let (dense, moderate) =
        gt_regions(section).ok_or_else(|| Error::Invalid(format!("section {} has no charting", section.id)))?;
    let m = match_regions(predicted, &dense, &moderate, mc);
    let stain = stain_intensity(section);
    let p = ClaheParams::default();
    let deltas = |gts: &[BundleRegion], hits: &[bool]| -> Vec<f64> {
        gts.iter()
            .zip(hits)
            .filter(|(_, &h)| h)
            .filter_map(|(g, _)| {
                let pr = best_match(g, predicted, mc)?;
                // Overlap-free IoU matches and 1-px boxes have no defined delta.
                delta_fib_dens_raster(g, pr, &stain, &p).ok()
            })
            .collect()
    };
    Ok(SectionMetrics {
        section_id: section.id.clone(),
        gt_dense: dense.len(),
        gt_moderate: moderate.len(),
        tp_dense: m.tp_dense(),
        tp_moderate: m.tp_moderate(),
        fp: m.fp_count(),
        predicted: predicted.len(),
        delta_dense: deltas(&dense, &m.dense_hit),
        delta_moderate: deltas(&moderate, &m.moderate_hit),
    })
}

pub fn summarize(sections: Vec<SectionMetrics>, mc: &MatchConfig) -> Result<MetricsReport> {
    let mut tally = Tally::default();
    for s in &sections {
        tally.sections += 1;
        tally.gt_dense += s.gt_dense;
        tally.gt_moderate += s.gt_moderate;
        tally.tp_dense += s.tp_dense;
        tally.tp_moderate += s.tp_moderate;
        tally.fp += s.fp;
    }
    Ok(MetricsReport {
        match_config: *mc,
        tpr_dense: tally.tpr_dense(),
        tpr_moderate: tally.tpr_moderate(),
        fp_avg: tally.fp_avg()?,
        mean_abs_delta_dense: mean_abs(sections.iter().flat_map(|s| s.delta_dense.iter().copied())),
        mean_abs_delta_moderate: mean_abs(sections.iter().flat_map(|s| s.delta_moderate.iter().copied())),
        sections,
        tally,
    })
}

/// Evaluates predicted regions per section against the charting.
pub fn evaluate_sections(
    sections: &[SectionRecord],
    predicted: &[Vec<BundleRegion>],
    mc: &MatchConfig,
) -> Result<MetricsReport> {
    mc.validate()?;
    if sections.len() != predicted.len() {
        return Err(Error::Invalid(format!(
            "{} sections but {} prediction sets",
            sections.len(),
            predicted.len()
        )));
    }
    let per = sections
        .iter()
        .zip(predicted)
        .map(|(s, p)| evaluate_section(s, p, mc))
        .collect::<Result<Vec<_>>>()?;
    summarize(per, mc)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn sections_csv(report: &MetricsReport) -> String {
    let mut out = String::from("section_id,gt_dense,gt_moderate,tp_dense,tp_moderate,fp,predicted,mean_delta_dense,mean_delta_moderate\n");
    for s in &report.sections {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.section_id,
            s.gt_dense,
            s.gt_moderate,
            s.tp_dense,
            s.tp_moderate,
            s.fp,
            s.predicted,
            opt(mean(&s.delta_dense)),
            opt(mean(&s.delta_moderate))
        );
    }
    out
}

pub fn froc_csv(points: &[FrocPoint]) -> String {
    let mut out = String::from("threshold,tpr_dense,tpr_moderate,fp_per_section\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:.2},{},{},{:.6}",
            p.threshold,
            opt(p.tpr_dense),
            opt(p.tpr_moderate),
            p.fp_per_section
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 50.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    s
}

/// FROC curves (dense and moderate TPR against FP/section) as SVG.
pub fn froc_svg(points: &[FrocPoint], elbow: Option<&FrocPoint>) -> String {
    let mut s = svg_open("FROC");
    let xmax = points.iter().map(|p| p.fp_per_section).fold(0.0, f64::max).max(1e-9) * 1.05;
    let px = |x: f64| M + x / xmax * (W - 2.0 * M);
    let py = |y: f64| H - M - y * (H - 2.0 * M);
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, M - 4.0, py(y) + 4.0);
        let x = xmax * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.2}</text>"#,
            px(x),
            H - M + 14.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">FP per section</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">TPR</text>"#, H / 2.0, H / 2.0);
    for (name, color, get) in [
        ("dense", "#c0392b", (|p: &FrocPoint| p.tpr_dense) as fn(&FrocPoint) -> Option<f64>),
        ("moderate", "#2471a3", |p: &FrocPoint| p.tpr_moderate),
    ] {
        let pts: Vec<String> = points
            .iter()
            .filter_map(|p| get(p).map(|y| format!("{:.1},{:.1}", px(p.fp_per_section), py(y))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{name}</title></polyline>"#, pts.join(" "));
    }
    if let Some(e) = elbow {
        if let Some(y) = e.tpr_dense {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="none" stroke="black"><title>threshold {:.2}</title></circle>"#,
                px(e.fp_per_section),
                py(y),
                e.threshold
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plots (median, quartiles, min/max whiskers), one per group.
pub fn boxplot_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let mut s = svg_open(title);
    let all: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if all.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    };
    let py = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, M - 4.0, py(v) + 4.0);
    }
    let slot = (W - 2.0 * M) / groups.len().max(1) as f64;
    for (i, (name, vals)) in groups.iter().enumerate() {
        let cx = M + slot * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{name}</text>"#, H - M + 14.0);
        if vals.is_empty() {
            continue;
        }
        let mut v = vals.clone();
        v.sort_by(f64::total_cmp);
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let bw = slot * 0.25;
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"##,
            py(v[0]),
            py(v[v.len() - 1])
        );
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#d6eaf8" stroke="black"/>"##,
            cx - bw,
            py(q3),
            2.0 * bw,
            (py(q1) - py(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"##,
            cx - bw,
            py(med),
            cx + bw,
            py(med)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_section, SynthConfig};

    #[test]
    fn perfect_prediction_scores_one() {
        let s = generate_section(&SynthConfig::tiny(5, 1), 0).unwrap();
        let (d, m) = gt_regions(&s).unwrap();
        let pred: Vec<BundleRegion> = d.iter().chain(&m).cloned().collect();
        let r = evaluate_sections(&[s], &[pred], &MatchConfig::default()).unwrap();
        assert_eq!(r.tpr_dense, Some(1.0));
        assert_eq!(r.fp_avg, 0.0);
        assert!(r.sections[0].delta_dense.iter().all(|&v| v == 0.0));
        assert!(sections_csv(&r).lines().count() == 2);
    }

    #[test]
    fn report_is_byte_stable() {
        let s = generate_section(&SynthConfig::tiny(6, 1), 0).unwrap();
        let (d, _) = gt_regions(&s).unwrap();
        let run = || serde_json::to_string(&evaluate_sections(&[s.clone()], &[d.clone()], &MatchConfig::default()).unwrap()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn plots_are_svg() {
        let pts = [
            FrocPoint { threshold: 0.1, tpr_dense: Some(1.0), tpr_moderate: Some(0.5), fp_per_section: 3.0 },
            FrocPoint { threshold: 0.9, tpr_dense: Some(0.2), tpr_moderate: None, fp_per_section: 0.0 },
        ];
        let svg = froc_svg(&pts, Some(&pts[0]));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        let b = boxplot_svg("delta", &[("dense".into(), vec![1.0, 2.0, 3.0]), ("moderate".into(), vec![])]);
        assert_eq!(b.matches("<rect").count(), 2);
    }
}
