//! Region matching, detection rates, fiber density, FROC analysis and reports.

pub mod ablation;
pub mod fibdens;
pub mod froc;
pub mod matching;
pub mod report;

pub use ablation::{ablation_csv, ablation_harness, ablation_table, AblationPlan, AblationRow, AblationRun, Variant};
pub use fibdens::{clahe, delta_fib_dens, fib_dens, ClaheParams};
pub use froc::{default_thresholds, elbow, froc_curve, FrocCase, FrocPoint};
pub use matching::{fp_avg, match_regions, tpr, MatchConfig, MatchResult, MatchRule, Tally};
pub use report::{evaluate_sections, gt_regions, MetricsReport, SectionMetrics};
