//! ROC / precision-recall metrics, class activation maps and cross-regime
//! comparison reports.

mod cam;
mod metrics;
mod report;

pub use cam::{cam_heatmap, cam_overlay, cam_raw, compute_cam, CaMap};
pub use metrics::{curve_report, pr_auc, recall_at, roc_auc, CurveReport, PrCurve, RocCurve, ScoredSet};
pub use report::{
    compare_regimes, regime_colour, write_curves, write_metrics_table, ComparisonArtifacts, ComparisonRow,
};
