//! Classification metrics, model overlap analysis and ablation runs.
//!
//! Vulnerable is the positive class throughout.

mod ablation;
mod metrics;
mod overlap;

pub use ablation::{
    render_table, run_ablation, to_jsonl, AblationBackends, AblationOutcome, AblationRow,
    AblationSettings, RowStatus, Scoring,
};
pub use metrics::{
    confusion, evaluate, f1_score, metrics, ConfusionCounts, Degenerate, MetricsReport, Thresholds,
};
pub use overlap::{compare_models, ModelSets, OverlapReport, Region};
