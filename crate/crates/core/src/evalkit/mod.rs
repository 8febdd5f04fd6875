//! Metrics, no-TTA / TTA evaluation, and the ablation runner.

pub mod ablation;
pub mod inference;
pub mod metrics;

pub use ablation::{ablation_run, table1_rows, AblationRow, AblationSetup, AblationTable, RowResult};
pub use inference::{
    evaluate_no_tta, evaluate_tta, mean_in_order, tta_score, Evaluation, MetricReport, PredSet, Predictor,
    QualityModel,
};
pub use metrics::{average_ranks, plcc, srcc};
