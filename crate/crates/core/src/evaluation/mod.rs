//! Metrics, significance testing and the ablation harness.

mod ablation;
mod metrics;
mod stats;

pub use ablation::{
    evaluate, run_ablation, AblationAxis, AblationGrid, AblationReport, AxisValue, CellReport,
    Evaluation, DEFAULT_SEEDS,
};
pub use metrics::{accuracy, weighted_f1, ConfusionMatrix};
pub use stats::{ln_gamma, paired_t_test, regularized_incomplete_beta, two_sided_p, TTest};
