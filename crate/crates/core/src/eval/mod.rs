//! Metrics, interval estimates, hypothesis tests and embedding diagnostics.

pub mod metrics;
pub mod probe;
pub mod report;
pub mod stats;

pub use metrics::{auroc, ci95, mae, MetricResult};
pub use probe::{cohort_probe, pca2d, Pca2d};
pub use report::{binned_mae, csv_row, format_mean_se, format_p, AgeBin, BinTable, SeLimit, CSV_HEADER};
pub use stats::{
    delong_test, kruskal_wallis, wilcoxon_exact, wilcoxon_normal, wilcoxon_signed_rank, DeLong,
    KruskalWallis, WILCOXON_EXACT_MAX,
};
