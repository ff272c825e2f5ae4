//! Offline training, the continual adaptation loop, ablations and reports.

mod adapt;
mod config;
mod grid;
mod kl;
mod offline;
mod report;
mod run;

pub use adapt::{adapt_step, AdaptSettings, AdaptState, StepMetrics};
pub use config::{
    AblationSection, AdapterSection, AlignChoice, AlignSection, ExperimentConfig, GeneratorSection, MAX_SEED, LossSection,
    ModelSection, OfflineSection, OptimizerSection, StreamSection,
};
pub use grid::{run_ablation_grid, AblationRow, AblationTable, ArtifactCache, GridAxes, DIRECT_TEST_LABEL};
pub use kl::{kl_align_loss, KL_VARIANCE_FLOOR};
pub use offline::{
    offline_train, source_data, OfflineArtifacts, OfflineReport, CENTERS_FILE, GENERATOR_FILE, MODEL_FILE,
    OFFLINE_REPORT_FILE,
};
pub use report::{
    accuracy_plot, emit_report, line_plot_svg, load_records, loss_plot, metrics_csv, run_json_path, BACKTEST_DOMAIN,
    METRICS_HEADER,
};
pub use run::{backtest_accuracy, build_stream, run_continual, run_continual_on, run_with_model, DomainResult, RunRecord};
