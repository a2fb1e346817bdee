//! Experiment configuration, Monte Carlo runner and result files.

mod config;
mod mc;
mod missing;
mod output;

pub use config::{ExperimentConfig, FilterSection, MissingConfig, ModelId, PaperScale};
pub use mc::{run_mc, run_single, stream_rng, McOutcome, McSummary, RunOutput, SUMMARY_SCHEMA_VERSION};
pub use missing::generate_missing_pattern;
pub use output::{
    csv_header, read_records_csv, read_summary, write_config_echo, write_records_csv, write_summary,
    write_truth_csv, CsvRecord,
};
