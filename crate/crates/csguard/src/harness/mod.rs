//! Experiment orchestration: configuration, trial execution, ablation grids,
//! FPR calibration, timing, and persistent reporting.

mod config;
mod experiment;
mod report;

pub use config::{ConfigError, ExperimentConfig, Mode};
pub use experiment::{
    ablation_csv, attacker_prior, calibrate_fpr, run_ablation, run_experiment, AblationAxis,
    FprCalibration, FprPoint, HarnessError, ATTACKER_MODEL_SHIFT,
};
pub use report::{
    load_report, save_report, Aggregate, ExperimentReport, ReportError, TimingSection, TrialRow,
    REPORT_SCHEMA_VERSION,
};
