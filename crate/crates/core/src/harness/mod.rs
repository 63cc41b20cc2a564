//! Config-driven experiment commands.
//!
//! The sanity checks here are evidence, not proof: a PASS means the chosen
//! privacy parameters stopped a small model from memorizing synthetic data
//! that a non-private twin memorizes easily. It does not certify privacy
//! against stronger attacks.

mod commands;
mod config;
mod train;

pub use commands::{
    cmd_calibrate, cmd_noise_curve, cmd_sanity, cmd_train, write_noise_curve, CalibrationReport,
    NoiseArmReport, PatternArmReport, SanityOutcome, SanityReport, TrainOutput,
};
pub use config::{ClipMode, ExperimentConfig, Task, LR_REFERENCE_BATCH};
pub use train::{
    train_dp, train_non_private, write_metrics_csv, CentralRun, MetricsRow, METRICS_HEADER,
};
