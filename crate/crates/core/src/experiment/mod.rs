//! Experiment orchestration behind the command line: configuration, dataset
//! preparation, training runs, evaluation reports, sweeps and verification.

pub mod config;
pub mod data;
pub mod run;
pub mod sweep;
pub mod synth;
pub mod verify;

pub use config::{DatasetSpec, EvalConfig, ExperimentConfig, SweepConfig, SynthJob, VerifyConfig};
pub use data::{load_dataset, LoadedDataset};
pub use run::{cmd_eval, cmd_train, evaluate_model, Report, TrainSummary};
pub use sweep::{cmd_sweep, SweepReport};
pub use synth::cmd_synth;
pub use verify::{cmd_verify, CheckResult, VerifyReport};
