//! Training loops for the CVR estimators.

pub mod batches;
pub mod config;
pub mod heads;
pub mod hyper;
pub mod trainer;

pub use config::*;
pub use trainer::{joint_learn, pretrain_propensity, train, trilevel_train, TrainOutcome, Trainer};
