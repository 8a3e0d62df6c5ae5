//! Parametric predictors, the λ network and optimizers.

pub mod checkpoint;
pub mod fm;
pub mod lambda;
pub mod optim;

pub use checkpoint::{Checkpoint, ModelBundle};
pub use fm::{sigmoid, FactorizationMachine};
pub use lambda::{LambdaNetwork, LambdaShape};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
