//! Offline actor-critic learners.

pub mod policy;
pub mod sac;
pub mod tabular;
pub mod train;

pub use policy::GaussianPolicy;
pub use sac::{Batch, SacAgent, SacConfig, StepMetrics};
pub use tabular::{evaluate_tabular, train_tabular, TabularAgent, TabularConfig};
pub use train::{metrics_csv, train_sac, EpochMetrics, TrainAbort, TrainConfig, TrainOutcome};
