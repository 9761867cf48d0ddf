//! Losses, optimization and the training loop.

pub mod augment;
pub mod config;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use augment::{augment, AugmentConfig};
pub use config::{load_dataset, LossConfig, TrainConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{Adam, LrSchedule};
pub use trainer::{evaluate, predict_cloud, EpochRecord, Trainer};
