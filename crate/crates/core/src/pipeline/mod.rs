//! Model assembly, training and evaluation.

pub mod checkpoint;
pub mod metrics;
pub mod model;
pub mod train;

pub use metrics::Metrics;
pub use model::{predict_final, Model, SampleTrace, Scores, Variant};
pub use train::{batch_loss, evaluate, loss_final, train, train_with, EpochLog, LossTerms};
