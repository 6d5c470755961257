//! Desk-scale training bench for knowledge-consistent distillation.

pub mod algorithm;
pub mod dataset;
pub mod model;
pub mod train;

pub use algorithm::{run_algorithm1, run_from_pair, run_outcome, train_pair, RunConfig, RunOutcome, RunReport, TrainedPair};
pub use dataset::{make_synthetic_dataset, Dataset, GenSpec};
pub use model::{forward_with_activations, init_model, ModelWeights};
pub use train::{distill_train, train_classifier, DistillSetup, TrainConfig};
