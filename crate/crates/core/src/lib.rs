//! Cascaded, prediction-sampling latent factorization of sparse third-order
//! tensors.
//!
//! A tensor `Y` of shape `|I| x |J| x |K|` with a small set of known cells is
//! approximated by `R` rank-one tensors built from factor matrices `U`, `S`,
//! `T`. Training runs as a cascade of layers: each layer fits fresh factors
//! with per-element Adam, predicts a batch of blank cells, squashes
//! out-of-range predictions and merges them back as synthetic entries for the
//! next layer.
//!
//! Module map:
//! - [`tensor_store`]: sparse tensor model, COO I/O, splitting, merging
//! - [`cp_model`]: factor matrices, prediction, loss and analytic gradients
//! - [`adam_trainer`]: per-element Adam training of one layer
//! - [`sampler`]: blank-cell selection, activation clamp, synthetic entries
//! - [`cascade`]: the multi-layer pipeline
//! - [`eval_metrics`]: RMSE/MAE, exact Wilcoxon signed-rank, gradient oracle
//! - [`synth_gen`]: seeded synthetic tensors with known ground truth
//! - [`cli`]: the `plft` command-line front end

pub mod adam_trainer;
pub mod cascade;
pub mod cli;
pub mod cp_model;
pub mod error;
pub mod eval_metrics;
pub(crate) mod rng;
pub mod sampler;
pub mod synth_gen;
pub mod tensor_store;

pub use adam_trainer::{train_layer, LayerResult, MomentState, TrainConfig};
pub use cascade::{run_cascade, CascadeConfig, CascadeResult, LayerRecord};
pub use cp_model::{FactorMatrices, LossParams};
pub use error::{PlftError, Result};
pub use eval_metrics::{evaluate, wilcoxon_signed_rank, MetricPair, WilcoxonReport};
pub use sampler::{activate, SamplePlan, ValueBounds};
pub use synth_gen::SynthSpec;
pub use tensor_store::{DatasetSplit, Entry, Origin, SparseTensor, TensorDims};
