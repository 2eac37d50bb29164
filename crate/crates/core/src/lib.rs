//! Kernel captioning for Gaussian-process regression.
//!
//! A doubly permutation-invariant transformer reads a dataset and emits a
//! caption: a short sum of kernel tokens drawn from a fixed vocabulary of
//! primitive and product kernels. The caption is then fitted by maximising
//! the GP marginal likelihood and the top candidates are model-averaged.
//!
//! Module map:
//! - [`kernels`]: primitive kernels, product tokens, priors, shrinkage.
//! - [`gp`]: exact GP sampling, marginal likelihood and gradients, prediction.
//! - [`vocab`]: token vocabulary and caption encoding.
//! - [`datagen`]: synthetic labelled datasets and shard files.
//! - [`tensor`]: tape-based reverse-mode autodiff.
//! - [`net`]: the encoder/decoder network and checkpoints.
//! - [`train`]: training loops.
//! - [`inference`]: caption generation, fitting and model averaging.
//! - [`baselines`]: greedy search, RBF-ARD and random selection.
//! - [`io`]: CSV ingestion and normalisation.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod gp;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use gp::GpModel;
pub use io::Dataset;
pub use kernels::{KernelExpression, Primitive, Token};
pub use net::{ArchitectureConfig, KittModel, ModelKind};
pub use train::TrainConfig;
pub use vocab::Vocabulary;
