//! Disentangled graph + sequence recommender.
//!
//! The library couples two views of user behavior:
//!
//! * a **global item-link graph** built from consecutive co-occurrence in
//!   training sequences, aggregated with channel-aware attention so each
//!   item embedding splits into K disentangled channel blocks, and
//! * a **local sequence encoder**, a single-head self-attention VAE over a
//!   sliding window of recent items, whose latent codes pass through the
//!   same channel projections.
//!
//! Both views are combined into a single representation that scores the
//! whole catalog; training maximizes a β-weighted ELBO, and evaluation
//! follows the leave-one-out protocol with 100 sampled negatives per user.
//!
//! Everything runs on plain `f64` tensors with a small reverse-mode tape
//! ([`tape::Tape`]); every backward rule is validated against central
//! finite differences in this crate's test suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod export;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use corpus::{InteractionCorpus, LeaveOneOutSplit, NegativeSample, PaddedWindow, SplitView};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalSplit, MetricsReport};
pub use export::{channel_assignment, export_embeddings, pca_2d};
pub use graph::GlobalGraph;
pub use model::{Ablation, HyperParams, ModelParams, Scorer};
pub use train::{train, TrainConfig, TrainOutcome};
pub use tensor::Tensor;
