//! Attentive convolution for sentence modeling.
//!
//! Convolution filters see the usual width-3 local window plus an
//! attention-weighted summary of a context text (another sentence, several
//! evidence sentences, or the input itself). The crate carries its own small
//! reverse-mode differentiation engine, the layer variants and baselines, a
//! training/evaluation harness, and checkpoint and attention-map I/O.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use attention::{attentive_context, match_scores, AttentionMask, MatchMethod, MatchParams};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use layers::SelfMode;
pub use model::{count_params, ContextMode, Model, ModelConfig, TrainConfig, Variant};
pub use params::{Initializer, ParamId, ParamStore};
pub use tensor::Tensor;
pub use train::{evaluate, train, AdaGrad, EpochMetric, EvalReport};
