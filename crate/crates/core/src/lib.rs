//! Linear-time attention.
//!
//! Softmax attention, kernelized linear attention with nonnegative feature
//! maps, a causal linear kernel with a constant-memory backward pass, the
//! equivalent recurrent formulation for autoregressive decoding, a small
//! transformer trained through a reverse-mode tape, and the timing /
//! allocation harness used to compare them.

pub mod alloc_counter;
pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod init;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod recurrent;
pub mod tape;
pub mod train;

pub use attention::{
    causal_linear_attention, causal_linear_backward, causal_linear_forward, linear_attention,
    softmax_attention, AttentionBatch, CausalGrads, CausalIntermediate, FeatureMap,
    FeatureMapKind,
};
pub use error::{Error, Result};
pub use matrix::{matmul, rowwise_softmax, Matrix, Real};
pub use model::{AttentionKind, TransformerConfig, TransformerModel};
pub use recurrent::{generate, DecodeMode, KvCache, RecurrentState};
pub use tape::{Gradients, NodeId, Tape};
