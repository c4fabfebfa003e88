//! Decoder-only ALiBi transformer with BLOOM-style fused QKV, per-head
//! slice addressing, attention capture, and checkpoint I/O.

mod alibi;
mod checkpoint;
mod config;
mod forward;
mod weights;

pub use alibi::{alibi_bias, alibi_slopes, AlibiSchedule};
pub use checkpoint::{checkpoint_id, load_checkpoint, save_checkpoint, CheckpointManifest, MAGIC};
pub use config::ModelConfig;
pub use forward::{
    forward, forward_on_tape, forward_with_heads_ablated, AttentionSnapshots, ForwardOutput,
    TapedForward,
};
pub use weights::{
    init_model, qkv_head_cols, BoundParams, LayerWeights, ModelWeights, PARAMS_PER_LAYER,
};

use crate::numerics::NumericsError;
use std::collections::BTreeSet;
use thiserror::Error;

/// (layer, head) coordinate.
pub type HeadCoord = (usize, usize);

/// Ordered set of head coordinates. BTreeSet so iteration order is
/// deterministic.
pub type HeadSet = BTreeSet<HeadCoord>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("head coordinate (layer {layer}, head {head}) out of range")]
    InvalidHead { layer: usize, head: usize },
    #[error("head count {0} is not a power of two <= 32")]
    BadHeadCount(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
