//! Toolkit for inducing, diagnosing, and surgically repairing BOS-sink
//! attention collapse in a small ALiBi transformer.
//!
//! The crate is organized around the lifecycle of the pathology:
//!
//! - [`numerics`]: dense f32 tensors, a reverse-mode tape, and a
//!   finite-difference oracle. Everything else is built on this.
//! - [`model`]: the decoder-only ALiBi transformer with fused QKV,
//!   per-head slice addressing, attention capture, and checkpoint I/O.
//! - [`training`]: byte-level corpus handling, AdamW with warmup/cosine
//!   schedule, gradient accumulation and clipping, perplexity, and the
//!   pretrain-to-collapse loop.
//! - [`diagnostics`]: per-head BOS mass and entropy, four-way head
//!   classification, sick-band detection, and drift accounting between
//!   checkpoints.
//! - [`surgery`]: target selection, Q/K/V reinitialization with zeroed
//!   output slices, gradient masks, and the two-pass protocol.
//! - [`report`]: run manifests and SVG figure emission.
//! - [`cli`]: the `alibi-surgeon` command line.

pub mod cli;
pub mod diagnostics;
pub mod model;
pub mod numerics;
pub mod report;
pub mod surgery;
pub mod training;
