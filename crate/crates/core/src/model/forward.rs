//! Forward pass with optional attention capture and head ablation.

use super::weights::{qkv_head_cols, BoundParams, ModelWeights};
use super::{alibi_bias, alibi_slopes, HeadSet, ModelConfig, ModelError, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Per-head attention matrices captured during one forward pass.
///
/// Every row of every matrix sums to 1 (within float tolerance) and has
/// causal lower-triangular support.
#[derive(Debug, Clone)]
pub struct AttentionSnapshots {
    n_layers: usize,
    n_heads: usize,
    pub seq_len: usize,
    mats: Vec<Tensor>,
}

impl AttentionSnapshots {
    pub fn get(&self, layer: usize, head: usize) -> &Tensor {
        &self.mats[layer * self.n_heads + head]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &Tensor)> {
        self.mats
            .iter()
            .enumerate()
            .map(|(i, t)| ((i / self.n_heads, i % self.n_heads), t))
    }
}

/// Node ids produced by a taped forward pass.
pub struct TapedForward {
    pub logits: NodeId,
    /// `n_layers * n_heads` attention nodes when capture was requested.
    pub attention: Vec<NodeId>,
}

/// Untaped forward output.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub snapshots: Option<AttentionSnapshots>,
}

/// Run the transformer on an existing tape with bound parameters.
///
/// `ablated` heads have their context vectors replaced by exact zeros
/// after attention, before the output projection.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    tokens: &[usize],
    capture: bool,
    ablated: &HeadSet,
) -> Result<TapedForward> {
    let t = tokens.len();
    if t == 0 {
        return Err(ModelError::EmptySequence);
    }
    if t > config.max_seq_len {
        return Err(ModelError::SeqTooLong {
            len: t,
            max: config.max_seq_len,
        });
    }
    for &(layer, head) in ablated {
        if !config.in_range(layer, head) {
            return Err(ModelError::InvalidHead { layer, head });
        }
    }
    let d = config.d_model;
    let dh = config.d_head();
    let schedule = alibi_slopes(config.n_heads)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let eps = 1e-5;
    // per-head biases are identical across layers; build them once
    let biases: Vec<Tensor> = (0..config.n_heads)
        .map(|h| alibi_bias(t, schedule.slope(h)))
        .collect();

    let mut x = tape.embedding_lookup(bound.embedding(), tokens)?;
    let mut attention = Vec::new();

    for l in 0..config.n_layers {
        let p = bound.layer(l);
        let (ln_a_gain, ln_a_shift, qkv_w, qkv_b) = (p[0], p[1], p[2], p[3]);
        let (attn_out_w, attn_out_b) = (p[4], p[5]);
        let (ln_m_gain, ln_m_shift) = (p[6], p[7]);
        let (mlp_up_w, mlp_up_b, mlp_down_w, mlp_down_b) = (p[8], p[9], p[10], p[11]);

        // Attention half (pre-norm residual)
        let normed = tape.layernorm(x, ln_a_gain, ln_a_shift, eps)?;
        let qkv = tape.matmul(normed, qkv_w)?;
        let qkv = tape.add_row_bias(qkv, qkv_b)?;

        let mut head_ctx = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let [qr, kr, vr] = qkv_head_cols(d, dh, h);
            let q = tape.slice_cols(qkv, qr.start, dh)?;
            let k = tape.slice_cols(qkv, kr.start, dh)?;
            let v = tape.slice_cols(qkv, vr.start, dh)?;
            // scaling Q instead of the T x T score matrix is the same
            // bilinear map at a fraction of the traffic
            let q = tape.scale(q, scale);
            let scores = tape.matmul_bt(q, k)?;
            let attn = tape.softmax_rows(scores, &biases[h])?;
            if capture {
                attention.push(attn);
            }
            let ctx = if ablated.contains(&(l, h)) {
                tape.leaf(Tensor::zeros(&[t, dh]))
            } else {
                tape.matmul(attn, v)?
            };
            head_ctx.push(ctx);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let proj = tape.matmul(ctx, attn_out_w)?;
        let proj = tape.add_row_bias(proj, attn_out_b)?;
        x = tape.add(x, proj)?;

        // MLP half
        let normed = tape.layernorm(x, ln_m_gain, ln_m_shift, eps)?;
        let up = tape.matmul(normed, mlp_up_w)?;
        let up = tape.add_row_bias(up, mlp_up_b)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, mlp_down_w)?;
        let down = tape.add_row_bias(down, mlp_down_b)?;
        x = tape.add(x, down)?;
    }

    let (fn_gain, fn_shift) = bound.final_norm();
    let x = tape.layernorm(x, fn_gain, fn_shift, eps)?;
    // Tied output head: logits = x @ embedding^T
    let logits = tape.matmul_bt(x, bound.embedding())?;

    Ok(TapedForward { logits, attention })
}

fn collect_snapshots(
    tape: &Tape,
    taped: &TapedForward,
    config: &ModelConfig,
    seq_len: usize,
) -> AttentionSnapshots {
    AttentionSnapshots {
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        seq_len,
        mats: taped
            .attention
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect(),
    }
}

/// Forward pass over fresh weights, optionally capturing every head's
/// attention matrix.
pub fn forward(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[usize],
    capture: bool,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, weights);
    let taped = forward_on_tape(&mut tape, &bound, config, tokens, capture, &HeadSet::new())?;
    let snapshots = capture.then(|| collect_snapshots(&tape, &taped, config, tokens.len()));
    Ok(ForwardOutput {
        logits: tape.value(taped.logits).clone(),
        snapshots,
    })
}

/// Forward with the given heads' context vectors zeroed before the output
/// projection. `forward_with_heads_ablated(w, c, t, {})` is bit-identical
/// to `forward`.
pub fn forward_with_heads_ablated(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[usize],
    ablated: &HeadSet,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, weights);
    let taped = forward_on_tape(&mut tape, &bound, config, tokens, true, ablated)?;
    let snapshots = Some(collect_snapshots(&tape, &taped, config, tokens.len()));
    Ok(ForwardOutput {
        logits: tape.value(taped.logits).clone(),
        snapshots,
    })
}
