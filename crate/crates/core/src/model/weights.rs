//! Model parameters, initialization, and canonical parameter ordering.
//!
//! The fused QKV projection mirrors BLOOM's layout: the weight is
//! `[d_model, 3*d_model]` with the Q, K, V thirds contiguous, and head h
//! occupying columns `[h*d_head, (h+1)*d_head)` inside each third. Head
//! h's context enters the output projection through input rows
//! `[h*d_head, (h+1)*d_head)`. Surgery depends on both facts.

use super::{ModelConfig, Result};
use crate::numerics::{normal_f32, stream, DetRng, Gradients, NodeId, Parameter, Tape, Tensor};
use std::ops::Range;

/// Column ranges of head `h` inside the Q, K, and V thirds of the fused
/// QKV weight (or its `[T, 3*d_model]` output).
pub fn qkv_head_cols(d_model: usize, d_head: usize, head: usize) -> [Range<usize>; 3] {
    let q = head * d_head..(head + 1) * d_head;
    let k = d_model + head * d_head..d_model + (head + 1) * d_head;
    let v = 2 * d_model + head * d_head..2 * d_model + (head + 1) * d_head;
    [q, k, v]
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln_attn_gain: Parameter,
    pub ln_attn_shift: Parameter,
    /// Fused [Q|K|V] projection, `[d_model, 3*d_model]`.
    pub qkv_w: Parameter,
    pub qkv_b: Parameter,
    /// Output projection, `[d_model, d_model]`.
    pub attn_out_w: Parameter,
    pub attn_out_b: Parameter,
    pub ln_mlp_gain: Parameter,
    pub ln_mlp_shift: Parameter,
    pub mlp_up_w: Parameter,
    pub mlp_up_b: Parameter,
    pub mlp_down_w: Parameter,
    pub mlp_down_b: Parameter,
}

/// All model parameters. The embedding is tied to the output head.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub embedding: Parameter,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Parameter,
    pub final_norm_shift: Parameter,
}

/// Number of parameter tensors per layer in the canonical order.
pub const PARAMS_PER_LAYER: usize = 12;

impl ModelWeights {
    /// Canonical parameter names, aligned with [`params`](Self::params).
    /// This order defines the checkpoint payload layout.
    pub fn param_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embedding.weight".to_string()];
        for l in 0..config.n_layers {
            for field in [
                "ln_attn.gain",
                "ln_attn.shift",
                "qkv.weight",
                "qkv.bias",
                "attn_out.weight",
                "attn_out.bias",
                "ln_mlp.gain",
                "ln_mlp.shift",
                "mlp_up.weight",
                "mlp_up.bias",
                "mlp_down.weight",
                "mlp_down.bias",
            ] {
                names.push(format!("layers.{l}.{field}"));
            }
        }
        names.push("final_norm.gain".to_string());
        names.push("final_norm.shift".to_string());
        names
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend([
                &layer.ln_attn_gain,
                &layer.ln_attn_shift,
                &layer.qkv_w,
                &layer.qkv_b,
                &layer.attn_out_w,
                &layer.attn_out_b,
                &layer.ln_mlp_gain,
                &layer.ln_mlp_shift,
                &layer.mlp_up_w,
                &layer.mlp_up_b,
                &layer.mlp_down_w,
                &layer.mlp_down_b,
            ]);
        }
        out.push(&self.final_norm_gain);
        out.push(&self.final_norm_shift);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.ln_attn_gain,
                &mut layer.ln_attn_shift,
                &mut layer.qkv_w,
                &mut layer.qkv_b,
                &mut layer.attn_out_w,
                &mut layer.attn_out_b,
                &mut layer.ln_mlp_gain,
                &mut layer.ln_mlp_shift,
                &mut layer.mlp_up_w,
                &mut layer.mlp_up_b,
                &mut layer.mlp_down_w,
                &mut layer.mlp_down_b,
            ]);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_shift);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Reset every trainable mask to all-true.
    pub fn clear_masks(&mut self) {
        for p in self.params_mut() {
            let shape = p.shape().to_vec();
            p.set_mask(crate::numerics::Mask::all_true(&shape));
        }
    }

    /// True when every parameter tensor is elementwise bit-identical.
    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        let a = self.params();
        let b = other.params();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.value.shape() == y.value.shape()
                    && x.value
                        .data()
                        .iter()
                        .zip(y.value.data())
                        .all(|(u, v)| u.to_bits() == v.to_bits())
            })
    }
}

/// Tape bindings for one forward pass: node ids in canonical parameter
/// order. Rebind for every new tape.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, weights: &ModelWeights) -> Self {
        let nodes = weights
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        BoundParams { nodes }
    }

    pub fn node(&self, index: usize) -> NodeId {
        self.nodes[index]
    }

    pub fn embedding(&self) -> NodeId {
        self.nodes[0]
    }

    /// Node ids of layer `l`'s parameters in field order.
    pub fn layer(&self, l: usize) -> &[NodeId] {
        let start = 1 + l * PARAMS_PER_LAYER;
        &self.nodes[start..start + PARAMS_PER_LAYER]
    }

    pub fn final_norm(&self) -> (NodeId, NodeId) {
        let n = self.nodes.len();
        (self.nodes[n - 2], self.nodes[n - 1])
    }

    /// Move gradients off the tape into the parameter accumulators.
    pub fn accumulate_into(&self, weights: &mut ModelWeights, grads: &mut Gradients) -> Result<()> {
        for (p, &node) in weights.params_mut().into_iter().zip(&self.nodes) {
            if let Some(g) = grads.take(node) {
                p.accumulate_grad(&g).map_err(super::ModelError::Numerics)?;
            }
        }
        Ok(())
    }
}

fn fill_normal(t: &mut Tensor, std: f32, rng: &mut DetRng) {
    for v in t.data_mut() {
        *v = normal_f32(rng) * std;
    }
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f32 {
    (2.0 / (fan_in + fan_out) as f32).sqrt()
}

/// Deterministic initialization: Xavier normal for projections (per-head
/// slices for the fused QKV), N(0, 0.02) embeddings, ones/zeros norms.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.d_model;
    let dh = config.d_head();
    let dm = config.d_mlp();
    let v = config.vocab_size;

    let mut embedding = Tensor::zeros(&[v, d]);
    fill_normal(&mut embedding, 0.02, &mut stream(seed, 0));

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        // One substream per layer keeps init independent of layer count.
        let mut rng = stream(seed, 1 + l as u64);

        let mut qkv_w = Tensor::zeros(&[d, 3 * d]);
        let slice_std = xavier_std(d, dh);
        // Column-major fill per head slice: each head's Q/K/V block is an
        // independent d x d_head linear map.
        for h in 0..config.n_heads {
            for range in qkv_head_cols(d, dh, h) {
                for col in range {
                    for row in 0..d {
                        qkv_w.data_mut()[row * 3 * d + col] = normal_f32(&mut rng) * slice_std;
                    }
                }
            }
        }

        let mut attn_out_w = Tensor::zeros(&[d, d]);
        fill_normal(&mut attn_out_w, xavier_std(d, d), &mut rng);
        let mut mlp_up_w = Tensor::zeros(&[d, dm]);
        fill_normal(&mut mlp_up_w, xavier_std(d, dm), &mut rng);
        let mut mlp_down_w = Tensor::zeros(&[dm, d]);
        fill_normal(&mut mlp_down_w, xavier_std(dm, d), &mut rng);

        layers.push(LayerWeights {
            ln_attn_gain: Parameter::new(Tensor::full(&[d], 1.0)),
            ln_attn_shift: Parameter::new(Tensor::zeros(&[d])),
            qkv_w: Parameter::new(qkv_w),
            qkv_b: Parameter::new(Tensor::zeros(&[3 * d])),
            attn_out_w: Parameter::new(attn_out_w),
            attn_out_b: Parameter::new(Tensor::zeros(&[d])),
            ln_mlp_gain: Parameter::new(Tensor::full(&[d], 1.0)),
            ln_mlp_shift: Parameter::new(Tensor::zeros(&[d])),
            mlp_up_w: Parameter::new(mlp_up_w),
            mlp_up_b: Parameter::new(Tensor::zeros(&[dm])),
            mlp_down_w: Parameter::new(mlp_down_w),
            mlp_down_b: Parameter::new(Tensor::zeros(&[d])),
        });
    }

    Ok(ModelWeights {
        embedding: Parameter::new(embedding),
        layers,
        final_norm_gain: Parameter::new(Tensor::full(&[d], 1.0)),
        final_norm_shift: Parameter::new(Tensor::zeros(&[d])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        let cfg = ModelConfig::default();
        let a = init_model(&cfg, 42).unwrap();
        let b = init_model(&cfg, 42).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_model(&cfg, 43).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn xavier_std_for_64x8_slice() {
        assert!((xavier_std(64, 8) - (2.0f32 / 72.0).sqrt()).abs() < 1e-7);
        assert!((xavier_std(64, 8) - 0.1667).abs() < 1e-4);
    }

    #[test]
    fn empirical_std_of_square_projection_within_ten_percent() {
        let cfg = ModelConfig {
            d_model: 256,
            n_heads: 32,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg, 7).unwrap();
        let data = w.layers[0].attn_out_w.value.data();
        let n = data.len() as f32;
        let mean: f32 = data.iter().sum::<f32>() / n;
        let var: f32 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let want = xavier_std(256, 256);
        assert!(
            (var.sqrt() - want).abs() / want < 0.10,
            "std {} vs {want}",
            var.sqrt()
        );
    }

    #[test]
    fn param_names_align_with_params() {
        let cfg = ModelConfig::default();
        let w = init_model(&cfg, 1).unwrap();
        let names = ModelWeights::param_names(&cfg);
        assert_eq!(names.len(), w.params().len());
        assert_eq!(names[0], "embedding.weight");
        assert_eq!(names[3], "layers.0.qkv.weight");
        assert_eq!(names[names.len() - 1], "final_norm.shift");
    }

    #[test]
    fn qkv_head_cols_tile_the_thirds() {
        let (d, dh, heads) = (64, 8, 8);
        let mut seen = vec![false; 3 * d];
        for h in 0..heads {
            for r in qkv_head_cols(d, dh, h) {
                for c in r {
                    assert!(!seen[c], "column {c} covered twice");
                    seen[c] = true;
                }
            }
        }
        assert!(seen.iter().all(|&b| b));
    }
}
