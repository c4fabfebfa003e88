//! AdamW, warmup/cosine schedule, and global-norm clipping.

use super::{Result, TrainError};
use crate::model::ModelWeights;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Linear warmup to `lr_peak`, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, lr_peak: f32) -> f32 {
    if step <= warmup {
        if warmup == 0 {
            return lr_peak;
        }
        return lr_peak * step as f32 / warmup as f32;
    }
    if total <= warmup {
        return 0.0;
    }
    let progress = (step - warmup) as f32 / (total - warmup) as f32;
    if progress >= 1.0 {
        return 0.0;
    }
    lr_peak * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Scale all gradients so the global L2 norm does not exceed `max_norm`.
/// Returns (pre-clip norm, whether scaling happened). The norm is
/// accumulated in f64 in canonical parameter order, so it is
/// deterministic.
pub fn clip_global_norm(weights: &mut ModelWeights, max_norm: f32) -> Result<(f32, bool)> {
    let mut acc = 0.0f64;
    for p in weights.params() {
        for &g in p.grad.data() {
            acc += g as f64 * g as f64;
        }
    }
    let norm = acc.sqrt() as f32;
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: 0 });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in weights.params_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
        Ok((norm, true))
    } else {
        Ok((norm, false))
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First/second moment state per parameter. Moments exist only for
/// parameters with at least one trainable element; fully frozen
/// parameters are skipped entirely, which also guarantees the freeze law
/// bit-exactly.
pub struct OptimizerState {
    entries: Vec<Option<Moments>>,
    step: usize,
}

impl OptimizerState {
    pub fn new(weights: &ModelWeights) -> Self {
        let entries = weights
            .params()
            .into_iter()
            .map(|p| {
                p.trainable_mask.any_trainable().then(|| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
            })
            .collect();
        OptimizerState { entries, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay Adam step over the trainable elements.
    ///
    /// Gradients must already be masked; frozen elements are skipped, so
    /// they are bit-identical afterward (weight decay included).
    pub fn adamw_step(&mut self, weights: &mut ModelWeights, lr: f32, weight_decay: f32) {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - ADAM_BETA1.powi(t);
        let corr2 = 1.0 - ADAM_BETA2.powi(t);
        for (p, entry) in weights.params_mut().into_iter().zip(&mut self.entries) {
            let Some(moments) = entry else { continue };
            let mask = p.trainable_mask.data();
            let grads = p.grad.data();
            // split borrows: collect updates then apply
            for i in 0..grads.len() {
                if !mask[i] {
                    continue;
                }
                let g = grads[i];
                let m = &mut moments.m[i];
                let v = &mut moments.v[i];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            }
            let value = p.value.data_mut();
            for i in 0..value.len() {
                if !mask[i] {
                    continue;
                }
                let m_hat = moments.m[i] / corr1;
                let v_hat = moments.v[i] / corr2;
                value[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * value[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numerics::Tensor;

    #[test]
    fn schedule_ramp_peak_and_tail() {
        let peak = 5e-5;
        assert_eq!(lr_at(0, 100, 1000, peak), 0.0);
        assert_eq!(lr_at(100, 100, 1000, peak), peak);
        assert_eq!(lr_at(1000, 100, 1000, peak), 0.0);
        // cosine midpoint: progress 0.5 -> peak / 2
        let mid = lr_at(550, 100, 1000, peak);
        assert!((mid - peak / 2.0).abs() < 1e-9);
        // monotone decay after warmup
        let mut prev = lr_at(100, 100, 1000, peak);
        for s in 101..=1000 {
            let cur = lr_at(s, 100, 1000, peak);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    fn tiny_weights() -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 16,
            max_seq_len: 16,
            mlp_ratio: 2,
        };
        let w = init_model(&cfg, 1).unwrap();
        (cfg, w)
    }

    #[test]
    fn clip_scales_when_over_and_not_under() {
        let (_, mut w) = tiny_weights();
        for p in w.params_mut() {
            p.grad.data_mut().fill(0.0);
        }
        // plant a single gradient of 2.0: global norm 2.0
        w.embedding.grad.data_mut()[0] = 2.0;
        let (norm, clipped) = clip_global_norm(&mut w, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-6);
        assert!(clipped);
        assert!((w.embedding.grad.data()[0] - 1.0).abs() < 1e-6);

        let (norm, clipped) = clip_global_norm(&mut w, 1.0).unwrap();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(!clipped);
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_max() {
        let (_, mut w) = tiny_weights();
        let mut state = 99u64;
        for p in w.params_mut() {
            for g in p.grad.data_mut() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                *g = ((state >> 40) as f32 / (1u64 << 24) as f32) - 0.5;
            }
        }
        let (pre, _) = clip_global_norm(&mut w, 1.0).unwrap();
        let mut acc = 0.0f64;
        for p in w.params() {
            for &g in p.grad.data() {
                acc += g as f64 * g as f64;
            }
        }
        let post = acc.sqrt() as f32;
        assert!((post - pre.min(1.0)).abs() < 1e-6, "post {post} pre {pre}");
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let (_, mut w) = tiny_weights();
        w.embedding.grad.data_mut()[3] = f32::NAN;
        assert!(clip_global_norm(&mut w, 1.0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (_, mut w) = tiny_weights();
        w.zero_grads();
        let before = w.clone();
        let mut opt = OptimizerState::new(&w);
        for _ in 0..10 {
            opt.adamw_step(&mut w, 0.1, 0.0);
        }
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn scalar_first_step_is_minus_lr() {
        // g=1, lr=0.1: bias-corrected m_hat/sqrt(v_hat) = 1, update -0.1
        let (_, mut w) = tiny_weights();
        w.zero_grads();
        let before = w.embedding.value.data()[0];
        w.embedding.grad.data_mut()[0] = 1.0;
        let mut opt = OptimizerState::new(&w);
        opt.adamw_step(&mut w, 0.1, 0.0);
        let after = w.embedding.value.data()[0];
        assert!(
            (after - (before - 0.1)).abs() < 1e-6,
            "update {}",
            after - before
        );
    }

    #[test]
    fn frozen_elements_never_move_across_many_steps() {
        let (_, mut w) = tiny_weights();
        // freeze everything except one element of the embedding
        for p in w.params_mut() {
            let shape = p.shape().to_vec();
            p.set_mask(crate::numerics::Mask::all_false(&shape));
        }
        let shape = w.embedding.value.shape().to_vec();
        let mut m = crate::numerics::Mask::all_false(&shape);
        m.data_mut()[0] = true;
        w.embedding.set_mask(m);

        let before = w.clone();
        let mut opt = OptimizerState::new(&w);
        for step in 0..100 {
            // adversarial: gradients everywhere, weight decay on
            for p in w.params_mut() {
                p.grad = Tensor::full(p.grad.shape(), 0.3 + step as f32 * 0.01);
                p.apply_mask();
            }
            opt.adamw_step(&mut w, 0.05, 0.1);
        }
        for (pb, pa) in before.params().iter().zip(w.params()) {
            for (i, (&b, &a)) in pb.value.data().iter().zip(pa.value.data()).enumerate() {
                let trainable = pa.trainable_mask.data()[i];
                if trainable {
                    assert_ne!(b.to_bits(), a.to_bits(), "trainable element did not move");
                } else {
                    assert_eq!(b.to_bits(), a.to_bits(), "frozen element moved");
                }
            }
        }
    }
}
