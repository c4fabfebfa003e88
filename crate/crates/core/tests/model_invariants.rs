//! Structural invariants of the ALiBi transformer.

use alibi_surgeon::diagnostics::spearman;
use alibi_surgeon::model::{forward, init_model, qkv_head_cols, HeadSet, ModelConfig};

fn toy_tokens(n: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 31 + salt * 7 + 11) % 256).collect()
}

/// Mean attention distance `sum_j A[t,j] * (t - j)`, averaged over query
/// positions.
fn mean_attn_distance(mat: &alibi_surgeon::numerics::Tensor) -> f64 {
    let (t, _) = mat.dims2().unwrap();
    let mut total = 0.0f64;
    for i in 0..t {
        for j in 0..=i {
            total += mat.at2(i, j) as f64 * (i - j) as f64;
        }
    }
    total / t as f64
}

/// The slope schedule is strictly decreasing in head index, so with
/// random Q/K the distance penalty weakens along the head axis and the
/// mean attention distance grows with it: monotone non-decreasing in h,
/// in expectation over seeds.
#[test]
fn alibi_slope_orders_mean_attention_distance_across_heads() {
    let cfg = ModelConfig {
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let t = 64;
    let n_seeds = 10;
    let mut mean_by_head = vec![0.0f64; cfg.n_heads];
    for seed in 0..n_seeds {
        let w = init_model(&cfg, 500 + seed).unwrap();
        let out = forward(&w, &cfg, &toy_tokens(t, seed as usize), true).unwrap();
        let snaps = out.snapshots.unwrap();
        for h in 0..cfg.n_heads {
            let mut acc = 0.0;
            for l in 0..cfg.n_layers {
                acc += mean_attn_distance(snaps.get(l, h));
            }
            mean_by_head[h] += acc / cfg.n_layers as f64;
        }
    }
    for v in &mut mean_by_head {
        *v /= n_seeds as f64;
    }
    // strong rank agreement with head index, and the steepest-slope head
    // attends strictly closer than the flattest
    let idx: Vec<f64> = (0..cfg.n_heads).map(|i| i as f64).collect();
    let rho = spearman(&idx, &mean_by_head);
    assert!(
        rho > 0.95,
        "expected distance to grow with head index, got rho {rho:.3}: {mean_by_head:?}"
    );
    assert!(mean_by_head[0] < mean_by_head[cfg.n_heads - 1]);
}

/// Writing a sentinel into head h's Q slice changes that head's
/// attention snapshot and nobody else's (per-head independence given the
/// residual stream).
#[test]
fn sentinel_in_q_slice_only_moves_that_heads_snapshot() {
    let cfg = ModelConfig::default();
    let tokens = toy_tokens(24, 3);
    let base = init_model(&cfg, 77).unwrap();
    let base_out = forward(&base, &cfg, &tokens, true).unwrap();
    let base_snaps = base_out.snapshots.unwrap();

    let (layer, head) = (0, 3);
    let mut poked = base.clone();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let [qr, _, _] = qkv_head_cols(d, dh, head);
    for col in qr {
        for row in 0..d {
            poked.layers[layer].qkv_w.value.data_mut()[row * 3 * d + col] += 0.5;
        }
    }
    let poked_out = forward(&poked, &cfg, &tokens, true).unwrap();
    let poked_snaps = poked_out.snapshots.unwrap();

    // layer 0 snapshots: only the poked head differs (deeper layers see a
    // changed residual stream, so they are exempt)
    for h in 0..cfg.n_heads {
        let same = base_snaps.get(0, h).data() == poked_snaps.get(0, h).data();
        if h == head {
            assert!(!same, "sentinel did not change head {head}'s attention");
        } else {
            assert!(same, "sentinel leaked into head {h}'s attention");
        }
    }
}

/// Ablating the empty set is exactly `forward`, snapshot for snapshot.
#[test]
fn empty_ablation_matches_forward_snapshots_bitwise() {
    use alibi_surgeon::model::forward_with_heads_ablated;
    let cfg = ModelConfig {
        n_layers: 3,
        ..ModelConfig::default()
    };
    let w = init_model(&cfg, 12).unwrap();
    let tokens = toy_tokens(20, 5);
    let a = forward(&w, &cfg, &tokens, true).unwrap();
    let b = forward_with_heads_ablated(&w, &cfg, &tokens, &HeadSet::new()).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    let sa = a.snapshots.unwrap();
    let sb = b.snapshots.unwrap();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            assert_eq!(sa.get(l, h).data(), sb.get(l, h).data());
        }
    }
}
