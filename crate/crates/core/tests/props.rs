//! Property tests for the numeric and diagnostic invariants.

use alibi_surgeon::diagnostics::{
    bos_mass, classify, drift, HeadClass, HeadMetrics, Thresholds, Zone,
};
use alibi_surgeon::diagnostics::{attn_entropy, ClassCounts, DiagnosisReport, HeadCell};
use alibi_surgeon::numerics::{Mask, Parameter, Tape, Tensor};
use alibi_surgeon::training::{chunk_tokens, detokenize, tokenize};
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    (-8.0f32..8.0).prop_map(|v| v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_zero(
        rows in 1usize..6,
        cols in 1usize..8,
        values in prop::collection::vec(-8.0f32..8.0, 48),
        mask_bits in prop::collection::vec(any::<bool>(), 48),
    ) {
        let mut logits = Tensor::zeros(&[rows, cols]);
        let mut bias = Tensor::zeros(&[rows, cols]);
        let mut any_open = vec![false; rows];
        for r in 0..rows {
            for c in 0..cols {
                logits.set2(r, c, values[(r * cols + c) % values.len()]);
                // keep column 0 open so no row is fully masked
                let masked = c != 0 && mask_bits[(r * cols + c) % mask_bits.len()];
                if masked {
                    bias.set2(r, c, f32::NEG_INFINITY);
                } else {
                    any_open[r] = true;
                }
            }
        }
        prop_assert!(any_open.iter().all(|&b| b));

        let mut tape = Tape::new();
        let x = tape.leaf(logits);
        let out = tape.softmax_rows(x, &bias).unwrap();
        let probs = tape.value(out);
        for r in 0..rows {
            let mut sum = 0.0f64;
            for c in 0..cols {
                let p = probs.at2(r, c);
                prop_assert!(p >= 0.0);
                if bias.at2(r, c) == f32::NEG_INFINITY {
                    prop_assert_eq!(p, 0.0);
                }
                sum += p as f64;
            }
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn mask_law_zeroes_exactly_where_false(
        grads in prop::collection::vec(finite_f32(), 1..64),
        bits in prop::collection::vec(any::<bool>(), 1..64),
    ) {
        let n = grads.len().min(bits.len());
        let shape = [n];
        let mut p = Parameter::new(Tensor::zeros(&shape));
        p.grad = Tensor::from_vec(&shape, grads[..n].to_vec());
        p.set_mask(Mask::from_vec(&shape, bits[..n].to_vec()));
        p.apply_mask();
        for i in 0..n {
            if bits[i] {
                prop_assert_eq!(p.grad.data()[i].to_bits(), grads[i].to_bits());
            } else {
                prop_assert_eq!(p.grad.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn tokenize_round_trips_and_chunking_conserves(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes.clone());
        let chunks = chunk_tokens(&bytes, 16);
        let total: usize = chunks.iter().map(|c| c.len() - 1).sum();
        prop_assert_eq!(total, bytes.len());
        for c in &chunks {
            prop_assert_eq!(c[0], 0);
            prop_assert!(c.len() <= 16);
        }
    }

    #[test]
    fn classify_never_gets_healthier_as_bos_rises(
        entropy in 0.0f32..3.0,
        a in 0.0f32..1.0,
        b in 0.0f32..1.0,
    ) {
        let rank = |c: HeadClass| match c {
            HeadClass::Healthy => 0,
            HeadClass::LowEntropy => 1,
            HeadClass::BosSink => 2,
            HeadClass::Dead => 3,
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let th = Thresholds::default();
        let c_lo = classify(HeadMetrics { bos_mass: lo, entropy }, &th);
        let c_hi = classify(HeadMetrics { bos_mass: hi, entropy }, &th);
        prop_assert!(rank(c_hi) >= rank(c_lo));
    }

    #[test]
    fn drift_antisymmetry_on_random_reports(
        stock_bos in prop::collection::vec(0.0f32..1.0, 24),
        post_bos in prop::collection::vec(0.0f32..1.0, 24),
    ) {
        let build = |values: &[f32]| {
            let th = Thresholds::default();
            let grid: Vec<Vec<HeadCell>> = (0..4)
                .map(|l| {
                    (0..6)
                        .map(|h| {
                            let bos = values[l * 6 + h];
                            HeadCell {
                                bos,
                                entropy: 1.0,
                                class: classify(HeadMetrics { bos_mass: bos, entropy: 1.0 }, &th),
                            }
                        })
                        .collect()
                })
                .collect();
            DiagnosisReport {
                checkpoint_id: "p".into(),
                prompt_sha: "p".into(),
                thresholds: th,
                grid,
                counts: ClassCounts::default(),
                band: None,
            }
        };
        let a = build(&stock_bos);
        let b = build(&post_bos);
        let ab = drift(&a, &b, 0.05, &Zone::All).unwrap();
        let ba = drift(&b, &a, 0.05, &Zone::All).unwrap();
        for (x, y) in ab.records.iter().zip(&ba.records) {
            prop_assert_eq!(x.delta, -y.delta);
            prop_assert_eq!(x.drifting, y.drifting);
        }
        prop_assert_eq!(ab.summary.drifting, ba.summary.drifting);
    }

    #[test]
    fn metrics_stay_in_bounds_on_random_causal_attention(
        seed in 0u64..1000,
        t in 2usize..10,
    ) {
        // random causal row-stochastic matrix
        let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as f32 / (1u64 << 24) as f32).max(1e-3)
        };
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let mut row = vec![0.0f32; i + 1];
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = next();
                sum += *v;
            }
            for (j, v) in row.iter().enumerate() {
                m.set2(i, j, v / sum);
            }
        }
        let bos = bos_mass(&m).unwrap();
        let ent = attn_entropy(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&bos));
        prop_assert!(ent >= 0.0 && ent <= (t as f32).ln() + 1e-5);
    }
}
