//! Surgical reinitialization of collapsed heads.
//!
//! For each target head: redraw its Q/K/V column slices with Xavier
//! normal draws, zero those bias slices, and zero its output-projection
//! input rows so the head initially contributes nothing to the residual
//! stream. Gradient masks freeze every other parameter, and training
//! wakes only the surgical set. The two-pass protocol runs the band
//! policy first, then sweeps every remaining sick head (including
//! iatrogenic ones) from the pass-1 best checkpoint.

use crate::diagnostics::{
    diagnose, DiagnosisReport, DiagnosticsError, HeadClass, ReportIdentity, Thresholds,
};
use crate::model::{
    qkv_head_cols, HeadCoord, HeadSet, ModelConfig, ModelError, ModelWeights,
};
use crate::numerics::{normal_f32, stream, Mask};
use crate::training::{train, Corpus, TrainConfig, TrainError, TrainOutcome};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("surgical plan has an empty target set (policy {policy})")]
    EmptyTargets { policy: String },
    #[error("no sick band found in the report")]
    BandNotFound,
    #[error("invalid head coordinate (layer {layer}, head {head})")]
    InvalidCoord { layer: usize, head: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

pub type Result<T> = std::result::Result<T, SurgeryError>;

/// Target-selection policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// Sick heads inside the band (auto-detected unless given); healthy
    /// in-band heads are recorded as kept-frozen.
    Band { explicit: Option<[usize; 2]> },
    /// Every head of one head-index column, healthy or not, over an
    /// inclusive layer range (defaults to all layers).
    Column {
        index: usize,
        layer_range: Option<(usize, usize)>,
    },
    /// An explicit list of coordinates.
    Explicit(Vec<HeadCoord>),
    /// Every head currently classified BosSink or Dead, anywhere.
    Residual,
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::Band { .. } => "band".into(),
            Policy::Column { index, .. } => format!("column:{index}"),
            Policy::Explicit(_) => "explicit".into(),
            Policy::Residual => "residual".into(),
        }
    }
}

/// The target set, the kept-frozen set, and the reinit seed. Serialized
/// alongside every post-surgical checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgicalPlan {
    pub pass: u8,
    pub policy: String,
    /// Sorted (layer, head) pairs.
    pub targets: Vec<HeadCoord>,
    /// In-band heads that were healthy and stay frozen (band policy only).
    pub kept_frozen: Vec<HeadCoord>,
    pub seed: u64,
}

impl SurgicalPlan {
    pub fn target_set(&self) -> HeadSet {
        self.targets.iter().copied().collect()
    }

    pub fn kept_frozen_set(&self) -> HeadSet {
        self.kept_frozen.iter().copied().collect()
    }
}

/// Build a plan from a diagnosis report.
pub fn select_targets(
    report: &DiagnosisReport,
    policy: &Policy,
    pass: u8,
    seed: u64,
) -> Result<SurgicalPlan> {
    let (targets, kept_frozen): (HeadSet, HeadSet) = match policy {
        Policy::Band { explicit } => {
            let band = explicit.or(report.band).ok_or(SurgeryError::BandNotFound)?;
            let mut t = HeadSet::new();
            let mut f = HeadSet::new();
            for (coord, cell) in report.heads() {
                if coord.1 >= band[0] && coord.1 <= band[1] {
                    if cell.class.is_sick() {
                        t.insert(coord);
                    } else if cell.class == HeadClass::Healthy {
                        f.insert(coord);
                    }
                }
            }
            (t, f)
        }
        Policy::Column { index, layer_range } => {
            let (lo, hi) = layer_range.unwrap_or((0, report.n_layers().saturating_sub(1)));
            if *index >= report.n_heads() || hi >= report.n_layers() || lo > hi {
                return Err(SurgeryError::InvalidCoord {
                    layer: hi,
                    head: *index,
                });
            }
            ((lo..=hi).map(|l| (l, *index)).collect(), HeadSet::new())
        }
        Policy::Explicit(coords) => {
            for &(layer, head) in coords {
                if layer >= report.n_layers() || head >= report.n_heads() {
                    return Err(SurgeryError::InvalidCoord { layer, head });
                }
            }
            (coords.iter().copied().collect(), HeadSet::new())
        }
        Policy::Residual => (report.sick_set(), HeadSet::new()),
    };
    if targets.is_empty() {
        return Err(SurgeryError::EmptyTargets {
            policy: policy.name(),
        });
    }
    debug_assert!(targets.is_disjoint(&kept_frozen));
    Ok(SurgicalPlan {
        pass,
        policy: policy.name(),
        targets: targets.into_iter().collect(),
        kept_frozen: kept_frozen.into_iter().collect(),
        seed,
    })
}

/// Redraw head (layer, head)'s Q/K/V column slices (Xavier normal, per
/// slice fans d_model -> d_head), zero those bias slices, and zero its
/// attn_out input rows. Nothing else changes. Deterministic per
/// (seed, layer, head).
pub fn reinit_head(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    layer: usize,
    head: usize,
    seed: u64,
) -> Result<()> {
    if !config.in_range(layer, head) {
        return Err(SurgeryError::InvalidCoord { layer, head });
    }
    let d = config.d_model;
    let dh = config.d_head();
    let std = (2.0 / (d + dh) as f32).sqrt();
    let mut rng = stream(seed, (layer * config.n_heads + head) as u64 + 1);

    let lw = &mut weights.layers[layer];
    for range in qkv_head_cols(d, dh, head) {
        for col in range.clone() {
            for row in 0..d {
                lw.qkv_w.value.data_mut()[row * 3 * d + col] = normal_f32(&mut rng) * std;
            }
        }
        lw.qkv_b.value.data_mut()[range].fill(0.0);
    }
    let rows = head * dh..(head + 1) * dh;
    for row in rows {
        lw.attn_out_w.value.data_mut()[row * d..(row + 1) * d].fill(0.0);
    }
    Ok(())
}

/// Per-parameter boolean masks for a surgical plan, in canonical
/// parameter order.
#[derive(Debug, Clone)]
pub struct GradientMask {
    entries: Vec<(String, Mask)>,
}

/// Surgery knobs the source protocol leaves undocumented.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurgeryOptions {
    /// Train the (head-shared) attn_out bias of layers containing
    /// targets. Off by default: the bias feeds every head's output
    /// pathway, frozen ones included.
    pub train_attn_out_bias: bool,
}

impl GradientMask {
    pub fn entries(&self) -> &[(String, Mask)] {
        &self.entries
    }

    pub fn mask_for(&self, name: &str) -> Option<&Mask> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Install the masks onto the parameters.
    pub fn apply_to(&self, weights: &mut ModelWeights) {
        for ((_, mask), p) in self.entries.iter().zip(weights.params_mut()) {
            p.set_mask(mask.clone());
        }
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.count_trainable()).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, m)| m.data().len())
            .sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_elements() as f64 / self.total_elements() as f64
    }
}

/// Masks enforcing the freeze: trainable elements are exactly the target
/// heads' Q/K/V column slices (plus their bias slices) and their
/// attn_out input rows. MLP, embedding, and norm parameters stay fully
/// frozen.
pub fn build_masks(plan: &SurgicalPlan, config: &ModelConfig, options: &SurgeryOptions) -> GradientMask {
    let d = config.d_model;
    let dh = config.d_head();
    let names = ModelWeights::param_names(config);

    // all-false everywhere, then open the target slices
    let mut masks: Vec<Mask> = {
        // shapes in canonical order mirror init_model
        let reference = crate::model::init_model(config, 0).expect("valid config");
        reference
            .params()
            .into_iter()
            .map(|p| Mask::all_false(p.shape()))
            .collect()
    };

    let layer_param_index = |l: usize, field: usize| 1 + l * crate::model::PARAMS_PER_LAYER + field;
    const QKV_W: usize = 2;
    const QKV_B: usize = 3;
    const ATTN_OUT_W: usize = 4;
    const ATTN_OUT_B: usize = 5;

    for &(layer, head) in &plan.targets {
        for range in qkv_head_cols(d, dh, head) {
            let w = &mut masks[layer_param_index(layer, QKV_W)];
            for col in range.clone() {
                for row in 0..d {
                    w.data_mut()[row * 3 * d + col] = true;
                }
            }
            masks[layer_param_index(layer, QKV_B)].data_mut()[range].fill(true);
        }
        let w = &mut masks[layer_param_index(layer, ATTN_OUT_W)];
        for row in head * dh..(head + 1) * dh {
            w.data_mut()[row * d..(row + 1) * d].fill(true);
        }
        if options.train_attn_out_bias {
            masks[layer_param_index(layer, ATTN_OUT_B)].data_mut().fill(true);
        }
    }

    GradientMask {
        entries: names.into_iter().zip(masks).collect(),
    }
}

/// Reinitialize every target head and install the freeze masks.
pub fn perform_surgery(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    plan: &SurgicalPlan,
    options: &SurgeryOptions,
) -> Result<GradientMask> {
    for &(layer, head) in &plan.targets {
        reinit_head(weights, config, layer, head, plan.seed)?;
    }
    let masks = build_masks(plan, config, options);
    masks.apply_to(weights);
    Ok(masks)
}

/// Heads healthy in `stock` that are BosSink or Dead in `post`.
pub fn iatrogenic_detect(stock: &DiagnosisReport, post: &DiagnosisReport) -> Result<HeadSet> {
    // shape compatibility enforced through drift's checks
    if stock.n_layers() != post.n_layers() || stock.n_heads() != post.n_heads() {
        return Err(SurgeryError::Diagnostics(
            DiagnosticsError::GridShapeMismatch {
                lhs: (stock.n_layers(), stock.n_heads()),
                rhs: (post.n_layers(), post.n_heads()),
            },
        ));
    }
    Ok(stock
        .heads()
        .zip(post.heads())
        .filter(|((_, s), (_, p))| s.class == HeadClass::Healthy && p.class.is_sick())
        .map(|((coord, _), _)| coord)
        .collect())
}

/// Targeted heads classified Healthy in `post`.
pub fn recovered_count(plan: &SurgicalPlan, post: &DiagnosisReport) -> usize {
    plan.targets
        .iter()
        .filter(|&&(l, h)| post.cell(l, h).class == HeadClass::Healthy)
        .count()
}

/// One surgical pass: plan, weights at the best-eval epoch, and the
/// post-training diagnosis.
pub struct PassOutcome {
    pub plan: SurgicalPlan,
    pub weights: ModelWeights,
    pub report: DiagnosisReport,
    pub train: TrainOutcome,
}

pub struct TwoPassOutcome {
    pub stock_report: DiagnosisReport,
    pub pass1: PassOutcome,
    /// None when pass 1 left nothing sick: the residual pass is vacuous.
    pub pass2: Option<PassOutcome>,
    pub iatrogenic: HeadSet,
}

impl TwoPassOutcome {
    pub fn final_report(&self) -> &DiagnosisReport {
        self.pass2
            .as_ref()
            .map(|p| &p.report)
            .unwrap_or(&self.pass1.report)
    }

    pub fn final_weights(&self) -> &ModelWeights {
        self.pass2
            .as_ref()
            .map(|p| &p.weights)
            .unwrap_or(&self.pass1.weights)
    }
}

fn run_pass(
    start: &ModelWeights,
    config: &ModelConfig,
    plan: &SurgicalPlan,
    corpus: &Corpus,
    thresholds: &Thresholds,
    cfg: &TrainConfig,
    prompt_tokens: &[usize],
    options: &SurgeryOptions,
) -> Result<PassOutcome> {
    let mut weights = start.clone();
    perform_surgery(&mut weights, config, plan, options)?;
    let mut cfg = cfg.clone();
    cfg.keep_epoch_snapshots = true;
    let outcome = train(&mut weights, config, corpus, &cfg)?;
    let best = outcome
        .best_epoch
        .expect("training ran at least one epoch");
    let best_weights = outcome.epoch_snapshots[best].clone();
    let report = diagnose(
        &best_weights,
        config,
        prompt_tokens,
        thresholds,
        ReportIdentity::default(),
    )?;
    Ok(PassOutcome {
        plan: plan.clone(),
        weights: best_weights,
        report,
        train: outcome,
    })
}

/// The two-pass protocol: band surgery to the best-eval epoch, then a
/// residual pass over every head still sick (iatrogenic ones included)
/// starting from the pass-1 best checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn two_pass(
    stock: &ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
    thresholds: &Thresholds,
    cfg: &TrainConfig,
    prompt_tokens: &[usize],
    seed: u64,
    options: &SurgeryOptions,
) -> Result<TwoPassOutcome> {
    let stock_report = diagnose(
        stock,
        config,
        prompt_tokens,
        thresholds,
        ReportIdentity::default(),
    )?;
    let plan1 = select_targets(&stock_report, &Policy::Band { explicit: None }, 1, seed)?;
    let pass1 = run_pass(
        stock, config, &plan1, corpus, thresholds, cfg, prompt_tokens, options,
    )?;

    let iatrogenic = iatrogenic_detect(&stock_report, &pass1.report)?;
    let pass2 = match select_targets(&pass1.report, &Policy::Residual, 2, seed.wrapping_add(1)) {
        Ok(plan2) => {
            let mut start2 = pass1.weights.clone();
            start2.clear_masks();
            Some(run_pass(
                &start2, config, &plan2, corpus, thresholds, cfg, prompt_tokens, options,
            )?)
        }
        // pass 1 healed everything; no residual targets to operate on
        Err(SurgeryError::EmptyTargets { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(TwoPassOutcome {
        stock_report,
        pass1,
        pass2,
        iatrogenic,
    })
}

/// The masks-without-reinitialization control arm: identical target
/// selection and freeze, same training budget, no weight redraw.
pub struct NegativeControlOutcome {
    pub plan: SurgicalPlan,
    pub report: DiagnosisReport,
    pub recovered: usize,
    pub train: TrainOutcome,
}

#[allow(clippy::too_many_arguments)]
pub fn negative_control(
    stock: &ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
    thresholds: &Thresholds,
    cfg: &TrainConfig,
    prompt_tokens: &[usize],
    seed: u64,
    options: &SurgeryOptions,
) -> Result<NegativeControlOutcome> {
    let stock_report = diagnose(
        stock,
        config,
        prompt_tokens,
        thresholds,
        ReportIdentity::default(),
    )?;
    let plan = select_targets(&stock_report, &Policy::Band { explicit: None }, 1, seed)?;
    let mut weights = stock.clone();
    // masks only; no reinitialization
    build_masks(&plan, config, options).apply_to(&mut weights);
    let mut cfg = cfg.clone();
    cfg.keep_epoch_snapshots = true;
    let outcome = train(&mut weights, config, corpus, &cfg)?;
    let best = outcome.best_epoch.expect("at least one epoch");
    let best_weights = &outcome.epoch_snapshots[best];
    let report = diagnose(
        best_weights,
        config,
        prompt_tokens,
        thresholds,
        ReportIdentity::default(),
    )?;
    let recovered = recovered_count(&plan, &report);
    Ok(NegativeControlOutcome {
        plan,
        report,
        recovered,
        train: outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{ClassCounts, HeadCell};
    use crate::model::{forward, forward_with_heads_ablated, init_model};

    fn report_from_classes(grid_classes: Vec<Vec<HeadClass>>) -> DiagnosisReport {
        let grid: Vec<Vec<HeadCell>> = grid_classes
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&class| HeadCell {
                        bos: match class {
                            HeadClass::Healthy => 0.1,
                            HeadClass::LowEntropy => 0.2,
                            HeadClass::BosSink => 0.7,
                            HeadClass::Dead => 0.97,
                        },
                        entropy: if class == HeadClass::LowEntropy { 0.2 } else { 1.0 },
                        class,
                    })
                    .collect()
            })
            .collect();
        let mut counts = ClassCounts::default();
        for row in &grid {
            for c in row {
                match c.class {
                    HeadClass::Healthy => counts.healthy += 1,
                    HeadClass::BosSink => counts.bos_sink += 1,
                    HeadClass::Dead => counts.dead += 1,
                    HeadClass::LowEntropy => counts.low_entropy += 1,
                }
            }
        }
        let band = {
            // recompute band via public path: serialize round trip not
            // needed, reuse detect_band through a stub report
            None
        };
        let mut r = DiagnosisReport {
            checkpoint_id: String::new(),
            prompt_sha: String::new(),
            thresholds: Thresholds::default(),
            grid,
            counts,
            band,
        };
        r.band = crate::diagnostics::detect_band(&r);
        r
    }

    fn banded_report(l: usize, h: usize, band: std::ops::RangeInclusive<usize>, healthy_in_band: &[(usize, usize)]) -> DiagnosisReport {
        let classes: Vec<Vec<HeadClass>> = (0..l)
            .map(|li| {
                (0..h)
                    .map(|hi| {
                        if band.contains(&hi) && !healthy_in_band.contains(&(li, hi)) {
                            HeadClass::BosSink
                        } else {
                            HeadClass::Healthy
                        }
                    })
                    .collect()
            })
            .collect();
        report_from_classes(classes)
    }

    #[test]
    fn band_policy_targets_sick_and_freezes_healthy_in_band() {
        let healthy_in_band = [(0usize, 6usize), (3, 7)];
        let report = banded_report(6, 8, 5..=7, &healthy_in_band);
        let plan = select_targets(&report, &Policy::Band { explicit: None }, 1, 9).unwrap();
        assert_eq!(report.band, Some([5, 7]));
        assert_eq!(plan.targets.len(), 6 * 3 - 2);
        assert_eq!(plan.kept_frozen.len(), 2);
        for &(l, h) in &plan.kept_frozen {
            assert!(healthy_in_band.contains(&(l, h)));
        }
        let t = plan.target_set();
        assert!(t.is_disjoint(&plan.kept_frozen_set()));
    }

    #[test]
    fn column_policy_takes_whole_column_in_layer_range() {
        // grid shaped like the subject model: 24 layers x 16 heads,
        // column 5 over layers 5..=22 gives 18 targets
        let report = banded_report(24, 16, 9..=15, &[]);
        let plan = select_targets(
            &report,
            &Policy::Column { index: 5, layer_range: Some((5, 22)) },
            1,
            7,
        )
        .unwrap();
        assert_eq!(plan.targets.len(), 18);
        assert!(plan.targets.iter().all(|&(_, h)| h == 5));
        assert!(plan.kept_frozen.is_empty());
    }

    #[test]
    fn residual_policy_errors_on_healthy_grid() {
        let report = banded_report(6, 8, 5..=7, &[]);
        let all_healthy = report_from_classes(vec![vec![HeadClass::Healthy; 8]; 6]);
        assert!(matches!(
            select_targets(&all_healthy, &Policy::Residual, 2, 1),
            Err(SurgeryError::EmptyTargets { .. })
        ));
        // and on a sick grid it takes every sick head
        let plan = select_targets(&report, &Policy::Residual, 2, 1).unwrap();
        assert_eq!(plan.targets.len(), 18);
    }

    #[test]
    fn reinit_modifies_exactly_the_head_slices() {
        let config = ModelConfig::default();
        let before = init_model(&config, 11).unwrap();
        let mut after = before.clone();
        let (layer, head) = (2, 3);
        reinit_head(&mut after, &config, layer, head, 77).unwrap();

        let d = config.d_model;
        let dh = config.d_head();
        let mut changed = 0usize;
        for (pb, pa) in before.params().iter().zip(after.params()) {
            for (&b, &a) in pb.value.data().iter().zip(pa.value.data()) {
                if b.to_bits() != a.to_bits() {
                    changed += 1;
                }
            }
        }
        // 3 QKV slices (d x dh each) plus attn_out rows (dh x d); biases
        // were already zero so zeroing them changes nothing
        assert_eq!(changed, 3 * d * dh + dh * d);

        // bias slices are exactly zero
        for range in qkv_head_cols(d, dh, head) {
            for &b in &after.layers[layer].qkv_b.value.data()[range] {
                assert_eq!(b, 0.0);
            }
        }
        // attn_out rows exactly zero
        for row in head * dh..(head + 1) * dh {
            for &v in &after.layers[layer].attn_out_w.value.data()[row * d..(row + 1) * d] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn reinit_is_deterministic_per_seed() {
        let config = ModelConfig::default();
        let mut a = init_model(&config, 1).unwrap();
        let mut b = init_model(&config, 1).unwrap();
        reinit_head(&mut a, &config, 1, 2, 123).unwrap();
        reinit_head(&mut b, &config, 1, 2, 123).unwrap();
        assert!(a.bit_eq(&b));
        let mut c = init_model(&config, 1).unwrap();
        reinit_head(&mut c, &config, 1, 2, 124).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn reinit_rejects_bad_coordinates() {
        let config = ModelConfig::default();
        let mut w = init_model(&config, 1).unwrap();
        assert!(matches!(
            reinit_head(&mut w, &config, 99, 0, 1),
            Err(SurgeryError::InvalidCoord { .. })
        ));
    }

    #[test]
    fn post_surgical_forward_bit_equals_ablated_forward() {
        let config = ModelConfig::default();
        let stock = init_model(&config, 21).unwrap();
        let tokens: Vec<usize> = (0..40).map(|i| (i * 13 + 7) % 256).collect();

        let targets: HeadSet = [(0, 7), (2, 5), (5, 6)].into_iter().collect();
        let mut post = stock.clone();
        for &(l, h) in &targets {
            reinit_head(&mut post, &config, l, h, 5).unwrap();
        }

        let post_fwd = forward(&post, &config, &tokens, true).unwrap();
        let ablated_post = forward_with_heads_ablated(&post, &config, &tokens, &targets).unwrap();
        let ablated_stock = forward_with_heads_ablated(&stock, &config, &tokens, &targets).unwrap();

        assert_eq!(post_fwd.logits.data(), ablated_post.logits.data());
        assert_eq!(post_fwd.logits.data(), ablated_stock.logits.data());

        // non-target snapshots bit-equal the ablated stock forward
        let post_snaps = post_fwd.snapshots.unwrap();
        let stock_snaps = ablated_stock.snapshots.unwrap();
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                if !targets.contains(&(l, h)) {
                    assert_eq!(
                        post_snaps.get(l, h).data(),
                        stock_snaps.get(l, h).data(),
                        "non-target head ({l},{h}) snapshot changed"
                    );
                }
            }
        }
    }

    #[test]
    fn empty_plan_masks_are_all_false_and_one_head_counts_match() {
        let config = ModelConfig::default();
        let d = config.d_model;
        let dh = config.d_head();

        let plan = SurgicalPlan {
            pass: 1,
            policy: "explicit".into(),
            targets: vec![],
            kept_frozen: vec![],
            seed: 0,
        };
        let masks = build_masks(&plan, &config, &SurgeryOptions::default());
        assert_eq!(masks.trainable_elements(), 0);

        let plan = SurgicalPlan {
            targets: vec![(3, 2)],
            ..plan
        };
        let masks = build_masks(&plan, &config, &SurgeryOptions::default());
        // QKV columns 3*d*dh + bias slices 3*dh + attn_out rows dh*d
        assert_eq!(masks.trainable_elements(), 4 * d * dh + 3 * dh);

        let with_bias = build_masks(
            &plan,
            &config,
            &SurgeryOptions { train_attn_out_bias: true },
        );
        assert_eq!(with_bias.trainable_elements(), 4 * d * dh + 3 * dh + d);

        // MLP, embedding, and norm parameters are fully frozen
        for (name, mask) in masks.entries() {
            if name.contains("mlp") || name.contains("embedding") || name.contains("norm") || name.contains("ln_") {
                assert_eq!(mask.count_trainable(), 0, "{name} has trainable elements");
            }
        }
    }

    #[test]
    fn trainable_fraction_scales_with_target_count() {
        let config = ModelConfig::default();
        let one = build_masks(
            &SurgicalPlan {
                pass: 1,
                policy: "explicit".into(),
                targets: vec![(0, 0)],
                kept_frozen: vec![],
                seed: 0,
            },
            &config,
            &SurgeryOptions::default(),
        );
        let six = build_masks(
            &SurgicalPlan {
                pass: 1,
                policy: "explicit".into(),
                targets: (0..6).map(|l| (l, 0)).collect(),
                kept_frozen: vec![],
                seed: 0,
            },
            &config,
            &SurgeryOptions::default(),
        );
        assert_eq!(six.trainable_elements(), 6 * one.trainable_elements());
        assert!(six.trainable_fraction() > one.trainable_fraction());
    }

    #[test]
    fn iatrogenic_detection_is_a_class_transition() {
        let stock = banded_report(24, 16, 9..=15, &[(23, 12), (23, 14)]);
        let mut post = stock.clone();
        // everything in band recovered except two formerly healthy heads
        for (coord, _) in stock.heads() {
            let (l, h) = coord;
            if (9..=15).contains(&h) {
                post.grid[l][h].class = HeadClass::Healthy;
                post.grid[l][h].bos = 0.1;
            }
        }
        post.grid[23][12].class = HeadClass::BosSink;
        post.grid[23][12].bos = 0.6;
        post.grid[23][14].class = HeadClass::BosSink;
        post.grid[23][14].bos = 0.7;

        let set = iatrogenic_detect(&stock, &post).unwrap();
        let want: HeadSet = [(23, 12), (23, 14)].into_iter().collect();
        assert_eq!(set, want);

        // identical reports give the empty set
        assert!(iatrogenic_detect(&stock, &stock).unwrap().is_empty(),);

        // result is always a subset of post's sick set
        assert!(set.is_subset(&post.sick_set()));
    }

    #[test]
    fn two_pass_on_a_healthy_model_errors_cleanly() {
        use crate::training::{Corpus, TrainConfig};
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            vocab_size: 256,
            max_seq_len: 32,
            mlp_ratio: 2,
        };
        // a fresh init diagnoses healthy everywhere: band policy finds
        // nothing to operate on
        let weights = init_model(&config, 8).unwrap();
        let text: Vec<u8> = crate::training::builtin_corpus_text().as_bytes()[..4000].to_vec();
        let corpus = Corpus::build(&text, 32, 8, "t").unwrap();
        let prompt: Vec<usize> = (0..24).map(|i| (i * 3 + 1) % 256).collect();
        let cfg = TrainConfig {
            epochs: 1,
            seq_len: 32,
            ..TrainConfig::default()
        };
        let result = two_pass(
            &weights,
            &config,
            &corpus,
            &Thresholds::default(),
            &cfg,
            &prompt,
            1,
            &SurgeryOptions::default(),
        );
        match result {
            Err(SurgeryError::BandNotFound) | Err(SurgeryError::EmptyTargets { .. }) => {}
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("expected pass 1 to fail on a healthy model"),
        }
    }

    #[test]
    fn plan_json_shape_is_stable() {
        let plan = SurgicalPlan {
            pass: 1,
            policy: "band".into(),
            targets: vec![(5, 9), (5, 10)],
            kept_frozen: vec![(6, 11)],
            seed: 42,
        };
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"pass\":1"));
        assert!(json.contains("\"targets\":[[5,9],[5,10]]"));
        assert!(json.contains("\"kept_frozen\":[[6,11]]"));
        let back: SurgicalPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
