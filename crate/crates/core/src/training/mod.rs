//! Training: optimizer loop with gradient accumulation, masking, and
//! clipping; perplexity evaluation; and pretraining-to-collapse.

mod corpus;
mod optim;

pub use corpus::{
    builtin_corpus_text, builtin_prompt_text, chunk_tokens, detokenize, tokenize, Corpus,
    BOS_TOKEN,
};
pub use optim::{clip_global_norm, lr_at, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::diagnostics::{
    diagnose, head_index_bos_correlation, DiagnosisReport, DiagnosticsError, ReportIdentity,
    Thresholds,
};
use crate::model::{
    forward_on_tape, BoundParams, HeadSet, ModelConfig, ModelError, ModelWeights,
};
use crate::numerics::{stream, Tape};
use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize, trace: Vec<StepTrace> },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: usize },
    #[error("corpus has no usable chunks")]
    EmptyCorpus,
    #[error("evaluation set has no prediction targets")]
    EmptyEvalSet,
    #[error("bad train config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer and schedule configuration.
///
/// `total_steps` and `warmup_steps` may be left unset: the horizon then
/// derives from `epochs` full corpus passes, and warmup defaults to 10%
/// of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f32,
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub total_steps: Option<usize>,
    pub accum_steps: usize,
    pub clip_norm: f32,
    pub seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f32,
    /// Sub-epoch held-out evaluation interval; default horizon/10.
    #[serde(default)]
    pub eval_every_steps: Option<usize>,
    /// Keep a weights snapshot at every epoch boundary (needed for
    /// best-epoch selection in surgical passes).
    #[serde(default)]
    pub keep_epoch_snapshots: bool,
    /// Cosine-decay horizon when it should outlast the run (collapse
    /// induction holds the rate near peak for the whole budget).
    #[serde(default)]
    pub schedule_horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 5e-5,
            warmup_steps: None,
            total_steps: None,
            accum_steps: 8,
            clip_norm: 1.0,
            seq_len: 128,
            epochs: 3,
            seed: 42,
            weight_decay: 0.0,
            eval_every_steps: None,
            keep_epoch_snapshots: false,
            schedule_horizon: None,
        }
    }
}

impl TrainConfig {
    /// Collapse-induction defaults: a 20k-step budget at short sequence
    /// length and an aggressive peak rate with cosine decay, tuned so
    /// slope-ordered BOS collapse emerges in CPU-scale runs. Short
    /// windows matter: they cap how much useful attention work exists,
    /// which is what strands the shallow-slope heads in the sink basin.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            total_steps: Some(20_000),
            accum_steps: 1,
            seq_len: 32,
            epochs: 1,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub grad_norm: f32,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub split: String,
    pub ppl: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub step: usize,
    pub held_out_ppl: f32,
}

pub struct TrainOutcome {
    pub loss_trace: Vec<StepTrace>,
    pub eval_trace: Vec<EvalPoint>,
    pub epoch_evals: Vec<EpochEval>,
    /// Index into `epoch_evals` of the lowest held-out perplexity.
    pub best_epoch: Option<usize>,
    /// Weights at each epoch boundary when requested.
    pub epoch_snapshots: Vec<ModelWeights>,
    pub steps_run: usize,
}

/// CSV for the loss trace: `step,lr,loss,grad_norm,clipped`.
pub fn loss_trace_csv(trace: &[StepTrace]) -> String {
    let mut out = String::from("step,lr,loss,grad_norm,clipped\n");
    for t in trace {
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{}\n",
            t.step, t.lr, t.loss, t.grad_norm, t.clipped
        ));
    }
    out
}

/// CSV for the eval trace: `step,split,ppl`.
pub fn eval_trace_csv(trace: &[EvalPoint]) -> String {
    let mut out = String::from("step,split,ppl\n");
    for t in trace {
        out.push_str(&format!("{},{},{:.4}\n", t.step, t.split, t.ppl));
    }
    out
}

fn fisher_yates(n: usize, rng: &mut crate::numerics::DetRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// One microbatch: forward on `chunk[..len-1]`, cross-entropy against
/// `chunk[1..]`, backward scaled by `1/window`, gradients accumulated
/// into the parameters. Returns the unscaled mean loss.
fn microbatch_step(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    chunk: &[usize],
    inv_window: f32,
) -> Result<f32> {
    let inputs = &chunk[..chunk.len() - 1];
    let targets = &chunk[1..];
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, weights);
    let fwd = forward_on_tape(&mut tape, &bound, config, inputs, false, &HeadSet::new())
        .map_err(TrainError::Model)?;
    let loss = tape
        .cross_entropy(fwd.logits, targets)
        .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
    let loss_value = tape.value(loss).item();
    let mut grads = tape
        .backward_scaled(loss, inv_window)
        .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
    bound
        .accumulate_into(weights, &mut grads)
        .map_err(TrainError::Model)?;
    Ok(loss_value)
}

/// The training loop. Honors trainable masks (gradients are re-masked
/// after every accumulation window), clips by global norm, and follows
/// the warmup/cosine schedule. Deterministic for a fixed seed.
pub fn train(
    weights: &mut ModelWeights,
    config: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if corpus.train.is_empty() || corpus.held_out.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.accum_steps == 0 {
        return Err(TrainError::BadConfig("accum_steps must be >= 1".into()));
    }
    let steps_per_epoch = corpus.train.len().div_ceil(cfg.accum_steps);
    let horizon = cfg.total_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    if horizon == 0 {
        // zero-step budget: evaluate and snapshot the starting weights
        let ppl = perplexity_chunks(weights, config, &corpus.held_out)?;
        return Ok(TrainOutcome {
            loss_trace: Vec::new(),
            eval_trace: Vec::new(),
            epoch_evals: vec![EpochEval { epoch: 0, step: 0, held_out_ppl: ppl }],
            best_epoch: Some(0),
            epoch_snapshots: if cfg.keep_epoch_snapshots {
                vec![weights.clone()]
            } else {
                Vec::new()
            },
            steps_run: 0,
        });
    }
    let schedule_end = cfg.schedule_horizon.unwrap_or(horizon).max(horizon);
    let warmup = cfg.warmup_steps.unwrap_or(schedule_end / 10);
    if warmup > schedule_end {
        return Err(TrainError::BadConfig(format!(
            "warmup {warmup} exceeds schedule horizon {schedule_end}"
        )));
    }
    let eval_every = cfg.eval_every_steps.unwrap_or((horizon / 10).max(1)).max(1);

    let mut opt = OptimizerState::new(weights);
    let mut outcome = TrainOutcome {
        loss_trace: Vec::with_capacity(horizon),
        eval_trace: Vec::new(),
        epoch_evals: Vec::new(),
        best_epoch: None,
        epoch_snapshots: Vec::new(),
        steps_run: 0,
    };

    let mut step = 0usize;
    let mut epoch = 0usize;
    'epochs: loop {
        if cfg.total_steps.is_none() && epoch >= cfg.epochs {
            break;
        }
        let order = fisher_yates(corpus.train.len(), &mut stream(cfg.seed, 1000 + epoch as u64));
        for window in order.chunks(cfg.accum_steps) {
            weights.zero_grads();
            let inv = 1.0 / window.len() as f32;
            let mut window_loss = 0.0f64;
            for &ci in window {
                let truncated: Vec<usize> =
                    corpus.train[ci].iter().copied().take(cfg.seq_len).collect();
                window_loss += microbatch_step(weights, config, &truncated, inv)? as f64;
            }
            let loss = (window_loss / window.len() as f64) as f32;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: step + 1,
                    trace: outcome.loss_trace,
                });
            }
            for p in weights.params_mut() {
                p.apply_mask();
            }
            let (grad_norm, clipped) = clip_global_norm(weights, cfg.clip_norm)
                .map_err(|_| TrainError::NonFiniteGradient { step: step + 1 })?;
            step += 1;
            let lr = lr_at(step, warmup, schedule_end, cfg.lr_peak);
            opt.adamw_step(weights, lr, cfg.weight_decay);
            outcome.loss_trace.push(StepTrace {
                step,
                lr,
                loss,
                grad_norm,
                clipped,
            });
            if step % eval_every == 0 {
                let ppl = perplexity_chunks(weights, config, &corpus.held_out)?;
                outcome.eval_trace.push(EvalPoint {
                    step,
                    split: "held_out".into(),
                    ppl,
                });
            }
            if step >= horizon {
                let ppl = perplexity_chunks(weights, config, &corpus.held_out)?;
                outcome.epoch_evals.push(EpochEval {
                    epoch,
                    step,
                    held_out_ppl: ppl,
                });
                if cfg.keep_epoch_snapshots {
                    outcome.epoch_snapshots.push(weights.clone());
                }
                break 'epochs;
            }
        }
        let ppl = perplexity_chunks(weights, config, &corpus.held_out)?;
        outcome.epoch_evals.push(EpochEval {
            epoch,
            step,
            held_out_ppl: ppl,
        });
        if cfg.keep_epoch_snapshots {
            outcome.epoch_snapshots.push(weights.clone());
        }
        epoch += 1;
    }

    outcome.steps_run = step;
    outcome.best_epoch = outcome
        .epoch_evals
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.held_out_ppl.partial_cmp(&b.held_out_ppl).unwrap())
        .map(|(i, _)| i);
    Ok(outcome)
}

fn chunk_loss(weights: &ModelWeights, config: &ModelConfig, chunk: &[usize]) -> Result<(f64, usize)> {
    if chunk.len() < 2 {
        return Ok((0.0, 0));
    }
    let inputs = &chunk[..chunk.len() - 1];
    let targets = &chunk[1..];
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, weights);
    let fwd = forward_on_tape(&mut tape, &bound, config, inputs, false, &HeadSet::new())
        .map_err(TrainError::Model)?;
    let loss = tape
        .cross_entropy(fwd.logits, targets)
        .map_err(|e| TrainError::Model(ModelError::Numerics(e)))?;
    Ok((tape.value(loss).item() as f64 * targets.len() as f64, targets.len()))
}

/// Token-weighted perplexity over pre-chunked token sequences:
/// `exp(sum(loss_i * n_i) / sum(n_i))` in nats.
pub fn perplexity_chunks(
    weights: &ModelWeights,
    config: &ModelConfig,
    chunks: &[Vec<usize>],
) -> Result<f32> {
    let clipped: Vec<Vec<usize>> = chunks
        .iter()
        .map(|c| c.iter().copied().take(config.max_seq_len).collect())
        .collect();

    #[cfg(feature = "parallel")]
    let per_chunk: Vec<Result<(f64, usize)>> = clipped
        .par_iter()
        .map(|c| chunk_loss(weights, config, c))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let per_chunk: Vec<Result<(f64, usize)>> = clipped
        .iter()
        .map(|c| chunk_loss(weights, config, c))
        .collect();

    let mut total_loss = 0.0f64;
    let mut total_tokens = 0usize;
    for r in per_chunk {
        let (l, n) = r?;
        total_loss += l;
        total_tokens += n;
    }
    if total_tokens == 0 {
        return Err(TrainError::EmptyEvalSet);
    }
    Ok((total_loss / total_tokens as f64).exp() as f32)
}

/// Perplexity of raw texts, chunked to the model's max sequence length.
pub fn perplexity(weights: &ModelWeights, config: &ModelConfig, texts: &[&[u8]]) -> Result<f32> {
    let mut chunks = Vec::new();
    for text in texts {
        chunks.extend(chunk_tokens(text, config.max_seq_len));
    }
    if chunks.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    perplexity_chunks(weights, config, &chunks)
}

/// Result of a collapse-induction pretraining run.
pub struct CollapseOutcome {
    pub weights: ModelWeights,
    pub report: DiagnosisReport,
    /// Spearman correlation between head index and mean-over-layers BOS
    /// mass; positive means slope-ordered collapse emerged.
    pub correlation: f64,
    pub train: TrainOutcome,
}

impl CollapseOutcome {
    pub fn collapse_induced(&self) -> bool {
        self.correlation > 0.0
    }
}

/// Pretrain a fresh model until the slope-ordered BOS pathology emerges,
/// then diagnose it. The caller decides how to treat a run where the
/// rank correlation stayed non-positive (`collapse_induced`).
pub fn pretrain_to_collapse(
    config: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    prompt_tokens: &[usize],
) -> Result<CollapseOutcome> {
    let mut weights = crate::model::init_model(config, cfg.seed)?;
    let train_outcome = train(&mut weights, config, corpus, cfg)?;
    let report = diagnose(
        &weights,
        config,
        prompt_tokens,
        &Thresholds::default(),
        ReportIdentity::default(),
    )?;
    let correlation = head_index_bos_correlation(&report);
    Ok(CollapseOutcome {
        weights,
        report,
        correlation,
        train: train_outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny_setup() -> (ModelConfig, ModelWeights, Corpus) {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            vocab_size: 256,
            max_seq_len: 32,
            mlp_ratio: 2,
        };
        let weights = init_model(&config, 7).unwrap();
        let text: Vec<u8> = builtin_corpus_text().bytes().take(4000).collect();
        let corpus = Corpus::build(&text, 32, 8, "test").unwrap();
        (config, weights, corpus)
    }

    #[test]
    fn zero_lr_leaves_weights_bit_identical() {
        let (config, mut weights, corpus) = tiny_setup();
        let before = weights.clone();
        let cfg = TrainConfig {
            lr_peak: 0.0,
            epochs: 1,
            accum_steps: 4,
            seq_len: 32,
            ..TrainConfig::default()
        };
        let out = train(&mut weights, &config, &corpus, &cfg).unwrap();
        assert!(weights.bit_eq(&before));
        assert!(!out.loss_trace.is_empty());
    }

    #[test]
    fn all_false_masks_freeze_everything_but_trace_is_recorded() {
        let (config, mut weights, corpus) = tiny_setup();
        for p in weights.params_mut() {
            let shape = p.shape().to_vec();
            p.set_mask(crate::numerics::Mask::all_false(&shape));
        }
        let before = weights.clone();
        let cfg = TrainConfig {
            lr_peak: 1e-2,
            epochs: 1,
            accum_steps: 4,
            seq_len: 32,
            ..TrainConfig::default()
        };
        let out = train(&mut weights, &config, &corpus, &cfg).unwrap();
        assert!(weights.bit_eq(&before));
        assert!(!out.loss_trace.is_empty());
    }

    #[test]
    fn short_training_reduces_loss() {
        let (config, mut weights, corpus) = tiny_setup();
        let cfg = TrainConfig {
            lr_peak: 3e-3,
            epochs: 4,
            accum_steps: 4,
            seq_len: 32,
            ..TrainConfig::default()
        };
        let out = train(&mut weights, &config, &corpus, &cfg).unwrap();
        let first = out.loss_trace.first().unwrap().loss;
        let last = out.loss_trace.last().unwrap().loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn fixed_seed_training_is_bit_deterministic() {
        let (config, w0, corpus) = tiny_setup();
        let cfg = TrainConfig {
            lr_peak: 1e-3,
            epochs: 2,
            accum_steps: 3,
            seq_len: 32,
            ..TrainConfig::default()
        };
        let mut a = w0.clone();
        let mut b = w0.clone();
        let ta = train(&mut a, &config, &corpus, &cfg).unwrap();
        let tb = train(&mut b, &config, &corpus, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ta.loss_trace.len(), tb.loss_trace.len());
        for (x, y) in ta.loss_trace.iter().zip(&tb.loss_trace) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
    }

    #[test]
    fn accumulation_matches_single_tape_mean_loss() {
        // k separate backwards scaled by 1/k must agree with one tape
        // computing the mean of the k losses.
        let (config, weights, corpus) = tiny_setup();
        let k = 3;
        let chunks: Vec<&Vec<usize>> = corpus.train.iter().take(k).collect();

        let mut acc_weights = weights.clone();
        acc_weights.zero_grads();
        for chunk in &chunks {
            microbatch_step(&mut acc_weights, &config, chunk, 1.0 / k as f32).unwrap();
        }

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &weights);
        let mut losses = Vec::new();
        for chunk in &chunks {
            let fwd = forward_on_tape(
                &mut tape,
                &bound,
                &config,
                &chunk[..chunk.len() - 1],
                false,
                &HeadSet::new(),
            )
            .unwrap();
            losses.push(tape.cross_entropy(fwd.logits, &chunk[1..]).unwrap());
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l).unwrap();
        }
        let mean = tape.scale(total, 1.0 / k as f32);
        let mut grads = tape.backward(mean).unwrap();
        let mut batch_weights = weights.clone();
        batch_weights.zero_grads();
        bound.accumulate_into(&mut batch_weights, &mut grads).unwrap();

        for (pa, pb) in acc_weights.params().iter().zip(batch_weights.params()) {
            for (ga, gb) in pa.grad.data().iter().zip(pb.grad.data()) {
                assert!(
                    (ga - gb).abs() < 1e-6,
                    "accumulated {ga} vs batched {gb}"
                );
            }
        }
    }

    #[test]
    fn uniform_logit_model_has_vocab_perplexity() {
        // zero embedding makes every logit identical
        let (config, mut weights, corpus) = tiny_setup();
        weights.embedding.value.data_mut().fill(0.0);
        let ppl = perplexity_chunks(&weights, &config, &corpus.held_out).unwrap();
        assert!((ppl - 256.0).abs() < 1e-2, "ppl {ppl}");
    }

    #[test]
    fn perplexity_matches_exp_mean_loss_oracle() {
        let (config, weights, corpus) = tiny_setup();
        let ppl = perplexity_chunks(&weights, &config, &corpus.held_out).unwrap();
        // independent recomputation
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in &corpus.held_out {
            let c: Vec<usize> = chunk.iter().copied().take(config.max_seq_len).collect();
            let (l, n) = chunk_loss(&weights, &config, &c).unwrap();
            total += l;
            count += n;
        }
        let want = (total / count as f64).exp() as f32;
        assert!((ppl - want).abs() / want < 1e-4, "{ppl} vs {want}");
    }

    #[test]
    fn memorizing_one_sequence_drives_perplexity_to_one() {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            vocab_size: 256,
            max_seq_len: 16,
            mlp_ratio: 2,
        };
        let mut weights = init_model(&config, 3).unwrap();
        // one memorizable training chunk, repeated; a distinct held-out chunk
        let chunk = tokenize(b"abcdefghijklmno");
        let corpus = Corpus {
            train: vec![chunk; 8],
            held_out: vec![tokenize(b"zyxwvutsrqponml")],
            provenance: "memorize".into(),
        };
        let cfg = TrainConfig {
            lr_peak: 1e-2,
            epochs: 60,
            accum_steps: 1,
            seq_len: 16,
            warmup_steps: Some(10),
            ..TrainConfig::default()
        };
        let mut w = weights.clone();
        train(&mut w, &config, &corpus, &cfg).unwrap();
        let ppl = perplexity_chunks(&w, &config, &corpus.train).unwrap();
        let before = perplexity_chunks(&weights, &config, &corpus.train).unwrap();
        assert!(ppl < 1.6, "memorization did not converge: {before} -> {ppl}");
    }
}
