//! Per-head diagnosis: BOS mass, attention entropy, four-way
//! classification, sick-band detection, threshold robustness, and drift
//! accounting between checkpoints.
//!
//! BOS mass of a T x T attention matrix A is the mean attention weight on
//! position 0 across query positions, `(1/T) * sum_t A[t, 0]`. Entropy is
//! the mean Shannon entropy of the per-query rows in nats, with
//! `0 * log 0 := 0`. Classification uses fixed thresholds with the
//! precedence Dead > BosSink > LowEntropy > Healthy so the four classes
//! partition every grid.

use crate::model::{
    forward, AttentionSnapshots, HeadCoord, HeadSet, ModelConfig, ModelError, ModelWeights,
};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("attention row {row} sums to {sum}, not normalized")]
    NotNormalized { row: usize, sum: f32 },
    #[error("diagnostic prompt has {len} tokens, need at least {min}")]
    PromptTooShort { len: usize, min: usize },
    #[error("reports disagree in grid shape: {lhs:?} vs {rhs:?}")]
    GridShapeMismatch { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("reports were produced from different prompts: {lhs} vs {rhs}")]
    PromptMismatch { lhs: String, rhs: String },
    #[error("need at least {min} checkpoints, got {got}")]
    TooFewCheckpoints { got: usize, min: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Minimum diagnostic prompt length; BOS mass and entropy bounds are
/// degenerate at tiny T.
pub const MIN_PROMPT_TOKENS: usize = 16;

/// Tolerance on attention row normalization before a matrix is rejected.
const ROW_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub bos_mass: f32,
    pub entropy: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadClass {
    Healthy,
    BosSink,
    Dead,
    LowEntropy,
}

impl HeadClass {
    /// BOS-collapsed classes; the ones surgery targets.
    pub fn is_sick(self) -> bool {
        matches!(self, HeadClass::BosSink | HeadClass::Dead)
    }
}

/// Classification thresholds. Literal inequalities: Healthy means
/// `bos <= healthy_max`, Dead means `bos > dead_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub healthy_max: f32,
    pub dead_min: f32,
    pub low_entropy_max: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            healthy_max: 0.50,
            dead_min: 0.95,
            low_entropy_max: 0.50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadCell {
    pub bos: f32,
    pub entropy: f32,
    pub class: HeadClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub healthy: usize,
    pub bos_sink: usize,
    pub dead: usize,
    pub low_entropy: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.healthy + self.bos_sink + self.dead + self.low_entropy
    }
}

/// Full per-head grid plus aggregates. Serialized as the report JSON
/// schema consumed by the drift and figure tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub checkpoint_id: String,
    pub prompt_sha: String,
    pub thresholds: Thresholds,
    /// `grid[layer][head]`
    pub grid: Vec<Vec<HeadCell>>,
    pub counts: ClassCounts,
    pub band: Option<[usize; 2]>,
}

impl DiagnosisReport {
    pub fn n_layers(&self) -> usize {
        self.grid.len()
    }

    pub fn n_heads(&self) -> usize {
        self.grid.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn cell(&self, layer: usize, head: usize) -> &HeadCell {
        &self.grid[layer][head]
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadCoord, &HeadCell)> {
        self.grid.iter().enumerate().flat_map(|(l, row)| {
            row.iter().enumerate().map(move |(h, cell)| ((l, h), cell))
        })
    }

    pub fn sick_set(&self) -> HeadSet {
        self.heads()
            .filter(|(_, c)| c.class.is_sick())
            .map(|(coord, _)| coord)
            .collect()
    }

    pub fn metrics(&self) -> Vec<HeadMetrics> {
        self.heads()
            .map(|(_, c)| HeadMetrics {
                bos_mass: c.bos,
                entropy: c.entropy,
            })
            .collect()
    }

    fn ensure_compatible(&self, other: &DiagnosisReport) -> Result<()> {
        let lhs = (self.n_layers(), self.n_heads());
        let rhs = (other.n_layers(), other.n_heads());
        if lhs != rhs {
            return Err(DiagnosticsError::GridShapeMismatch { lhs, rhs });
        }
        if self.prompt_sha != other.prompt_sha {
            return Err(DiagnosticsError::PromptMismatch {
                lhs: self.prompt_sha.clone(),
                rhs: other.prompt_sha.clone(),
            });
        }
        Ok(())
    }
}

fn check_normalized(attn: &Tensor) -> Result<(usize, usize)> {
    let (rows, cols) = attn.dims2().expect("attention matrix must be rank 2");
    for r in 0..rows {
        let mut sum = 0.0f64;
        for j in 0..cols {
            sum += attn.at2(r, j) as f64;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE as f64 {
            return Err(DiagnosticsError::NotNormalized {
                row: r,
                sum: sum as f32,
            });
        }
    }
    Ok((rows, cols))
}

/// Mean attention weight on position 0: `(1/T) * sum_t A[t, 0]`.
pub fn bos_mass(attn: &Tensor) -> Result<f32> {
    let (rows, _) = check_normalized(attn)?;
    let mut acc = 0.0f64;
    for t in 0..rows {
        acc += attn.at2(t, 0) as f64;
    }
    Ok((acc / rows as f64) as f32)
}

/// Mean Shannon entropy of the attention rows, natural log, with
/// `0 * log 0 := 0`.
pub fn attn_entropy(attn: &Tensor) -> Result<f32> {
    let (rows, cols) = check_normalized(attn)?;
    let mut acc = 0.0f64;
    for t in 0..rows {
        for j in 0..cols {
            let p = attn.at2(t, j) as f64;
            if p > 0.0 {
                acc -= p * p.ln();
            }
        }
    }
    Ok((acc / rows as f64) as f32)
}

/// Total classification: Dead > BosSink > LowEntropy > Healthy.
pub fn classify(m: HeadMetrics, th: &Thresholds) -> HeadClass {
    if m.bos_mass > th.dead_min {
        HeadClass::Dead
    } else if m.bos_mass > th.healthy_max {
        HeadClass::BosSink
    } else if m.entropy < th.low_entropy_max {
        HeadClass::LowEntropy
    } else {
        HeadClass::Healthy
    }
}

/// Identifiers stamped into a report by the caller (the library does not
/// know which file a weights struct came from).
#[derive(Debug, Clone, Default)]
pub struct ReportIdentity {
    pub checkpoint_id: String,
    pub prompt_sha: String,
}

/// Classify every head from one captured forward pass.
pub fn diagnose(
    weights: &ModelWeights,
    config: &ModelConfig,
    prompt_tokens: &[usize],
    thresholds: &Thresholds,
    identity: ReportIdentity,
) -> Result<DiagnosisReport> {
    if prompt_tokens.len() < MIN_PROMPT_TOKENS {
        return Err(DiagnosticsError::PromptTooShort {
            len: prompt_tokens.len(),
            min: MIN_PROMPT_TOKENS,
        });
    }
    let out = forward(weights, config, prompt_tokens, true)?;
    let snaps = out.snapshots.expect("capture requested");
    report_from_snapshots(&snaps, thresholds, identity)
}

/// Build a report from already-captured attention.
pub fn report_from_snapshots(
    snaps: &AttentionSnapshots,
    thresholds: &Thresholds,
    identity: ReportIdentity,
) -> Result<DiagnosisReport> {
    let mut grid = Vec::with_capacity(snaps.n_layers());
    let mut counts = ClassCounts::default();
    for l in 0..snaps.n_layers() {
        let mut row = Vec::with_capacity(snaps.n_heads());
        for h in 0..snaps.n_heads() {
            let attn = snaps.get(l, h);
            let metrics = HeadMetrics {
                bos_mass: bos_mass(attn)?,
                entropy: attn_entropy(attn)?,
            };
            let class = classify(metrics, thresholds);
            match class {
                HeadClass::Healthy => counts.healthy += 1,
                HeadClass::BosSink => counts.bos_sink += 1,
                HeadClass::Dead => counts.dead += 1,
                HeadClass::LowEntropy => counts.low_entropy += 1,
            }
            row.push(HeadCell {
                bos: metrics.bos_mass,
                entropy: metrics.entropy,
                class,
            });
        }
        grid.push(row);
    }
    let band = detect_band_in_grid(&grid);
    Ok(DiagnosisReport {
        checkpoint_id: identity.checkpoint_id,
        prompt_sha: identity.prompt_sha,
        thresholds: *thresholds,
        grid,
        counts,
        band,
    })
}

/// Fraction of heads whose Healthy-vs-collapsed verdict is identical
/// under all three BOS-mass thresholds.
///
/// A head with `bos = 0.5` exactly flips between the 0.40 and 0.50
/// verdicts (literal `bos <= threshold` inequalities), so it counts as a
/// disagreement; the boundary behavior is deterministic.
pub fn threshold_robustness(metrics: &[HeadMetrics], low: f32, mid: f32, high: f32) -> f32 {
    if metrics.is_empty() {
        return 1.0;
    }
    let agree = metrics
        .iter()
        .filter(|m| {
            let a = m.bos_mass <= low;
            let b = m.bos_mass <= mid;
            let c = m.bos_mass <= high;
            a == b && b == c
        })
        .count();
    agree as f32 / metrics.len() as f32
}

/// Density penalty per band column: prevents the trivial full-range
/// answer while still recovering contiguous sick bands.
pub const BAND_PENALTY_PER_COLUMN: f32 = 0.5;

/// Contiguous head-index interval maximizing
/// `sick_count(a..=b) - 0.5 * width`; ties break toward higher indices.
/// Returns None when no interval scores above the empty baseline.
pub fn detect_band(report: &DiagnosisReport) -> Option<[usize; 2]> {
    detect_band_in_grid(&report.grid)
}

fn detect_band_in_grid(grid: &[Vec<HeadCell>]) -> Option<[usize; 2]> {
    let n_heads = grid.first().map(|r| r.len()).unwrap_or(0);
    if n_heads == 0 {
        return None;
    }
    let sick_per_col: Vec<f32> = (0..n_heads)
        .map(|h| grid.iter().filter(|row| row[h].class.is_sick()).count() as f32)
        .collect();
    let mut best: Option<(f32, usize, usize)> = None;
    for a in 0..n_heads {
        let mut sick = 0.0f32;
        for b in a..n_heads {
            sick += sick_per_col[b];
            let score = sick - BAND_PENALTY_PER_COLUMN * (b - a + 1) as f32;
            let better = match best {
                None => score > 0.0,
                // Half-unit scores compare exactly in f32; equal scores
                // prefer the higher-index interval.
                Some((s, ba, bb)) => score > s || (score == s && (a, b) > (ba, bb)),
            };
            if better && score > 0.0 {
                best = Some((score, a, b));
            }
        }
    }
    best.map(|(_, a, b)| [a, b])
}

// ── Drift ────────────────────────────────────────────────────────────

/// Default |delta| above which a head counts as drifting.
pub const DRIFT_THRESHOLD: f32 = 0.05;

/// Head-coordinate zone for drift accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Zone {
    All,
    /// Head-index columns `from..=to` across all layers.
    Columns { from: usize, to: usize },
    /// Complement: heads outside columns `from..=to`.
    OutsideColumns { from: usize, to: usize },
    /// An explicit set of heads.
    Heads(Vec<HeadCoord>),
}

impl Zone {
    pub fn contains(&self, (layer, head): HeadCoord) -> bool {
        match self {
            Zone::All => true,
            Zone::Columns { from, to } => head >= *from && head <= *to,
            Zone::OutsideColumns { from, to } => head < *from || head > *to,
            Zone::Heads(set) => set.contains(&(layer, head)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Zone::All => "all".into(),
            Zone::Columns { from, to } => format!("columns H{from}-H{to}"),
            Zone::OutsideColumns { from, to } => format!("outside H{from}-H{to}"),
            Zone::Heads(set) => format!("{} explicit heads", set.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub layer: usize,
    pub head: usize,
    pub in_zone: bool,
    /// `bos_post - bos_stock`, signed.
    pub delta: f32,
    pub drifting: bool,
}

/// Worst drifter, formatted `L{layer}H{head}: {signed delta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub layer: usize,
    pub head: usize,
    pub delta: f32,
}

impl std::fmt::Display for WorstCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}: {:+.3}", self.layer, self.head, self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub zone: String,
    pub zone_heads: usize,
    pub drifting: usize,
    /// Mean |delta| over every zone head (the headline variant).
    pub mean_abs_delta_zone: f32,
    /// Mean |delta| over drifting zone heads only (emitted alongside; the
    /// source tables are ambiguous about which variant they report).
    pub mean_abs_delta_drifters: f32,
    pub worst: Option<WorstCase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftOutcome {
    pub records: Vec<DriftRecord>,
    pub summary: DriftSummary,
}

/// Per-head BOS-mass delta between two reports, with summary statistics
/// restricted to `zone`.
pub fn drift(
    stock: &DiagnosisReport,
    post: &DiagnosisReport,
    threshold: f32,
    zone: &Zone,
) -> Result<DriftOutcome> {
    stock.ensure_compatible(post)?;
    let mut records = Vec::with_capacity(stock.n_layers() * stock.n_heads());
    let mut zone_heads = 0usize;
    let mut drifting = 0usize;
    let mut abs_sum_zone = 0.0f64;
    let mut abs_sum_drift = 0.0f64;
    let mut worst: Option<WorstCase> = None;
    for ((coord, s), (_, p)) in stock.heads().zip(post.heads()) {
        let delta = p.bos - s.bos;
        let is_drifting = delta.abs() > threshold;
        let in_zone = zone.contains(coord);
        if in_zone {
            zone_heads += 1;
            abs_sum_zone += delta.abs() as f64;
            if is_drifting {
                drifting += 1;
                abs_sum_drift += delta.abs() as f64;
            }
            if worst.map(|w| delta.abs() > w.delta.abs()).unwrap_or(true) {
                worst = Some(WorstCase {
                    layer: coord.0,
                    head: coord.1,
                    delta,
                });
            }
        }
        records.push(DriftRecord {
            layer: coord.0,
            head: coord.1,
            in_zone,
            delta,
            drifting: is_drifting,
        });
    }
    let summary = DriftSummary {
        zone: zone.label(),
        zone_heads,
        drifting,
        mean_abs_delta_zone: if zone_heads > 0 {
            (abs_sum_zone / zone_heads as f64) as f32
        } else {
            0.0
        },
        mean_abs_delta_drifters: if drifting > 0 {
            (abs_sum_drift / drifting as f64) as f32
        } else {
            0.0
        },
        worst,
    };
    Ok(DriftOutcome { records, summary })
}

/// CSV for a drift record set: `layer,head,zone,delta,drifting`.
pub fn drift_csv(records: &[DriftRecord]) -> String {
    let mut out = String::from("layer,head,zone,delta,drifting\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.layer,
            r.head,
            if r.in_zone { "in" } else { "out" },
            r.delta,
            r.drifting
        ));
    }
    out
}

// ── Column drift trajectories ────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Spreading,
    Stable,
}

/// Spreading when the final mean exceeds 1.5x the first checkpoint's
/// mean (strict, so an exact 1.5x ratio stays Stable).
pub const SPREAD_RATIO: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTrend {
    pub column: usize,
    pub frozen_heads: usize,
    /// Mean |delta| of the column's frozen heads at each post checkpoint,
    /// relative to stock.
    pub means: Vec<f32>,
    pub trend: Trend,
}

/// Per-column drift trajectory of frozen heads across a checkpoint
/// sequence. `reports[0]` is the stock baseline; columns with no frozen
/// heads are omitted.
pub fn column_drift(reports: &[&DiagnosisReport], frozen: &HeadSet) -> Result<Vec<ColumnTrend>> {
    if reports.len() < 2 {
        return Err(DiagnosticsError::TooFewCheckpoints {
            got: reports.len(),
            min: 2,
        });
    }
    let stock = reports[0];
    for post in &reports[1..] {
        stock.ensure_compatible(post)?;
    }
    let mut out = Vec::new();
    for col in 0..stock.n_heads() {
        let members: Vec<HeadCoord> = frozen.iter().copied().filter(|&(_, h)| h == col).collect();
        if members.is_empty() {
            continue;
        }
        let means: Vec<f32> = reports[1..]
            .iter()
            .map(|post| {
                let mut acc = 0.0f64;
                for &(l, h) in &members {
                    acc += (post.cell(l, h).bos - stock.cell(l, h).bos).abs() as f64;
                }
                (acc / members.len() as f64) as f32
            })
            .collect();
        let first = means[0] as f64;
        let last = *means.last().unwrap() as f64;
        let trend = if last > SPREAD_RATIO * first {
            Trend::Spreading
        } else {
            Trend::Stable
        };
        out.push(ColumnTrend {
            column: col,
            frozen_heads: members.len(),
            means,
            trend,
        });
    }
    Ok(out)
}

// ── Rank statistics ──────────────────────────────────────────────────

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Spearman correlation between head index and that column's mean BOS
/// mass over layers: the slope-ordering statistic of collapse induction.
pub fn head_index_bos_correlation(report: &DiagnosisReport) -> f64 {
    let h = report.n_heads();
    let mean_bos: Vec<f64> = (0..h)
        .map(|col| {
            report
                .grid
                .iter()
                .map(|row| row[col].bos as f64)
                .sum::<f64>()
                / report.n_layers() as f64
        })
        .collect();
    let idx: Vec<f64> = (0..h).map(|i| i as f64).collect();
    spearman(&idx, &mean_bos)
}
