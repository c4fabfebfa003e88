//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Operations execute eagerly and append a record; `backward` replays the
//! records in exact reverse execution order, accumulating vector-Jacobian
//! products into per-node gradient slots. A tape is single-use: backward
//! consumes it, and a second call is an error.

use super::kernels;
use super::tensor::{gelu_grad_from_cdf, gelu_with_cdf, Tensor};
use super::{NumericsError, Result};

/// Move a node's accumulated gradient out of its slot. Safe because ops
/// run backward in reverse execution order: by the time the producing op
/// is visited, every consumer has already added its contribution, and
/// nothing reads the slot afterward (leaves are never produced by an op,
/// so their slots survive for the caller).
fn take_grad(slots: &mut [Option<Tensor>], out: NodeId) -> Option<Tensor> {
    slots[out.0].take()
}

/// Index of a value node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// out = a @ b
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    /// out = a @ b^T
    MatmulBt { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    /// Broadcast bias over rows: out[i] = x[i] + bias
    AddRowBias { x: NodeId, bias: NodeId, out: NodeId },
    Scale { x: NodeId, c: f32, out: NodeId },
    /// Row softmax of (logits + constant additive bias). The bias is data,
    /// not a node; gradient flows only to the logits.
    SoftmaxRows { logits: NodeId, out: NodeId },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        out: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gelu {
        x: NodeId,
        out: NodeId,
        /// Saved standard-normal CDF values so backward needs one exp
        /// per element instead of re-evaluating erf.
        cdf: Vec<f32>,
    },
    EmbeddingLookup { table: NodeId, ids: Vec<usize>, out: NodeId },
    Transpose { x: NodeId, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
    /// Column slice [start, start+len) of a rank-2 tensor (split_heads).
    SliceCols { x: NodeId, start: usize, len: usize, out: NodeId },
    /// Column-wise concatenation of rank-2 tensors (concat_heads).
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize>, out: NodeId },
    /// Mean negative log-likelihood over rows, in nats.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor, out: NodeId },
    Sum { x: NodeId, out: NodeId },
    /// Scalar dot with constant weights (test plumbing for scalar losses).
    WeightedSum { x: NodeId, weights: Tensor, out: NodeId },
}

pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    consumed: bool,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots[id.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    fn push(&mut self, value: Tensor, op: impl FnOnce(NodeId) -> Op) -> NodeId {
        let id = NodeId(self.vals.len());
        self.vals.push(value);
        let record = op(id);
        self.ops.push(record);
        id
    }

    /// Register an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, |_| Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.vals[a.0].matmul(&self.vals[b.0])?;
        Ok(self.push(out, |id| Op::Matmul { a, b, out: id }))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.vals[a.0].dims2()?;
        let (n, k2) = self.vals[b.0].dims2()?;
        if k != k2 {
            return Err(NumericsError::InnerDimMismatch { lhs_k: k, rhs_k: k2 });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_bt(
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, |id| Op::MatmulBt { a, b, out: id }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.vals[a.0].add(&self.vals[b.0])?;
        Ok(self.push(out, |id| Op::Add { a, b, out: id }))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.vals[x.0].dims2()?;
        if self.vals[bias.0].shape() != [n] {
            return Err(NumericsError::ShapeMismatch {
                context: "add_row_bias",
                lhs: vec![m, n],
                rhs: self.vals[bias.0].shape().to_vec(),
            });
        }
        let mut out = self.vals[x.0].clone();
        let bdata: Vec<f32> = self.vals[bias.0].data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bdata) {
                *o += b;
            }
        }
        Ok(self.push(out, |id| Op::AddRowBias { x, bias, out: id }))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.vals[x.0].scale(c);
        self.push(out, |id| Op::Scale { x, c, out: id })
    }

    /// Row-wise softmax of `logits + additive_bias`.
    ///
    /// The bias may contain -inf (causal masking); those entries come out
    /// exactly 0. A row with no finite entry is an error.
    pub fn softmax_rows(&mut self, logits: NodeId, additive_bias: &Tensor) -> Result<NodeId> {
        let (rows, cols) = self.vals[logits.0].dims2()?;
        self.vals[logits.0].ensure_same_shape(additive_bias, "softmax_rows")?;
        let mut out = Tensor::zeros(&[rows, cols]);
        let src = self.vals[logits.0].data();
        let bias = additive_bias.data();
        for r in 0..rows {
            let lrow = &src[r * cols..(r + 1) * cols];
            let brow = &bias[r * cols..(r + 1) * cols];
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_row(lrow, brow, orow).map_err(|_| NumericsError::AllMaskedRow { row: r })?;
        }
        Ok(self.push(out, |id| Op::SoftmaxRows { logits, out: id }))
    }

    /// Layer normalization over the last dimension, then gain/shift.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f32) -> Result<NodeId> {
        let shape = self.vals[x.0].shape().to_vec();
        let d = *shape.last().ok_or(NumericsError::RankMismatch {
            context: "layernorm",
            expected: 1,
            got: shape.clone(),
        })?;
        if self.vals[gain.0].shape() != [d] || self.vals[shift.0].shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                context: "layernorm",
                lhs: vec![d],
                rhs: self.vals[gain.0].shape().to_vec(),
            });
        }
        let rows = self.vals[x.0].numel() / d;
        let src = self.vals[x.0].data();
        let g = self.vals[gain.0].data().to_vec();
        let s = self.vals[shift.0].data().to_vec();

        let mut xhat = vec![0.0f32; rows * d];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = 0.0f64;
            for &v in row {
                mean += v as f64;
            }
            mean /= d as f64;
            let mut var = 0.0f64;
            for &v in row {
                let c = v as f64 - mean;
                var += c * c;
            }
            var /= d as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = istd as f32;
            for j in 0..d {
                let xh = ((row[j] as f64 - mean) * istd) as f32;
                xhat[r * d + j] = xh;
                out.data_mut()[r * d + j] = g[j] * xh + s[j];
            }
        }
        Ok(self.push(out, |id| Op::LayerNorm {
            x,
            gain,
            shift,
            out: id,
            xhat,
            inv_std,
        }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let n = self.vals[x.0].numel();
        let mut data = Vec::with_capacity(n);
        let mut cdf = Vec::with_capacity(n);
        for &v in self.vals[x.0].data() {
            let (y, c) = gelu_with_cdf(v);
            data.push(y);
            cdf.push(c);
        }
        let out = Tensor::from_vec(self.vals[x.0].shape(), data);
        self.push(out, |id| Op::Gelu { x, out: id, cdf })
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.vals[table.0].dims2()?;
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::TargetOutOfRange { index: id, vocab });
            }
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        let src = self.vals[table.0].data();
        for (t, &id) in ids.iter().enumerate() {
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(self.push(out, |id| Op::EmbeddingLookup { table, ids, out: id }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.vals[x.0].transpose2()?;
        Ok(self.push(out, |id| Op::Transpose { x, out: id }))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let from = self.vals[x.0].numel();
        let to: usize = new_shape.iter().product();
        if from != to {
            return Err(NumericsError::NumelMismatch { from, to });
        }
        let out = Tensor::from_vec(new_shape, self.vals[x.0].data().to_vec());
        Ok(self.push(out, |id| Op::Reshape { x, out: id }))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.vals[x.0].dims2()?;
        if start + len > cols {
            return Err(NumericsError::SliceOutOfBounds {
                start,
                end: start + len,
                width: cols,
            });
        }
        let mut out = Tensor::zeros(&[rows, len]);
        let src = self.vals[x.0].data();
        for r in 0..rows {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(out, |id| Op::SliceCols { x, start, len, out: id }))
    }

    /// Concatenate rank-2 tensors along columns. All parts must share a
    /// row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (rows, _) = self.vals[parts[0].0].dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.vals[p.0].dims2()?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    context: "concat_cols",
                    lhs: self.vals[parts[0].0].shape().to_vec(),
                    rhs: self.vals[p.0].shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.vals[p.0].data();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let parts = parts.to_vec();
        Ok(self.push(out, |id| Op::ConcatCols { parts, widths, out: id }))
    }

    /// Mean negative log-likelihood in nats over N rows of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, vocab) = self.vals[logits.0].dims2()?;
        if targets.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                context: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= vocab {
                return Err(NumericsError::TargetOutOfRange { index: t, vocab });
            }
        }
        let src = self.vals[logits.0].data();
        let mut probs = Tensor::zeros(&[rows, vocab]);
        let mut total = 0.0f64;
        for (r, &target) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            for &v in row {
                denom += (v as f64 - max).exp();
            }
            let lse = max + denom.ln();
            total += lse - row[target] as f64;
            let prow = &mut probs.data_mut()[r * vocab..(r + 1) * vocab];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v as f64 - lse).exp() as f32;
            }
        }
        let loss = (total / rows as f64) as f32;
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite {
                context: "cross_entropy",
            });
        }
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(loss), |id| Op::CrossEntropy {
            logits,
            targets,
            probs,
            out: id,
        }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.vals[x.0].data() {
            acc += v as f64;
        }
        self.push(Tensor::scalar(acc as f32), |id| Op::Sum { x, out: id })
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        self.vals[x.0].ensure_same_shape(weights, "weighted_sum")?;
        let mut acc = 0.0f64;
        for (&v, &w) in self.vals[x.0].data().iter().zip(weights.data()) {
            acc += v as f64 * w as f64;
        }
        let weights = weights.clone();
        Ok(self.push(Tensor::scalar(acc as f32), |id| Op::WeightedSum {
            x,
            weights,
            out: id,
        }))
    }

    /// Backward from a scalar loss with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward with a scaled seed (used for mean-reduction across
    /// accumulation windows).
    pub fn backward_scaled(&mut self, loss: NodeId, seed: f32) -> Result<Gradients> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        self.consumed = true;
        assert_eq!(
            self.vals[loss.0].numel(),
            1,
            "backward requires a scalar loss node"
        );

        let mut slots: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        slots[loss.0] = Some(Tensor::from_vec(
            self.vals[loss.0].shape(),
            vec![seed],
        ));

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(slots: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f32]) {
        match &mut slots[id.0] {
            Some(existing) => {
                for (e, &d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => {
                slots[id.0] = Some(Tensor::from_vec(shape, delta.to_vec()));
            }
        }
    }

    fn backward_op(&self, idx: usize, slots: &mut [Option<Tensor>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul { a, b, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let (m, k) = self.vals[a.0].dims2().unwrap();
                let n = self.vals[b.0].shape()[1];
                let mut d_a = vec![0.0f32; m * k];
                kernels::matmul_bt(d_out.data(), self.vals[b.0].data(), &mut d_a, m, n, k);
                Self::accumulate(slots, *a, &[m, k], &d_a);
                let mut d_b = vec![0.0f32; k * n];
                kernels::matmul_at_b(self.vals[a.0].data(), d_out.data(), &mut d_b, m, k, n);
                Self::accumulate(slots, *b, &[k, n], &d_b);
            }
            Op::MatmulBt { a, b, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let (m, k) = self.vals[a.0].dims2().unwrap();
                let n = self.vals[b.0].shape()[0];
                // d_a = d_out @ b ; d_b = d_out^T @ a
                let mut d_a = vec![0.0f32; m * k];
                kernels::matmul(d_out.data(), self.vals[b.0].data(), &mut d_a, m, n, k);
                Self::accumulate(slots, *a, &[m, k], &d_a);
                let mut d_b = vec![0.0f32; n * k];
                kernels::matmul_at_b(d_out.data(), self.vals[a.0].data(), &mut d_b, m, n, k);
                Self::accumulate(slots, *b, &[n, k], &d_b);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                Self::accumulate(slots, *a, d_out.shape(), d_out.data());
                Self::accumulate(slots, *b, d_out.shape(), d_out.data());
            }
            Op::AddRowBias { x, bias, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let (_, n) = d_out.dims2().unwrap();
                Self::accumulate(slots, *x, d_out.shape(), d_out.data());
                let mut d_bias = vec![0.0f32; n];
                for row in d_out.data().chunks_exact(n) {
                    for (db, &d) in d_bias.iter_mut().zip(row) {
                        *db += d;
                    }
                }
                Self::accumulate(slots, *bias, &[n], &d_bias);
            }
            Op::Scale { x, c, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let scaled: Vec<f32> = d_out.data().iter().map(|&v| v * c).collect();
                Self::accumulate(slots, *x, d_out.shape(), &scaled);
            }
            Op::SoftmaxRows { logits, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let probs = &self.vals[out.0];
                let (rows, cols) = probs.dims2().unwrap();
                let mut d_logits = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let p = &probs.data()[r * cols..(r + 1) * cols];
                    let d = &d_out.data()[r * cols..(r + 1) * cols];
                    let mut dot = 0.0f64;
                    for (&pv, &dv) in p.iter().zip(d) {
                        dot += pv as f64 * dv as f64;
                    }
                    let drow = &mut d_logits[r * cols..(r + 1) * cols];
                    for ((dl, &pv), &dv) in drow.iter_mut().zip(p).zip(d) {
                        *dl = pv * (dv - dot as f32);
                    }
                }
                Self::accumulate(slots, *logits, &[rows, cols], &d_logits);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                out,
                xhat,
                inv_std,
            } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let d = self.vals[gain.0].numel();
                let rows = d_out.numel() / d;
                let g = self.vals[gain.0].data();

                let mut d_gain = vec![0.0f32; d];
                let mut d_shift = vec![0.0f32; d];
                let mut d_x = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let dy = &d_out.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        d_gain[j] += dy[j] * xh[j];
                        d_shift[j] += dy[j];
                        let dxh = (dy[j] * g[j]) as f64;
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j] as f64;
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let istd = inv_std[r] as f64;
                    let dxr = &mut d_x[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = (dy[j] * g[j]) as f64;
                        dxr[j] = (istd * (dxh - mean_dxhat - xh[j] as f64 * mean_dxhat_xhat)) as f32;
                    }
                }
                Self::accumulate(slots, *x, self.vals[x.0].shape(), &d_x);
                Self::accumulate(slots, *gain, &[d], &d_gain);
                Self::accumulate(slots, *shift, &[d], &d_shift);
            }
            Op::Gelu { x, out, cdf } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let src = self.vals[x.0].data();
                let d: Vec<f32> = src
                    .iter()
                    .zip(d_out.data())
                    .zip(cdf)
                    .map(|((&v, &dv), &c)| gelu_grad_from_cdf(v, c) * dv)
                    .collect();
                Self::accumulate(slots, *x, self.vals[x.0].shape(), &d);
            }
            Op::EmbeddingLookup { table, ids, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let (vocab, d) = self.vals[table.0].dims2().unwrap();
                let mut d_table = vec![0.0f32; vocab * d];
                for (t, &id) in ids.iter().enumerate() {
                    let drow = &d_out.data()[t * d..(t + 1) * d];
                    let trow = &mut d_table[id * d..(id + 1) * d];
                    for (tv, &dv) in trow.iter_mut().zip(drow) {
                        *tv += dv;
                    }
                }
                Self::accumulate(slots, *table, &[vocab, d], &d_table);
            }
            Op::Transpose { x, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let dt = d_out.transpose2().unwrap();
                Self::accumulate(slots, *x, dt.shape(), dt.data());
            }
            Op::Reshape { x, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                Self::accumulate(slots, *x, self.vals[x.0].shape(), d_out.data());
            }
            Op::SliceCols { x, start, len, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let (rows, cols) = self.vals[x.0].dims2().unwrap();
                let mut d_x = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let drow = &d_out.data()[r * len..(r + 1) * len];
                    d_x[r * cols + start..r * cols + start + len].copy_from_slice(drow);
                }
                Self::accumulate(slots, *x, &[rows, cols], &d_x);
            }
            Op::ConcatCols { parts, widths, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let total: usize = widths.iter().sum();
                let rows = d_out.numel() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let mut d_p = vec![0.0f32; rows * w];
                    for r in 0..rows {
                        d_p[r * w..(r + 1) * w]
                            .copy_from_slice(&d_out.data()[r * total + offset..r * total + offset + w]);
                    }
                    Self::accumulate(slots, p, &[rows, w], &d_p);
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                out,
            } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let seed = d_out.item();
                let (rows, vocab) = probs.dims2().unwrap();
                let scale = seed / rows as f32;
                let mut d_logits = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    d_logits[r * vocab + t] -= 1.0;
                }
                for v in &mut d_logits {
                    *v *= scale;
                }
                Self::accumulate(slots, *logits, &[rows, vocab], &d_logits);
            }
            Op::Sum { x, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let seed = d_out.item();
                let d = vec![seed; self.vals[x.0].numel()];
                Self::accumulate(slots, *x, self.vals[x.0].shape(), &d);
            }
            Op::WeightedSum { x, weights, out } => {
                let Some(d_out) = take_grad(slots, *out) else { return };
                let seed = d_out.item();
                let d: Vec<f32> = weights.data().iter().map(|&w| w * seed).collect();
                Self::accumulate(slots, *x, self.vals[x.0].shape(), &d);
            }
        }
    }
}

/// Numerically stable softmax of one row of `logits + bias`.
///
/// Errors when no entry is finite. -inf bias entries produce exactly 0.
fn softmax_row(logits: &[f32], bias: &[f32], out: &mut [f32]) -> std::result::Result<(), ()> {
    let mut max = f32::NEG_INFINITY;
    for (&l, &b) in logits.iter().zip(bias) {
        let v = l + b;
        if v.is_finite() && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(());
    }
    let mut denom = 0.0f64;
    for ((o, &l), &b) in out.iter_mut().zip(logits).zip(bias) {
        let v = l + b;
        let e = if v == f32::NEG_INFINITY {
            0.0
        } else {
            crate::numerics::tensor::fast_exp(v - max)
        };
        *o = e;
        denom += e as f64;
    }
    let inv = (1.0 / denom) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}
