//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A [`Tape`] records every forward operation in creation order; since an
//! op can only consume previously created values, creation order is a
//! topological order and [`Tape::backward`] visits nodes exactly once in
//! reverse, accumulating gradients additively across fan-out.
//!
//! Matrix products increment a multiply-add counter, which is the
//! measurement side of the analytic cost model (softmax, normalization and
//! activations are excluded from that accounting by contract).

use std::collections::BTreeMap;

use crate::kernels;
use crate::tensor::{Error, Result, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    Silu { a: Var },
    RmsNorm { a: Var, gain: Var, inv_rms: Vec<f32> },
    SoftmaxRows { a: Var },
    CausalSoftmax { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ScaleRows { a: Var, s: Var },
    RowSelect { parts: Vec<Var>, pick: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    NegLogSigmoid { a: Var },
    Nll { logits: Var, targets: Vec<usize>, mask: Vec<bool>, mean: bool },
    LogprobSum { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    OnehotSqdist { probs: Var, labels: Vec<usize>, mask: Vec<bool>, mean: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.g[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Multiply-add count of all matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable leaf under a stable name for
    /// [`Tape::param_grads`] collection.
    pub fn named_param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, rg))
    }

    /// `a @ b^T` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNt { a, b }, rg))
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_elementwise(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_elementwise(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_elementwise(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| kernels::silu(x)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Silu { a }, rg)
    }

    /// Row-wise RMS normalization with a learned gain over the last axis.
    pub fn rmsnorm(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (ta, tg) = (self.value(a), self.value(gain));
        let d = ta.cols();
        if tg.numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "rmsnorm gain {:?} vs cols {}",
                tg.shape(),
                d
            )));
        }
        let rows = ta.numel() / d;
        let mut out = vec![0.0f32; ta.numel()];
        let mut inv_rms = vec![0.0f32; rows];
        for i in 0..rows {
            inv_rms[i] = kernels::rmsnorm_row(
                &ta.data()[i * d..(i + 1) * d],
                tg.data(),
                &mut out[i * d..(i + 1) * d],
            );
        }
        let rg = self.rg(a) || self.rg(gain);
        Ok(self.push(
            Tensor::new(ta.shape().to_vec(), out)?,
            Op::RmsNorm { a, gain, inv_rms },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            kernels::softmax_row(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows { a }, rg)
    }

    /// Softmax over a square score matrix where row `i` may only attend to
    /// columns `0..=i`; masked entries come out as exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.rows();
        if ta.cols() != n {
            return Err(Error::ShapeMismatch(format!(
                "causal_softmax wants square, got {:?}",
                ta.shape()
            )));
        }
        let mut out = vec![0.0f32; n * n];
        for i in 0..n {
            out[i * n..i * n + i + 1].copy_from_slice(&ta.data()[i * n..i * n + i + 1]);
            kernels::softmax_row(&mut out[i * n..i * n + i + 1]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, n], out)?, Op::CausalSoftmax { a }, rg))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range {v}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}+{len} > {c}"
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Multiply row `i` of `a` by scalar `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let r = ta.rows();
        if ts.numel() != r {
            return Err(Error::ShapeMismatch(format!(
                "scale_rows {:?} by {:?}",
                ta.shape(),
                ts.shape()
            )));
        }
        let d = ta.cols();
        let mut out = Vec::with_capacity(r * d);
        for i in 0..r {
            let w = ts.data()[i];
            out.extend(ta.row(i).iter().map(|&x| x * w));
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::new(ta.shape().to_vec(), out)?, Op::ScaleRows { a, s }, rg))
    }

    /// Per-row selection among same-shaped alternatives:
    /// `out[i] = parts[pick[i]][i]`.
    pub fn row_select(&mut self, parts: &[Var], pick: &[usize]) -> Result<Var> {
        let shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(Error::ShapeMismatch("row_select shape mismatch".into()));
            }
        }
        let r = shape[0];
        if pick.len() != r || pick.iter().any(|&e| e >= parts.len()) {
            return Err(Error::InvalidArgument("row_select pick out of range".into()));
        }
        let d: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(r * d);
        for (i, &e) in pick.iter().enumerate() {
            out.extend_from_slice(self.value(parts[e]).row(i));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RowSelect {
                parts: parts.to_vec(),
                pick: pick.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean { a }, rg)
    }

    /// `-log(sigmoid(x))` elementwise.
    pub fn neg_logsigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| kernels::softplus_neg(x)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::NegLogSigmoid { a }, rg)
    }

    fn check_targets(&self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<()> {
        let tl = self.value(logits);
        let (r, v) = (tl.rows(), tl.cols());
        if targets.len() != r || mask.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "targets/mask length {} vs {} rows",
                targets.len(),
                r
            )));
        }
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= v {
                return Err(Error::InvalidArgument(format!(
                    "target {t} at row {i} out of vocabulary {v}"
                )));
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("all positions masked".into()));
        }
        Ok(())
    }

    fn nll(&mut self, logits: Var, targets: &[usize], mask: &[bool], mean: bool) -> Result<Var> {
        self.check_targets(logits, targets, mask)?;
        let tl = self.value(logits);
        let v = tl.cols();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                total -= kernels::log_softmax_at(&tl.data()[i * v..(i + 1) * v], t);
                count += 1;
            }
        }
        let out = if mean { total / count as f64 } else { total };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(out as f32),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                mean,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.nll(logits, targets, mask, true)
    }

    /// Summed negative log-likelihood over unmasked rows (no averaging);
    /// used when a batch is normalized by its total token count.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.nll(logits, targets, mask, false)
    }

    /// Teacher-forced sequence log-probability: sum over unmasked rows of
    /// `log softmax(logits[i])[targets[i]]`. No length normalization.
    pub fn logprob_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check_targets(logits, targets, mask)?;
        let tl = self.value(logits);
        let v = tl.cols();
        let mut total = 0.0f64;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                total += kernels::log_softmax_at(&tl.data()[i * v..(i + 1) * v], t);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::LogprobSum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    fn onehot_sqdist_impl(
        &mut self,
        probs: Var,
        labels: &[usize],
        mask: &[bool],
        mean: bool,
    ) -> Result<Var> {
        self.check_targets(probs, labels, mask)?;
        let tp = self.value(probs);
        let e = tp.cols();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, (&lab, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                for (j, &p) in tp.data()[i * e..(i + 1) * e].iter().enumerate() {
                    let y = if j == lab { 1.0 } else { 0.0 };
                    total += (p as f64 - y) * (p as f64 - y);
                }
                count += 1;
            }
        }
        let out = if mean { total / count as f64 } else { total };
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(out as f32),
            Op::OnehotSqdist {
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                mean,
            },
            rg,
        ))
    }

    /// Mean over unmasked rows of the squared distance between a
    /// probability row and the one-hot label row.
    pub fn onehot_sqdist(&mut self, probs: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        self.onehot_sqdist_impl(probs, labels, mask, true)
    }

    /// Summed (unaveraged) variant of [`Tape::onehot_sqdist`].
    pub fn onehot_sqdist_sum(&mut self, probs: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        self.onehot_sqdist_impl(probs, labels, mask, false)
    }

    /// Reverse pass from a scalar loss. Every recorded node is visited
    /// exactly once, in reverse creation (= reverse topological) order.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {}",
                self.value(loss).item()
            )));
        }
        let mut g: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if g[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let dout = g[idx].take().unwrap();
            self.backprop_node(idx, &dout, &mut g);
            g[idx] = Some(dout);
        }
        Ok(Grads { g })
    }

    fn accum(&self, g: &mut [Option<Vec<f32>>], v: Var, contrib: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut g[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, dout: &[f32], g: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accum(g, *a, |ga| {
                    let da = kernels::matmul_nt(dout, tb.data(), m, n, k);
                    for (x, y) in ga.iter_mut().zip(&da) {
                        *x += y;
                    }
                });
                self.accum(g, *b, |gb| {
                    let db = kernels::matmul_tn(ta.data(), dout, m, k, n);
                    for (x, y) in gb.iter_mut().zip(&db) {
                        *x += y;
                    }
                });
            }
            Op::MatmulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                self.accum(g, *a, |ga| {
                    let da = kernels::matmul(dout, tb.data(), m, n, k);
                    for (x, y) in ga.iter_mut().zip(&da) {
                        *x += y;
                    }
                });
                self.accum(g, *b, |gb| {
                    let db = kernels::matmul_tn(dout, ta.data(), m, n, k);
                    for (x, y) in gb.iter_mut().zip(&db) {
                        *x += y;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(g, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(dout) {
                        *x += y;
                    }
                });
                self.accum(g, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(dout) {
                        *x += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(g, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(dout) {
                        *x += y;
                    }
                });
                self.accum(g, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(dout) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(g, *a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(dout).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                self.accum(g, *b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(dout).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(g, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(dout) {
                        *x += y * c;
                    }
                });
            }
            Op::Silu { a } => {
                let ta = self.value(*a);
                self.accum(g, *a, |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(dout).zip(ta.data()) {
                        let s = kernels::sigmoid(v);
                        *x += y * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { a, gain, inv_rms } => {
                let (ta, tg) = (self.value(*a), self.value(*gain));
                let d = ta.cols();
                let rows = ta.numel() / d;
                self.accum(g, *a, |ga| {
                    for i in 0..rows {
                        let x = &ta.data()[i * d..(i + 1) * d];
                        let dy = &dout[i * d..(i + 1) * d];
                        let r = inv_rms[i];
                        // u = dy * gain; dx = r*u - r^3/d * x * <u, x>
                        let mut dotux = 0.0f32;
                        for j in 0..d {
                            dotux += dy[j] * tg.data()[j] * x[j];
                        }
                        let coef = r * r * r / d as f32 * dotux;
                        let gx = &mut ga[i * d..(i + 1) * d];
                        for j in 0..d {
                            gx[j] += r * dy[j] * tg.data()[j] - coef * x[j];
                        }
                    }
                });
                self.accum(g, *gain, |gg| {
                    for i in 0..rows {
                        let x = &ta.data()[i * d..(i + 1) * d];
                        let dy = &dout[i * d..(i + 1) * d];
                        let r = inv_rms[i];
                        for j in 0..d {
                            gg[j] += dy[j] * x[j] * r;
                        }
                    }
                });
            }
            Op::SoftmaxRows { a } | Op::CausalSoftmax { a } => {
                // saved output p; dx = p * (dy - <dy, p>) per row.
                // masked entries of a causal softmax have p = 0, so the same
                // formula zeroes their contribution.
                let tp = &self.nodes[idx].value;
                let d = tp.cols();
                let rows = tp.numel() / d;
                self.accum(g, *a, |ga| {
                    for i in 0..rows {
                        let p = &tp.data()[i * d..(i + 1) * d];
                        let dy = &dout[i * d..(i + 1) * d];
                        let dotpy: f32 = p.iter().zip(dy).map(|(x, y)| x * y).sum();
                        let gx = &mut ga[i * d..(i + 1) * d];
                        for j in 0..d {
                            gx[j] += p[j] * (dy[j] - dotpy);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.accum(g, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &dout[i * d..(i + 1) * d];
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let len = self.nodes[idx].value.cols();
                self.accum(g, *a, |ga| {
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += dout[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accum(g, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += dout[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ScaleRows { a, s } => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let (r, d) = (ta.rows(), ta.cols());
                self.accum(g, *a, |ga| {
                    for i in 0..r {
                        let w = ts.data()[i];
                        for j in 0..d {
                            ga[i * d + j] += dout[i * d + j] * w;
                        }
                    }
                });
                self.accum(g, *s, |gs| {
                    for i in 0..r {
                        let mut acc = 0.0f32;
                        for j in 0..d {
                            acc += dout[i * d + j] * ta.data()[i * d + j];
                        }
                        gs[i] += acc;
                    }
                });
            }
            Op::RowSelect { parts, pick } => {
                let d: usize = self.nodes[idx].value.shape()[1..].iter().product();
                for (e, &p) in parts.iter().enumerate() {
                    self.accum(g, p, |gp| {
                        for (i, &sel) in pick.iter().enumerate() {
                            if sel == e {
                                for j in 0..d {
                                    gp[i * d + j] += dout[i * d + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum { a } => {
                self.accum(g, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += dout[0];
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f32;
                self.accum(g, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += dout[0] / n;
                    }
                });
            }
            Op::NegLogSigmoid { a } => {
                let ta = self.value(*a);
                self.accum(g, *a, |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(dout).zip(ta.data()) {
                        *x += y * (kernels::sigmoid(v) - 1.0);
                    }
                });
            }
            Op::Nll { logits, targets, mask, mean } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let count = mask.iter().filter(|&&m| m).count() as f32;
                let norm = if *mean { 1.0 / count } else { 1.0 };
                self.accum(g, *logits, |gl| {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let mut p = tl.data()[i * v..(i + 1) * v].to_vec();
                        kernels::softmax_row(&mut p);
                        let gx = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gx[j] += dout[0] * norm * (p[j] - y);
                        }
                    }
                });
            }
            Op::LogprobSum { logits, targets, mask } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                self.accum(g, *logits, |gl| {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let mut p = tl.data()[i * v..(i + 1) * v].to_vec();
                        kernels::softmax_row(&mut p);
                        let gx = &mut gl[i * v..(i + 1) * v];
                        for j in 0..v {
                            let y = if j == t { 1.0 } else { 0.0 };
                            gx[j] += dout[0] * (y - p[j]);
                        }
                    }
                });
            }
            Op::OnehotSqdist { probs, labels, mask, mean } => {
                let tp = self.value(*probs);
                let e = tp.cols();
                let count = mask.iter().filter(|&&m| m).count() as f32;
                let norm = if *mean { 1.0 / count } else { 1.0 };
                self.accum(g, *probs, |gp| {
                    for (i, (&lab, &m)) in labels.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let gx = &mut gp[i * e..(i + 1) * e];
                        for j in 0..e {
                            let y = if j == lab { 1.0 } else { 0.0 };
                            gx[j] += dout[0] * norm * 2.0 * (tp.data()[i * e + j] - y);
                        }
                    }
                });
            }
        }
    }

    /// Collect gradients of all named parameters that received any.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            if let Some(gv) = grads.wrt(*var) {
                let t = Tensor::new(self.value(*var).shape().to_vec(), gv.to_vec())
                    .expect("grad shape matches value");
                out.insert(name.clone(), t);
            }
        }
        out
    }
}
