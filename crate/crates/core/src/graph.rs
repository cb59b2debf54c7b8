//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and backward is a single reverse sweep. `backward` only reads the
//! graph: calling it twice recomputes the same gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{
    self, matmul, matmul_nt, matmul_tn, normalize_rows, std_normal_cdf, std_normal_pdf, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor<F>,
        rstd: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MaxRows {
        x: Var,
        arg: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        smoothing: F,
        probs: Tensor<F>,
    },
    BinaryEntropy {
        scores: Var,
        eps: F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`]; present only for nodes that
/// require a gradient and are reachable from the loss.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check<F: Real>(op: &'static str, t: Tensor<F>) -> Result<Tensor<F>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn leaf(&mut self, t: Tensor<F>, trainable: bool) -> Var {
        self.push(Op::Leaf, t, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = check("matmul", matmul(self.value(a), self.value(b))?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = check("add", self.value(a).add(self.value(b))?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Adds vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = check("add_row", self.value(x).add_row(self.value(b))?)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::AddRow(x, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = check("mul", self.value(a).zip_map(self.value(b), |x, y| x * y)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = check("scale", self.value(x).scale(c))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Scale(x, c), out, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = check("gelu", tensor::gelu(self.value(x)))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Gelu(x), out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = check("relu", tensor::relu(self.value(x)))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Relu(x), out, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = check("sigmoid", tensor::sigmoid(self.value(x)))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sigmoid(x), out, rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = check("log", self.value(x).map(F::ln))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Log(x), out, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let axis = t.shape().len().saturating_sub(1);
        let out = check("softmax", tensor::softmax(t, axis)?)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SoftmaxRows(x), out, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.numel() != c || bt.numel() != c {
            return Err(shape_err("layer_norm", xt.shape(), gt.shape()));
        }
        let (normed, rstd) = normalize_rows(xt, eps);
        let mut out = normed.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gt.data()).zip(bt.data()) {
                *v = *v * g + b;
            }
        }
        let out = check("layer_norm", out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            out,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", &[rows], t.shape()));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Range {
                what: "column slice end",
                value: start + len,
                limit: t.cols(),
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), out, rg))
    }

    /// Column-wise max over rows, giving a `1×cols` row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.max_groups(x, rows)
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `(n·group)×c → n×c`. Ties go to the earliest row.
    pub fn max_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if group == 0 || r == 0 || r % group != 0 {
            return Err(Error::Contract(alloc::format!(
                "cannot max-pool {r} rows in groups of {group}"
            )));
        }
        let n = r / group;
        let mut out = Vec::with_capacity(n * c);
        let mut arg = Vec::with_capacity(n * c);
        for s in 0..n {
            let block = Tensor::new(&[group, c], t.data()[s * group * c..(s + 1) * group * c].to_vec())?;
            let (m, a) = tensor::max_over_rows(&block);
            out.extend_from_slice(m.data());
            arg.extend(a.into_iter().map(|i| s * group + i));
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxRows { x, arg }, out, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = check("sum", Tensor::scalar(self.value(x).sum()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sum(x), out, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let n = F::from_usize(t.numel()).unwrap();
        let out = check("mean", Tensor::scalar(t.sum() / n))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Mean(x), out, rg))
    }

    /// Mean cross-entropy of `logits: B×C` against class labels, with
    /// uniform label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: F) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b {
            return Err(shape_err("cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(alloc::format!(
                "label {bad} outside [0, {c})"
            )));
        }
        let probs = tensor::softmax(t, t.shape().len() - 1)?;
        let cf = F::from_usize(c).unwrap();
        let mut total = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for (j, &v) in row.iter().enumerate() {
                let mut q = smoothing / cf;
                if j == label {
                    q += F::one() - smoothing;
                }
                total += q * (lse - v);
            }
        }
        let out = check(
            "cross_entropy",
            Tensor::scalar(total / F::from_usize(b).unwrap()),
        )?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            out,
            rg,
        ))
    }

    /// `−mean(s·ln(s+ε) + (1−s)·ln(1−s+ε))` over every element of `scores`.
    pub fn binary_entropy(&mut self, scores: Var, eps: F) -> Result<Var> {
        let t = self.value(scores);
        if t.numel() == 0 {
            return Err(Error::Contract("entropy of an empty score set".into()));
        }
        let n = F::from_usize(t.numel()).unwrap();
        let total: F = t
            .data()
            .iter()
            .map(|&s| s * (s + eps).ln() + (F::one() - s) * (F::one() - s + eps).ln())
            .sum();
        let out = check("binary_entropy", Tensor::scalar(-total / n))?;
        let rg = self.rg(&[scores]);
        Ok(self.push(Op::BinaryEntropy { scores, eps }, out, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op<F>,
        out: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if rg(a) {
                    let da = matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if rg(b) {
                    let db = matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if rg(b) {
                    let c = g.cols();
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if rg(b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    gv * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(out, |gv, s| gv * s * (F::one() - s))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Log(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv / xv)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = Tensor::zeros(out.shape());
                for ((drow, yrow), grow) in d
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: F = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    for ((dv, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let c = normed.cols();
                let gam = self.value(*gamma).data();
                if rg(gamma) || rg(beta) {
                    let mut dg = Tensor::zeros(self.value(*gamma).shape());
                    let mut db = Tensor::zeros(self.value(*beta).shape());
                    for (nrow, grow) in normed.data().chunks(c).zip(g.data().chunks(c)) {
                        for j in 0..c {
                            dg.data_mut()[j] += grow[j] * nrow[j];
                            db.data_mut()[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg)?;
                    self.accumulate(grads, *beta, db)?;
                }
                if rg(x) {
                    let n = F::from_usize(c).unwrap();
                    let mut dx = Tensor::zeros(normed.shape());
                    for (i, ((dxrow, nrow), grow)) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(normed.data().chunks(c))
                        .zip(g.data().chunks(c))
                        .enumerate()
                    {
                        let mut sum_dn = F::zero();
                        let mut sum_dn_n = F::zero();
                        for j in 0..c {
                            let dn = grow[j] * gam[j];
                            sum_dn += dn;
                            sum_dn_n += dn * nrow[j];
                        }
                        for j in 0..c {
                            let dn = grow[j] * gam[j];
                            dxrow[j] = rstd[i] * (dn - sum_dn / n - nrow[j] * sum_dn_n / n);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let t = self.value(*p);
                    let len = t.rows() * c;
                    if rg(p) {
                        let piece =
                            Tensor::new(t.shape(), g.data()[offset..offset + len].to_vec())?;
                        self.accumulate(grads, *p, piece)?;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.cols();
                    if rg(p) {
                        let mut data = Vec::with_capacity(t.numel());
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(t.shape(), data)?)?;
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(*x);
                let w = g.cols();
                let mut d = Tensor::zeros(xt.shape());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::MaxRows { x, arg } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let c = g.cols();
                for (o, &i) in arg.iter().enumerate() {
                    d.data_mut()[i * c + o % c] += g.data()[o];
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::GatherRows { x, idx } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, d)?;
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let n = F::from_usize(t.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.item() / n))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                let (b, c) = (probs.rows(), probs.cols());
                let scale = g.item() / F::from_usize(b).unwrap();
                let cf = F::from_usize(c).unwrap();
                let mut d = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        let mut q = *smoothing / cf;
                        if j == label {
                            q += F::one() - *smoothing;
                        }
                        *v = (*v - q) * scale;
                    }
                }
                self.accumulate(grads, *logits, d)?;
            }
            Op::BinaryEntropy { scores, eps } => {
                let t = self.value(*scores);
                let n = F::from_usize(t.numel()).unwrap();
                let scale = -g.item() / n;
                let one = F::one();
                let d = t.map(|s| {
                    let a = (s + *eps).ln() + s / (s + *eps);
                    let b = (one - s + *eps).ln() + (one - s) / (one - s + *eps);
                    scale * (a - b)
                });
                self.accumulate(grads, *scores, d)?;
            }
        }
        Ok(())
    }
}

/// Composite helper: `x·W + b` with an optional bias.
pub fn affine<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}
