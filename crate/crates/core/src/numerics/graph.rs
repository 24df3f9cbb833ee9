//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order. Calling
//! [`Graph::backward`] replays the tape in reverse, accumulating adjoints
//! into a [`Gradients`] table. Leaves created with [`Graph::param`] borrow
//! their tensor, so building a graph per sample does not copy weights.

use std::borrow::Cow;
use std::sync::Arc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Penalty shape used by [`Graph::huber`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// Quadratic inside `delta`, linear outside.
    #[default]
    Huber,
    /// Zero inside `[target - delta, target + delta]`, squared hinge outside.
    Band,
}

enum Op {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var, scale: f64 },
    MaskedSoftmax { x: Var },
    Gelu { x: Var },
    CrossEntropy { logits: Var, rows: Vec<usize>, targets: Vec<usize>, probs: Vec<f64> },
    RoleMass { heads: Vec<Var>, query: Arc<[usize]>, key: Arc<[usize]>, scale: f64 },
    Penalty { x: Var, target: f64, delta: f64, kind: PenaltyKind },
    WeightedSum { inputs: Vec<Var>, weights: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints indexed by node; `None` where no gradient reached the node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if none reached it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

fn accumulate_with(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf that borrows an existing tensor (weights).
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(tensor), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that owns its tensor.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        t.require_rank2("gather table")?;
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Input(format!("row {id} out of range for table with {} rows", t.rows())));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Leading rows `0..n` of `table`.
    pub fn leading_rows(&mut self, table: Var, n: usize) -> Result<Var> {
        let ids: Vec<usize> = (0..n).collect();
        self.gather(table, &ids)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.require_rank2("layer_norm input")?;
        let (n, d) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != d || b.len() != d {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// `x · w (+ b)` with `x: [n,k]`, `w: [k,m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        xv.require_rank2("linear input")?;
        wv.require_rank2("linear weight")?;
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != k {
            return Err(Error::Shape(format!("linear {:?} x {:?}", xv.shape(), wv.shape())));
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != m {
                return Err(Error::Shape("linear bias width".into()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(xv.data(), wv.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.require_rank2("slice_cols input")?;
        if start + len > xv.cols() || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} of {} columns", start + len, xv.cols())));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![xv.rows(), len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// `a · b` with `a: [n,k]`, `b: [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(av.data(), bv.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `scale · a · bᵀ` with `a: [n,k]`, `b: [m,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::Shape(format!("matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(av.data(), bv.data(), &mut out, n, k, m);
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMulNT { a, b, scale }))
    }

    /// Row softmax restricted to positions where `mask` is true.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let value = softmax_rows(self.value(x), mask)?;
        Ok(self.push(value, Op::MaskedSoftmax { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    /// Mean negative log-likelihood of `targets[r]` under row `r` of
    /// `logits`, over rows with `loss_mask[r]` set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], loss_mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        lv.require_rank2("cross_entropy logits")?;
        if targets.len() != lv.rows() || loss_mask.len() != lv.rows() {
            return Err(Error::Shape("cross_entropy targets/mask length".into()));
        }
        let v = lv.cols();
        let rows: Vec<usize> = (0..lv.rows()).filter(|&r| loss_mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut nll = Vec::with_capacity(rows.len());
        let mut picked = Vec::with_capacity(rows.len());
        for &r in &rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            nll.push(lse - row[t]);
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            picked.push(t);
        }
        let loss = super::deterministic_sum(nll.iter().copied()) / rows.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, rows, targets: picked, probs }))
    }

    /// `scale · Σ_h Σ_{q∈query} Σ_{k∈key} heads[h][q,k]`.
    pub fn role_mass(&mut self, heads: &[Var], query: Arc<[usize]>, key: Arc<[usize]>, scale: f64) -> Var {
        let mut acc = 0.0;
        for &h in heads {
            let a = self.value(h);
            for &q in query.iter() {
                let row = a.row(q);
                for &k in key.iter() {
                    acc += row[k];
                }
            }
        }
        self.push(Tensor::scalar(acc * scale), Op::RoleMass { heads: heads.to_vec(), query, key, scale })
    }

    /// Scalar penalty of `x` around `target` with threshold `delta`.
    pub fn huber(&mut self, x: Var, target: f64, delta: f64, kind: PenaltyKind) -> Var {
        let v = penalty_value(self.value(x).item(), target, delta, kind);
        self.push(Tensor::scalar(v), Op::Penalty { x, target, delta, kind })
    }

    /// `Σ weights[i] · inputs[i]` over scalar nodes.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Var {
        assert_eq!(inputs.len(), weights.len());
        let v = super::deterministic_sum(inputs.iter().zip(weights).map(|(&i, w)| w * self.value(i).item()));
        self.push(Tensor::scalar(v), Op::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec() })
    }

    /// Reverse sweep seeded with `d out / d node = seed` for each scalar node.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for &(v, s) in seeds {
            accumulate(&mut grads[v.0], Tensor::full(self.value(v).shape(), s));
            top = top.max(v.0);
        }
        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                accumulate_with(&mut grads[table.0], tv.shape(), |out| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            out[id * d + c] += gd[r * d + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let dy = gd[r * d + c];
                        let h = xhat[r * d + c];
                        dg[c] += dy * h;
                        db[c] += dy;
                        dxhat[c] = dy * gv[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * h;
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (dxhat[c] - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(vec![n, d], dx).expect("shape"));
                accumulate(&mut grads[gain.0], Tensor::new(self.value(*gain).shape().to_vec(), dg).expect("shape"));
                accumulate(&mut grads[bias.0], Tensor::new(self.value(*bias).shape().to_vec(), db).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                accumulate_with(&mut grads[x.0], xv.shape(), |dx| gemm_nt(gd, wv.data(), dx, n, m, k));
                accumulate_with(&mut grads[w.0], wv.shape(), |dw| gemm_tn(xv.data(), gd, dw, n, k, m));
                if let Some(b) = b {
                    accumulate_with(&mut grads[b.0], self.value(*b).shape(), |db| {
                        for row in gd.chunks(m) {
                            for (o, v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let len = g.cols();
                accumulate_with(&mut grads[x.0], xv.shape(), |dx| {
                    for r in 0..n {
                        for j in 0..len {
                            dx[r * c + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let (n, w) = (pv.rows(), pv.cols());
                    accumulate_with(&mut grads[p.0], pv.shape(), |dp| {
                        for r in 0..n {
                            for j in 0..w {
                                dp[r * w + j] += gd[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                accumulate_with(&mut grads[a.0], av.shape(), |da| gemm_nt(gd, bv.data(), da, n, m, k));
                accumulate_with(&mut grads[b.0], bv.shape(), |db| gemm_tn(av.data(), gd, db, n, k, m));
            }
            Op::MatMulNT { a, b, scale } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let gs: Cow<'_, [f64]> =
                    if *scale == 1.0 { Cow::Borrowed(gd) } else { Cow::Owned(gd.iter().map(|v| v * scale).collect()) };
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                accumulate_with(&mut grads[a.0], av.shape(), |da| gemm_nn(&gs, bv.data(), da, n, m, k));
                accumulate_with(&mut grads[b.0], bv.shape(), |db| gemm_tn(&gs, av.data(), db, n, m, k));
            }
            Op::MaskedSoftmax { x } => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                accumulate_with(&mut grads[x.0], y.shape(), |dx| {
                    for r in 0..n {
                        let yr = y.row(r);
                        let gr = &gd[r * m..(r + 1) * m];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            dx[r * m + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                accumulate_with(&mut grads[x.0], xv.shape(), |dx| {
                    for (i, &v) in xv.data().iter().enumerate() {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        dx[i] += gd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::CrossEntropy { logits, rows, targets, probs } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let s = gd[0] / rows.len() as f64;
                accumulate_with(&mut grads[logits.0], lv.shape(), |dl| {
                    for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        for c in 0..v {
                            dl[r * v + c] += s * probs[i * v + c];
                        }
                        dl[r * v + t] -= s;
                    }
                });
            }
            Op::RoleMass { heads, query, key, scale } => {
                let s = gd[0] * scale;
                for h in heads {
                    let hv = self.value(*h);
                    let m = hv.cols();
                    accumulate_with(&mut grads[h.0], hv.shape(), |dh| {
                        for &q in query.iter() {
                            for &k in key.iter() {
                                dh[q * m + k] += s;
                            }
                        }
                    });
                }
            }
            Op::Penalty { x, target, delta, kind } => {
                let d = penalty_grad(self.value(*x).item(), *target, *delta, *kind);
                accumulate(&mut grads[x.0], Tensor::scalar(gd[0] * d));
            }
            Op::WeightedSum { inputs, weights } => {
                for (i, w) in inputs.iter().zip(weights) {
                    accumulate(&mut grads[i.0], Tensor::scalar(gd[0] * w));
                }
            }
        }
    }
}

/// Row softmax over valid positions. Invalid positions receive an additive
/// `-inf` before exponentiation and come out exactly zero.
pub fn softmax_rows(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    x.require_rank2("softmax input")?;
    let (n, m) = (x.rows(), x.cols());
    if mask.len() != n * m {
        return Err(Error::Shape(format!("mask has {} entries for a {n}x{m} input", mask.len())));
    }
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let mrow = &mask[r * m..(r + 1) * m];
        if !mrow.contains(&true) {
            return Err(Error::InvalidMask { row: r });
        }
        let xrow = x.row(r);
        let orow = &mut out[r * m..(r + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for c in 0..m {
            let z = if mrow[c] { xrow[c] } else { f64::NEG_INFINITY };
            orow[c] = z;
            max = max.max(z);
        }
        let mut sum = 0.0;
        for v in orow.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(vec![n, m], out)
}

pub(crate) fn penalty_value(x: f64, target: f64, delta: f64, kind: PenaltyKind) -> f64 {
    let r = x - target;
    match kind {
        PenaltyKind::Huber => {
            if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * r.abs() - 0.5 * delta * delta
            }
        }
        PenaltyKind::Band => {
            let e = (r.abs() - delta).max(0.0);
            0.5 * e * e
        }
    }
}

pub(crate) fn penalty_grad(x: f64, target: f64, delta: f64, kind: PenaltyKind) -> f64 {
    let r = x - target;
    match kind {
        PenaltyKind::Huber => {
            if r.abs() <= delta {
                r
            } else {
                delta * r.signum()
            }
        }
        PenaltyKind::Band => (r.abs() - delta).max(0.0) * r.signum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_valid(n: usize, m: usize) -> Vec<bool> {
        vec![true; n * m]
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_rows(&[vec![0.7, 0.7, 0.7]]);
        let y = softmax_rows(&x, &all_valid(1, 3)).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        let x = Tensor::from_rows(&[vec![0.0, 2f64.ln()]]);
        let y = softmax_rows(&x, &all_valid(1, 2)).unwrap();
        assert!((y.at(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.at(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_positions_are_exact_zero() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, -1.0, 0.5]]);
        let mask = [true, false, true, false, false, true];
        let y = softmax_rows(&x, &mask).unwrap();
        assert_eq!(y.at(0, 1), 0.0);
        assert_eq!(y.at(1, 0), 0.0);
        assert_eq!(y.at(1, 1), 0.0);
        assert_eq!(y.at(1, 2), 1.0);
    }

    #[test]
    fn softmax_empty_row_is_invalid_mask() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let err = softmax_rows(&x, &[true, true, false, false]).unwrap_err();
        assert!(matches!(err, Error::InvalidMask { row: 1 }));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[3, 16]));
        let loss = g.cross_entropy(logits, &[0, 5, 15], &[true, true, true]).unwrap();
        assert!((g.value(loss).item() - 16f64.ln()).abs() < 1e-12);
        assert!((g.value(loss).item() - 2.772589).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_empty_loss() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.cross_entropy(logits, &[0, 1], &[false, false]), Err(Error::EmptyLoss)));
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let loss_at = |margin: f64| {
            let mut g = Graph::new();
            let mut row = vec![0.0; 8];
            row[3] = margin;
            let logits = g.input(Tensor::from_rows(&[row]));
            let l = g.cross_entropy(logits, &[3], &[true]).unwrap();
            g.value(l).item()
        };
        let (l1, l10) = (loss_at(1.0), loss_at(10.0));
        assert!(l10 < l1);
        assert!(l10 < 1e-3);
        assert!(l10 >= 0.0);
    }

    #[test]
    fn penalty_branches() {
        assert!((penalty_value(0.5, 0.4, 0.2, PenaltyKind::Huber) - 0.005).abs() < 1e-15);
        assert!((penalty_value(0.8, 0.4, 0.2, PenaltyKind::Huber) - 0.06).abs() < 1e-15);
        assert_eq!(penalty_value(0.4, 0.4, 0.2, PenaltyKind::Huber), 0.0);
        assert_eq!(penalty_value(0.55, 0.4, 0.2, PenaltyKind::Band), 0.0);
        assert!((penalty_value(0.7, 0.4, 0.2, PenaltyKind::Band) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn backward_through_linear_and_softmax_matches_hand_derivative() {
        // loss = softmax([w, 0])[0]; d/dw = p(1-p)
        let w = Tensor::from_rows(&[vec![0.3]]);
        let mut g = Graph::new();
        let wv = g.param(&w);
        let zero = g.input(Tensor::zeros(&[1, 1]));
        let row = g.concat_cols(&[wv, zero]).unwrap();
        let p = g.masked_softmax(row, &[true, true]).unwrap();
        let q = g.role_mass(&[p], Arc::from(vec![0]), Arc::from(vec![0]), 1.0);
        let grads = g.backward(&[(q, 1.0)]);
        let pv = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((grads.get(wv).unwrap().item() - pv * (1.0 - pv)).abs() < 1e-15);
    }
}
