//! Define-by-run reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{gemm, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    L2NormalizeRows(Var, f64),
    SoftmaxRows(Var),
    SumAll(Var),
    InfoNce {
        sim: Var,
        partner: Arc<Vec<usize>>,
        tau: f64,
    },
    BceWithLogits(Var, Arc<Vec<f64>>),
    AttnScores {
        q: Var,
        k: Var,
        offsets: Arc<Vec<usize>>,
        heads: usize,
        scale: f64,
    },
    SegmentSoftmax {
        scores: Var,
        offsets: Arc<Vec<usize>>,
    },
    AttnCombine {
        scores: Var,
        v: Var,
        offsets: Arc<Vec<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn segment_of(offsets: &[usize]) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
    offsets.windows(2).enumerate().map(|(b, w)| (b, w[0]..w[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).clone();
        t.clear_grad();
        self.push(t, Op::Param(id), true)
    }

    /// Value copied into a constant: the gradient does not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dim_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, m) = dims(self.value(a));
        if self.value(bias).len() != m {
            return Err(self.dim_err("add_row_bias", a, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(m) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(&[a, bias]);
        Ok(self.push(t, Op::AddRowBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = if *x > 0.0 { *x } else { slope * *x });
        let ng = self.ng(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of zero parts"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row lookup; the backward pass scatter-adds into the looked-up rows only.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = dims(self.value(table));
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::matrix(idx.len(), c, data)?, Op::GatherRows(table, idx), ng))
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            let d = crate::numerics::tensor::l2_norm(row).max(eps);
            row.iter_mut().for_each(|x| *x /= d);
        }
        let ng = self.ng(&[a]);
        self.push(t, Op::L2NormalizeRows(a, eps), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = crate::numerics::tensor::softmax_rows(self.value(a));
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum_all(sq))
    }

    /// InfoNCE over a similarity matrix: row `i` is an anchor whose positive
    /// is column `partner[i]`; every other column `k ≠ i` is a negative.
    /// Returns the mean over anchors.
    pub fn info_nce(&mut self, sim: Var, partner: Arc<Vec<usize>>, tau: f64) -> Result<Var> {
        let (n, m) = dims(self.value(sim));
        if n != m || partner.len() != n {
            return Err(Error::contract(format!(
                "info_nce expects a square {n}x{n} similarity matrix with one partner per row"
            )));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::config("tau", "temperature must be > 0"));
        }
        if n < 3 {
            return Err(Error::DegenerateBatch(
                "InfoNCE needs at least two pairs so every anchor has a negative".into(),
            ));
        }
        let s = self.value(sim);
        let mut total = 0.0;
        for i in 0..n {
            let j = partner[i];
            if j == i || j >= n {
                return Err(Error::contract(format!("row {i} has invalid partner {j}")));
            }
            let row = s.row(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, &x)| x / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .map(|(_, &x)| (x / tau - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[j] / tau;
        }
        let ng = self.ng(&[sim]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::InfoNce { sim, partner, tau }, ng))
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, labels), ng))
    }

    /// Per-head target-attention scores over ragged sequences.
    ///
    /// `q` is `B×(H·dk)` (one query per sequence), `k` is `T×(H·dk)` holding
    /// all sequence rows back to back; sequence `b` owns rows
    /// `offsets[b]..offsets[b+1]`. The result is `T×H`.
    pub fn attn_scores(&mut self, q: Var, k: Var, offsets: Arc<Vec<usize>>, heads: usize, scale: f64) -> Result<Var> {
        let (b, qc) = dims(self.value(q));
        let (t, kc) = dims(self.value(k));
        if qc != kc || heads == 0 || qc % heads != 0 {
            return Err(self.dim_err("attn_scores", q, k));
        }
        check_offsets(&offsets, b, t)?;
        if t == 0 {
            return Err(Error::contract("attn_scores over zero sequence rows"));
        }
        let dk = qc / heads;
        let mut out = vec![0.0; t * heads];
        let (qv, kv) = (self.value(q), self.value(k));
        for (bi, range) in segment_of(&offsets) {
            let qr = qv.row(bi);
            for ti in range {
                let kr = kv.row(ti);
                for h in 0..heads {
                    let sl = h * dk..(h + 1) * dk;
                    out[ti * heads + h] = scale * crate::numerics::tensor::dot(&qr[sl.clone()], &kr[sl]);
                }
            }
        }
        let ng = self.ng(&[q, k]);
        Ok(self.push(
            Tensor::matrix(t, heads, out)?,
            Op::AttnScores {
                q,
                k,
                offsets,
                heads,
                scale,
            },
            ng,
        ))
    }

    /// Softmax over the positions of each sequence, independently per head.
    pub fn segment_softmax(&mut self, scores: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let mut t = self.value(scores).clone();
        let heads = t.cols();
        let total = *offsets.last().unwrap_or(&0);
        check_offsets(&offsets, offsets.len().saturating_sub(1), total)?;
        let mut buf = Vec::new();
        for (_, range) in segment_of(&offsets) {
            if range.is_empty() {
                continue;
            }
            for h in 0..heads {
                buf.clear();
                buf.extend(range.clone().map(|r| t.data()[r * heads + h]));
                softmax_in_place(&mut buf);
                for (r, &p) in range.clone().zip(&buf) {
                    t.data_mut()[r * heads + h] = p;
                }
            }
        }
        let ng = self.ng(&[scores]);
        Ok(self.push(t, Op::SegmentSoftmax { scores, offsets }, ng))
    }

    /// Score-weighted sum of value rows per sequence; empty sequences yield
    /// zero rows. `scores` is `T×H`, `v` is `T×(H·dv)`, result `B×(H·dv)`.
    pub fn attn_combine(&mut self, scores: Var, v: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let heads = self.value(scores).cols();
        let (t, vc) = dims(self.value(v));
        let b = offsets.len().saturating_sub(1);
        check_offsets(&offsets, b, t)?;
        if heads == 0 || vc % heads != 0 || self.value(scores).rows() != t {
            return Err(self.dim_err("attn_combine", scores, v));
        }
        let dv = vc / heads;
        let mut out = vec![0.0; b * vc];
        let (sv, vv) = (self.value(scores), self.value(v));
        for (bi, range) in segment_of(&offsets) {
            let orow = &mut out[bi * vc..(bi + 1) * vc];
            for ti in range {
                let vr = vv.row(ti);
                for h in 0..heads {
                    let s = sv.data()[ti * heads + h];
                    for j in h * dv..(h + 1) * dv {
                        orow[j] += s * vr[j];
                    }
                }
            }
        }
        let ng = self.ng(&[scores, v]);
        Ok(self.push(Tensor::matrix(b, vc, out)?, Op::AttnCombine { scores, v, offsets }, ng))
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, gy, false, self.value(*b).data(), true, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, gy, false, 1.0, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, gy, false, self.value(*b).data(), false, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(n, m, k, gy, true, self.value(*a).data(), false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, g)| *x += g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(x, g)| *x += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, g)| *x += g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(x, g)| *x -= g);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, g), w) in ga.iter_mut().zip(gy).zip(&bv) {
                        *x += g * w;
                    }
                }
                let av = self.value(*a).data().to_vec();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, g), w) in gb.iter_mut().zip(gy).zip(&av) {
                        *x += g * w;
                    }
                }
            }
            Op::AddRowBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, g)| *x += g);
                }
                let m = y.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in gy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(x, g)| *x += c * g);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((acc, g), &x) in ga.iter_mut().zip(gy).zip(xv) {
                        *acc += if x > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (r, grow) in gy.chunks(total).enumerate() {
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&grow[start..start + c])
                                .for_each(|(x, g)| *x += g);
                        }
                    }
                    start += c;
                }
            }
            Op::GatherRows(table, idx) => {
                let c = y.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        gt[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&gy[r * c..(r + 1) * c])
                            .for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::L2NormalizeRows(a, eps) => {
                let c = y.cols();
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..y.rows() {
                        let sl = r * c..(r + 1) * c;
                        let norm = crate::numerics::tensor::l2_norm(&xv[sl.clone()]);
                        let (yr, gr) = (&y.data()[sl.clone()], &gy[sl.clone()]);
                        if norm > *eps {
                            let proj = crate::numerics::tensor::dot(yr, gr);
                            for ((acc, &g), &yy) in ga[sl].iter_mut().zip(gr).zip(yr) {
                                *acc += (g - yy * proj) / norm;
                            }
                        } else {
                            ga[sl].iter_mut().zip(gr).for_each(|(acc, g)| *acc += g / eps);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((acc, yr), gr) in ga.chunks_mut(c).zip(y.data().chunks(c)).zip(gy.chunks(c)) {
                        let proj = crate::numerics::tensor::dot(yr, gr);
                        for ((x, &p), &g) in acc.iter_mut().zip(yr).zip(gr) {
                            *x += p * (g - proj);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += gy[0]);
                }
            }
            Op::InfoNce { sim, partner, tau } => {
                let s = self.value(*sim);
                let n = s.rows();
                let coef = gy[0] / (n as f64 * tau);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let mut p: Vec<f64> = s
                            .row(i)
                            .iter()
                            .enumerate()
                            .map(|(k, &x)| if k == i { f64::NEG_INFINITY } else { x / tau })
                            .collect();
                        softmax_in_place(&mut p);
                        p
                    })
                    .collect();
                if let Some(gs) = self.acc(grads, *sim) {
                    for (i, p) in rows.iter().enumerate() {
                        for (k, &pk) in p.iter().enumerate() {
                            if k == i {
                                continue;
                            }
                            let target = if k == partner[i] { 1.0 } else { 0.0 };
                            gs[i * n + k] += coef * (pk - target);
                        }
                    }
                }
            }
            Op::BceWithLogits(logits, labels) => {
                let x = self.value(*logits).data();
                let n = labels.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((acc, &z), &yv) in gl.iter_mut().zip(x).zip(labels.iter()) {
                        *acc += gy[0] * (crate::numerics::tensor::sigmoid(z) - yv) / n;
                    }
                }
            }
            Op::AttnScores {
                q,
                k,
                offsets,
                heads,
                scale,
            } => {
                let qc = self.value(*q).cols();
                let dk = qc / heads;
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                if let Some(gq) = self.acc(grads, *q) {
                    for (bi, range) in segment_of(offsets) {
                        for ti in range {
                            for h in 0..*heads {
                                let g = gy[ti * heads + h] * scale;
                                for j in h * dk..(h + 1) * dk {
                                    gq[bi * qc + j] += g * kv[ti * qc + j];
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, *k) {
                    for (bi, range) in segment_of(offsets) {
                        for ti in range {
                            for h in 0..*heads {
                                let g = gy[ti * heads + h] * scale;
                                for j in h * dk..(h + 1) * dk {
                                    gk[ti * qc + j] += g * qv[bi * qc + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { scores, offsets } => {
                let heads = y.cols();
                if let Some(gs) = self.acc(grads, *scores) {
                    for (_, range) in segment_of(offsets) {
                        for h in 0..heads {
                            let proj: f64 = range.clone().map(|r| y.data()[r * heads + h] * gy[r * heads + h]).sum();
                            for r in range.clone() {
                                let i = r * heads + h;
                                gs[i] += y.data()[i] * (gy[i] - proj);
                            }
                        }
                    }
                }
            }
            Op::AttnCombine { scores, v, offsets } => {
                let sv = self.value(*scores).data();
                let heads = self.value(*scores).cols();
                let vv = self.value(*v);
                let vc = vv.cols();
                let dv = vc / heads;
                if let Some(gs) = self.acc(grads, *scores) {
                    for (bi, range) in segment_of(offsets) {
                        let grow = &gy[bi * vc..(bi + 1) * vc];
                        for ti in range {
                            let vr = vv.row(ti);
                            for h in 0..heads {
                                let sl = h * dv..(h + 1) * dv;
                                gs[ti * heads + h] += crate::numerics::tensor::dot(&grow[sl.clone()], &vr[sl]);
                            }
                        }
                    }
                }
                if let Some(gv) = self.acc(grads, *v) {
                    for (bi, range) in segment_of(offsets) {
                        let grow = &gy[bi * vc..(bi + 1) * vc];
                        for ti in range {
                            for h in 0..heads {
                                let s = sv[ti * heads + h];
                                for j in h * dv..(h + 1) * dv {
                                    gv[ti * vc + j] += s * grow[j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into the store's grad slots.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    store.get_mut(id).accumulate_grad(g);
                }
            }
        }
    }
}

fn check_offsets(offsets: &[usize], segments: usize, rows: usize) -> Result<()> {
    let ok = offsets.len() == segments + 1
        && offsets.first() == Some(&0)
        && offsets.last() == Some(&rows)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "sequence offsets {offsets:?} do not partition {rows} rows into {segments} segments"
        )))
    }
}
