//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are added, and [`Graph::backward`] walks the tape in reverse to produce
//! gradients for the parameters that were read through [`Graph::param`].

use crate::error::{HahtError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::{dot, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    MulCol(Var, Var),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Nll {
        probs: Var,
        targets: Vec<usize>,
    },
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.store.value(*i),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Reads a parameter by name. Repeated reads return the same node.
    ///
    /// Panics if the parameter does not exist; parameter names are fixed by
    /// the model layout so a miss is a programming error.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param_by_index(idx)
    }

    pub fn try_param(&mut self, name: &str) -> Option<Var> {
        self.store.index_of(name).map(|i| self.param_by_index(i))
    }

    pub fn param_by_index(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_nodes[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Param(idx),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), k.shape(), "mul_const shape mismatch");
        for (x, m) in out.data_mut().iter_mut().zip(k.data()) {
            *x *= m;
        }
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, k), ng)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.cols(), 1, "mul_col expects a column");
        assert_eq!(c.rows(), self.value(a).rows(), "mul_col height mismatch");
        let c: Vec<f64> = c.data().to_vec();
        let mut out = self.value(a).clone();
        for (i, k) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Row-wise softmax. Positions where `mask` is false get exactly zero.
    ///
    /// `mask` is row-major with the same shape as `x`; `None` allows all.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n * m, "softmax mask shape mismatch");
        }
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row_mask = mask.map(|mk| &mk[i * m..(i + 1) * m]);
            softmax_row(xv.row(i), row_mask, out.row_mut(i))?;
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut out = Tensor::zeros(n, d);
        let mut rstds = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd: rstds,
            },
            ng,
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh());
        });
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Column-wise maximum over the rows where `mask` is true, as a `1 x d` row.
    pub fn max_pool(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let allowed = |r: usize| mask.is_none_or(|m| m[r]);
        let first = (0..n)
            .find(|&r| allowed(r))
            .ok_or(HahtError::AllMasked("max pooling"))?;
        let mut argmax = vec![first; d];
        let mut out = Tensor::from_vec(1, d, xv.row(first).to_vec());
        for r in (first + 1)..n {
            if !allowed(r) {
                continue;
            }
            for (j, &v) in xv.row(r).iter().enumerate() {
                if v > out.get(0, j) {
                    out.set(0, j, v);
                    argmax[j] = r;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                out.row_mut(i)[offset..offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "column slice out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for i in 0..v.rows() {
            out.row_mut(i)
                .copy_from_slice(&v.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// `-sum_t ln probs[t, targets[t]]` as a `1 x 1` tensor.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Var {
        let p = self.value(probs);
        assert_eq!(p.rows(), targets.len(), "nll target count mismatch");
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(t, &y)| -p.get(t, y).ln())
            .sum();
        let ng = self.ng(probs);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar node. Returns gradients for every parameter
    /// in the store; parameters never read are left at zero.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), [1, 1], "backward expects a scalar");
        let mut out = self.store.zeroed_gradients();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Constant => {}
                Op::Param(idx) => out.0[*idx].add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.matmul_nt(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).matmul_tn(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        let da = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = g.matmul_tn(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut dr = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => {
                    let mut da = g;
                    da.scale_assign(*k);
                    accumulate(&mut grads, *a, da);
                }
                Op::MulConst(a, k) => {
                    let mut da = g;
                    for (x, m) in da.data_mut().iter_mut().zip(k.data()) {
                        *x *= m;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MulCol(a, col) => {
                    let cv = self.value(*col);
                    if self.ng(*col) {
                        let av = self.value(*a);
                        let mut dc = Tensor::zeros(cv.rows(), 1);
                        for r in 0..g.rows() {
                            dc.set(r, 0, dot(g.row(r), av.row(r)));
                        }
                        accumulate(&mut grads, *col, dc);
                    }
                    if self.ng(*a) {
                        let mut da = g;
                        for r in 0..da.rows() {
                            let k = cv.get(r, 0);
                            da.row_mut(r).iter_mut().for_each(|x| *x *= k);
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Softmax(x) => {
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).row(0).to_vec();
                    let (n, d) = (xv.rows(), xv.cols());
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    let mut dx = Tensor::zeros(n, d);
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * rstd[r];
                            let gr = g.get(r, j);
                            dg.data_mut()[j] += gr * xhat[j];
                            db.data_mut()[j] += gr;
                            dxhat[j] = gr * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, &xhat) / d as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*gain) {
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.ng(*bias) {
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * dt;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, &t) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - t * t;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (j, &r) in argmax.iter().enumerate() {
                        dx.set(r, j, g.get(0, j));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) && rows > 0 {
                            accumulate(&mut grads, p, g.slice_rows(offset, rows));
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut dp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Nll { probs, targets } => {
                    let pv = self.value(*probs);
                    let upstream = g.get(0, 0);
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for (t, &yid) in targets.iter().enumerate() {
                        dp.set(t, yid, -upstream / pv.get(t, yid));
                    }
                    accumulate(&mut grads, *probs, dp);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Softmax of one row into `out`, with max-subtraction over the allowed
/// entries. Masked entries are written as exactly zero.
pub fn softmax_row(logits: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(HahtError::AllMasked("softmax"));
    }
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if allowed(j) {
            *o = (logits[j] - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Ok(())
}

/// Free-standing masked softmax over a vector.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(logits.len(), mask.len(), "masked_softmax length mismatch");
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, Some(mask), &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_gradcheck, GradcheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn masked_softmax_examples() {
        assert_eq!(
            masked_softmax(&[0.0, 0.0], &[true, true]).unwrap(),
            vec![0.5, 0.5]
        );

        let p = masked_softmax(&[0.0, 2f64.ln(), 3f64.ln()], &[true; 3]).unwrap();
        for (a, b) in p.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }

        let p = masked_softmax(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((p[0] - 0.1192).abs() < 1e-4 && (p[2] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn masked_softmax_rejects_empty_mask() {
        assert!(matches!(
            masked_softmax(&[1.0, 2.0], &[false, false]),
            Err(HahtError::AllMasked(_))
        ));
    }

    #[test]
    fn max_pool_examples() {
        let store = ParameterStore::new(BTreeMap::new());
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let p = g.max_pool(x, None).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
        let p = g.max_pool(x, Some(&[true, false])).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 5.0]);
        assert!(g.max_pool(x, Some(&[false, false])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn masked_softmax_is_a_distribution(
            pairs in prop::collection::vec((-30.0f64..30.0, any::<bool>()), 1..12),
            shift in -50.0f64..50.0,
        ) {
            let logits: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut mask: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            mask[0] = true;
            let p = masked_softmax(&logits, &mask).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (v, m) in p.iter().zip(&mask) {
                prop_assert!(*v >= 0.0);
                if !m { prop_assert_eq!(*v, 0.0); }
            }
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = masked_softmax(&shifted, &mask).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Builds a store holding `a` (3x4), `b` (4x4), `row` (1x4), gains.
    fn op_store(seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), random_tensor(&mut rng, 3, 4));
        m.insert("b".to_string(), random_tensor(&mut rng, 4, 4));
        m.insert("row".to_string(), random_tensor(&mut rng, 1, 4));
        m.insert("gain".to_string(), random_tensor(&mut rng, 1, 4));
        m.insert("col".to_string(), random_tensor(&mut rng, 3, 1));
        ParameterStore::new(m)
    }

    fn check(name: &str, build: impl Fn(&mut Graph) -> Var) {
        for seed in 0..3 {
            let store = op_store(seed);
            let report = finite_diff_gradcheck(
                &store,
                |s| {
                    let mut g = Graph::new(s);
                    let out = build(&mut g);
                    let value = g.value(out).data()[0];
                    let grads = g.backward(out);
                    (value, grads)
                },
                &GradcheckOptions::default(),
            );
            assert!(report.passed, "{name} seed {seed}: {report:?}");
        }
    }

    /// Reduces any tensor to a scalar with a fixed, non-uniform readout so
    /// every entry of the op's output contributes a distinct weight.
    fn readout(g: &mut Graph, x: Var) -> Var {
        let [r, c] = g.shape(x);
        let w = Tensor::from_vec(
            c,
            1,
            (0..c)
                .map(|j| 0.3 + 0.7 * ((j * 7 % 5) as f64) / 5.0)
                .collect(),
        );
        let rows = Tensor::from_vec(1, r, (0..r).map(|i| 1.0 - 0.25 * i as f64).collect());
        let w = g.constant(w);
        let rows = g.constant(rows);
        let xw = g.matmul(x, w);
        g.matmul(rows, xw)
    }

    #[test]
    fn gradcheck_each_op() {
        check("matmul", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let y = g.matmul(a, b);
            readout(g, y)
        });
        check("matmul_nt", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let y = g.matmul_nt(a, b);
            readout(g, y)
        });
        check("add_row", |g| {
            let (a, r) = (g.param("a"), g.param("row"));
            let y = g.add_row(a, r);
            let y = g.add(y, a);
            let y = g.scale(y, 0.7);
            readout(g, y)
        });
        check("mul_col", |g| {
            let (a, c) = (g.param("a"), g.param("col"));
            let y = g.mul_col(a, c);
            let y = g.mul_const(y, Tensor::filled(3, 4, 0.5));
            readout(g, y)
        });
        check("gather", |g| {
            let b = g.param("b");
            let y = g.gather(b, &[2, 0, 2]);
            readout(g, y)
        });
        check("softmax", |g| {
            let a = g.param("a");
            let mask = [
                true, false, true, true, true, true, false, true, false, false, true, true,
            ];
            let y = g.softmax(a, Some(&mask)).unwrap();
            readout(g, y)
        });
        check("layer_norm", |g| {
            let (a, gain, row) = (g.param("a"), g.param("gain"), g.param("row"));
            let y = g.layer_norm(a, gain, row);
            readout(g, y)
        });
        check("gelu_tanh", |g| {
            let a = g.param("a");
            let y = g.gelu(a);
            let y = g.tanh(y);
            readout(g, y)
        });
        check("max_pool", |g| {
            let a = g.param("a");
            let y = g.max_pool(a, Some(&[true, false, true])).unwrap();
            readout(g, y)
        });
        check("concat_slice", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let y = g.concat_rows(&[a, b]);
            let y = g.slice_rows(y, 1, 4);
            let z = g.concat_cols(&[y, b]);
            let z = g.slice_cols(z, 2, 4);
            readout(g, z)
        });
        check("nll", |g| {
            let a = g.param("a");
            let p = g.softmax(a, None).unwrap();
            g.nll(p, &[1, 3, 0])
        });
    }
}
