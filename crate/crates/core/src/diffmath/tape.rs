//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`GradTape`] borrows the parameter store for the lifetime of one forward
//! pass. Every op appends a node holding its value and enough of the inputs to
//! replay the adjoint; [`GradTape::backward`] walks the nodes in reverse and
//! scatters adjoints of parameter leaves into a [`Grads`] buffer. Tapes are
//! single use: build a fresh one per training step.

use super::ops::{gelu, gelu_derivative, log_sum_exp, sigmoid, softmax_into};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor2),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor2),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor2,
    },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct GradTape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> GradTape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v`'s value with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = Tensor2::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the 1×n `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim(format!(
                "row broadcast of {}x{} onto {}x{}",
                rv.rows(),
                rv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor (dropout masks, blends).
    pub fn mul_const(&mut self, a: Var, c: Tensor2) -> Result<Var> {
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Per-row layer normalization; `gain` and `bias` are 1×n.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(Error::dim(format!(
                "layer_norm over {n} columns with gain {:?} bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let mut xhat = Tensor2::zeros(xv.rows(), n);
        let mut out = Tensor2::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (mean, is) = super::ops::moments(xv.row(r), eps);
            inv_std.push(is);
            for c in 0..n {
                let h = (xv.get(r, c) - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor2::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_into(av.row(r), out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row softmax restricted to entries where `mask` is nonzero. Masked
    /// entries come out as exactly 0. Every row needs at least one open entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Tensor2) -> Result<Var> {
        let av = self.value(a);
        if !av.same_shape(mask) {
            return Err(Error::dim("mask shape differs from scores"));
        }
        let mut out = Tensor2::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let open: Vec<usize> = (0..av.cols()).filter(|&c| mask.get(r, c) != 0.0).collect();
            if open.is_empty() {
                return Err(Error::Domain(format!(
                    "attention row {r} has every entry masked"
                )));
            }
            let scores: Vec<f64> = open.iter().map(|&c| av.get(r, c)).collect();
            let mut probs = vec![0.0; open.len()];
            softmax_into(&scores, &mut probs);
            for (&c, p) in open.iter().zip(probs) {
                out.set(r, c, p);
            }
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut out = Tensor2::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= av.rows() {
                return Err(Error::dim(format!(
                    "row {r} out of range for {} rows",
                    av.rows()
                )));
            }
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::dim(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                av.cols()
            )));
        }
        let mut out = Tensor2::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::dim("empty concat"))?;
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dim("concat_cols with differing row counts"));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::dim("empty concat"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows with differing column counts"));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).squared_norm());
        self.push(out, Op::SumSquares(a))
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`, as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::dim(format!(
                "{} labels for {} rows",
                labels.len(),
                lv.rows()
            )));
        }
        let mut probs = Tensor2::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= lv.cols() {
                return Err(Error::Domain(format!(
                    "label {label} out of range for {} classes",
                    lv.cols()
                )));
            }
            let row = lv.row(r);
            total += log_sum_exp(row) - row[label];
            softmax_into(row, probs.row_mut(r));
        }
        let out = Tensor2::scalar(total / lv.rows() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let mut grads = Grads::zeros_like(self.params);
        self.backward_seeded(&[(loss, 1.0)], &mut grads)?;
        Ok(grads)
    }

    /// Backpropagates a weighted sum of scalar nodes, adding parameter
    /// gradients into `into`.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)], into: &mut Grads) -> Result<()> {
        if into.len() != self.params.len() {
            return Err(Error::dim(
                "gradient buffer does not match the parameter store",
            ));
        }
        let mut adj: Vec<Option<Tensor2>> = Vec::new();
        adj.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for &(v, w) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::Tape(format!("node {} is not on this tape", v.0)));
            }
            if self.value(v).shape() != (1, 1) {
                return Err(Error::Tape(format!("seed node {} is not a scalar", v.0)));
            }
            let slot = adj[v.0].get_or_insert_with(|| Tensor2::zeros(1, 1));
            slot.data_mut()[0] += w;
            top = top.max(v.0 + 1);
        }

        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        into.get_mut(id).add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_nt_acc(&g, bv, self.slot(&mut adj, *a));
                    matmul_tn_acc(av, &g, self.slot(&mut adj, *b));
                }
                Op::Add(a, b) => {
                    self.slot(&mut adj, *a).add_assign(&g);
                    self.slot(&mut adj, *b).add_assign(&g);
                }
                Op::AddRow(a, row) => {
                    self.slot(&mut adj, *a).add_assign(&g);
                    let gr = self.slot(&mut adj, *row);
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    self.slot(&mut adj, *a).add_assign(&g);
                    let gb = self.slot(&mut adj, *b);
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.value(*b);
                    accumulate(self.slot(&mut adj, *a), &g, bv.data(), |gv, o| gv * o);
                    let av = self.value(*a);
                    accumulate(self.slot(&mut adj, *b), &g, av.data(), |gv, o| gv * o);
                }
                Op::MulConst(a, c) => {
                    accumulate(self.slot(&mut adj, *a), &g, c.data(), |gv, o| gv * o)
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    let ga = self.slot(&mut adj, *a);
                    for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += f * v;
                    }
                }
                Op::Tanh(a) => {
                    let y = self.own(i);
                    accumulate(self.slot(&mut adj, *a), &g, y.data(), |gv, yv| {
                        gv * (1.0 - yv * yv)
                    });
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    accumulate(self.slot(&mut adj, *a), &g, x.data(), |gv, xv| {
                        gv * gelu_derivative(xv)
                    });
                }
                Op::Sigmoid(a) => {
                    let y = self.own(i);
                    accumulate(self.slot(&mut adj, *a), &g, y.data(), |gv, yv| {
                        gv * yv * (1.0 - yv)
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain).data().to_vec();
                    let n = g.cols();
                    {
                        let gg = self.slot(&mut adj, *gain);
                        for r in 0..g.rows() {
                            for c in 0..n {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                    }
                    {
                        let gb = self.slot(&mut adj, *bias);
                        for r in 0..g.rows() {
                            for c in 0..n {
                                gb.data_mut()[c] += g.get(r, c);
                            }
                        }
                    }
                    let gx = self.slot(&mut adj, *x);
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = (0..n).map(|c| g.get(r, c) * gain_v[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(xhat.row(r))
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n as f64;
                        let row = gx.row_mut(r);
                        for c in 0..n {
                            row[c] += inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = self.own(i);
                    let ga = self.slot(&mut adj, *a);
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        let out = ga.row_mut(r);
                        for c in 0..out.len() {
                            out[c] += y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    self.slot(&mut adj, *a).add_assign(&gt);
                }
                Op::SelectRows(a, rows) => {
                    let ga = self.slot(&mut adj, *a);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let start = *start;
                    let ga = self.slot(&mut adj, *a);
                    for r in 0..g.rows() {
                        for (o, &v) in ga.row_mut(r)[start..start + g.cols()]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        let gp = self.slot(&mut adj, p);
                        for r in 0..g.rows() {
                            for (o, &v) in gp
                                .row_mut(r)
                                .iter_mut()
                                .zip(&g.row(r)[offset..offset + width])
                            {
                                *o += v;
                            }
                        }
                        offset += width;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = self.slot(&mut adj, p);
                        for (o, &v) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *o += v;
                        }
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    for o in self.slot(&mut adj, *a).data_mut() {
                        *o += s;
                    }
                }
                Op::SumSquares(a) => {
                    let s = g.item();
                    let x = self.value(*a);
                    let ga = self.slot(&mut adj, *a);
                    for (o, &v) in ga.data_mut().iter_mut().zip(x.data()) {
                        *o += 2.0 * s * v;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g.item() / labels.len() as f64;
                    let gl = self.slot(&mut adj, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        let row = gl.row_mut(r);
                        for (c, o) in row.iter_mut().enumerate() {
                            let indicator = if c == label { 1.0 } else { 0.0 };
                            *o += s * (probs.get(r, c) - indicator);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn own(&self, i: usize) -> &Tensor2 {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor2>], v: Var) -> &'a mut Tensor2 {
        let (r, c) = self.value(v).shape();
        adj[v.0].get_or_insert_with(|| Tensor2::zeros(r, c))
    }
}

fn accumulate(target: &mut Tensor2, g: &Tensor2, other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((t, &gv), &o) in target.data_mut().iter_mut().zip(g.data()).zip(other) {
        *t += f(gv, o);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Central-difference check of every parameter entry against the tape.
    fn gradcheck(store: &ParamStore, f: impl Fn(&mut GradTape) -> Var) {
        let grads = {
            let mut tape = GradTape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).unwrap()
        };
        let h = 1e-5;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut()[k] += delta;
                    let mut tape = GradTape::new(&s);
                    let loss = f(&mut tape);
                    tape.value(loss).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = grads.get(id).data()[k];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (g - fd).abs() / denom < 1e-6,
                    "{}[{k}]: tape {g} vs fd {fd}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut store = ParamStore::new();
        let m = Tensor2::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = store.insert("eye", Tensor2::identity(3)).unwrap();
        let mid = store.insert("m", m.clone()).unwrap();
        let mut tape = GradTape::new(&store);
        let (a, b) = (tape.param(eye), tape.param(mid));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &m);

        let two = tape.constant(Tensor2::scalar(2.0));
        let three = tape.constant(Tensor2::scalar(3.0));
        let six = tape.matmul(two, three).unwrap();
        assert_eq!(tape.value(six).item(), 6.0);
        assert!(matches!(tape.matmul(b, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_of_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&mut rng, 3, 4)).unwrap();
        let w = store.insert("w", random(&mut rng, 4, 4)).unwrap();
        let b = store.insert("b", random(&mut rng, 1, 4)).unwrap();
        let gain = store.insert("gain", random(&mut rng, 1, 4)).unwrap();
        let beta = store.insert("beta", random(&mut rng, 1, 4)).unwrap();
        let y = store.insert("y", random(&mut rng, 3, 4)).unwrap();
        let mask =
            Tensor2::from_vec(3, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let drop = Tensor2::from_vec(
            3,
            4,
            (0..12)
                .map(|i| if i % 3 == 0 { 0.0 } else { 1.5 })
                .collect(),
        )
        .unwrap();

        gradcheck(&store, |t| {
            let (x, w, b, gain, beta, y) = (
                t.param(x),
                t.param(w),
                t.param(b),
                t.param(gain),
                t.param(beta),
                t.param(y),
            );
            let h = t.affine(x, w, b).unwrap();
            let h = t.layer_norm(h, gain, beta, 1e-5).unwrap();
            let h = t.gelu(h);
            let h = t.mul_const(h, drop.clone()).unwrap();
            let q = t.tanh(h);
            let yt = t.transpose(y);
            let scores = t.matmul(q, yt).unwrap();
            let scores = t.scale(scores, 0.5);
            let att = t.masked_softmax_rows(scores, &mask).unwrap();
            let mixed = t.matmul(att, y).unwrap();
            let s = t.sigmoid(mixed);
            let prod = t.mul(s, h).unwrap();
            let diff = t.sub(prod, x).unwrap();
            let picked = t.select_rows(diff, &[2, 0]).unwrap();
            let left = t.slice_cols(picked, 1, 2).unwrap();
            let both = t.concat_cols(&[left, left]).unwrap();
            let stacked = t.concat_rows(&[both, both]).unwrap();
            let sm = t.softmax_rows(stacked);
            let ce = t.cross_entropy(stacked, &[0, 3, 1, 2]).unwrap();
            let sq = t.sum_squares(sm);
            let total = t.sum(diff);
            let a1 = t.add(ce, sq).unwrap();
            t.add(a1, total).unwrap()
        });
    }

    #[test]
    fn masked_softmax_zeroes_closed_entries() {
        let store = ParamStore::new();
        let mut tape = GradTape::new(&store);
        let s =
            tape.constant(Tensor2::from_vec(2, 3, vec![5.0, 1.0, -2.0, 0.3, 0.4, 0.5]).unwrap());
        let mask = Tensor2::from_vec(2, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let a = tape.masked_softmax_rows(s, &mask).unwrap();
        let v = tape.value(a);
        assert_eq!(v.get(0, 0), 0.0);
        assert_eq!(v.get(1, 1), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        assert_eq!(v.get(1, 0), 1.0);
        let closed = Tensor2::zeros(2, 3);
        assert!(matches!(
            tape.masked_softmax_rows(s, &closed),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn backward_rejects_foreign_or_vector_nodes() {
        let store = ParamStore::new();
        let mut tape = GradTape::new(&store);
        let v = tape.constant(Tensor2::zeros(1, 3));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Tape(_))));
        assert!(matches!(tape.backward(v), Err(Error::Tape(_))));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut store = ParamStore::new();
        let p = store.insert("p", Tensor2::scalar(3.0)).unwrap();
        let mut tape = GradTape::new(&store);
        let a = tape.param(p);
        let b = tape.param(p);
        assert_eq!(a, b);
        let sq = tape.mul(a, b).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(p).item(), 6.0);
    }
}
