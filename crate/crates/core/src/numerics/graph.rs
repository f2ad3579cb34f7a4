//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; [`Graph::backward`] walks it once in reverse.
//! Parameter leaves borrow their tensors from the caller's parameter store
//! and are keyed by a caller-chosen `usize` so gradients can be routed back.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::ops::{self, cross_entropy_parts, MASKED_LOGIT};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    MaskFill { x: Var, allow: Vec<bool> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: u32, probs: Tensor, count: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Row { x: Var, index: usize },
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Square(Var),
    Relu(Var),
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    param: Option<usize>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
/// Parameters registered on the tape but not reached by the loss get zeros.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn take(&mut self, key: usize) -> Option<Tensor> {
        self.map.remove(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Registers (once) a differentiable parameter leaf.
    pub fn param(&mut self, key: usize, t: &'p Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf);
        self.nodes[v.0].param = Some(key);
        self.params.insert(key, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.axpy(1.0, tb)?;
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    /// `x[.., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.numel() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push_owned(out, Op::AddBias(x, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_owned(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push_owned(out, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_owned(out, Op::MatMulNT(a, b)))
    }

    /// Rows `ids` of a 2-D table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = match t.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Shape { op: "gather", detail: format!("table shape {s:?}") }),
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Shape { op: "gather", detail: format!("row {i} of {n}") });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_owned(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Entries with `allow[i] == false` are replaced by a large negative logit.
    pub fn mask_fill(&mut self, x: Var, allow: Vec<bool>) -> Result<Var> {
        let tx = self.value(x);
        if allow.len() != tx.numel() {
            return Err(Error::Shape { op: "mask_fill", detail: format!("{} flags for {:?}", allow.len(), tx.shape()) });
        }
        let mut out = tx.clone();
        for (o, &a) in out.data_mut().iter_mut().zip(&allow) {
            if !a {
                *o = MASKED_LOGIT;
            }
        }
        Ok(self.push_owned(out, Op::MaskFill { x, allow }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.push_owned(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_owned(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push_owned(out, Op::Gelu(x))
    }

    /// Mean cross-entropy over non-ignored rows; a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let (loss, probs, count) = cross_entropy_parts(self.value(logits), targets, ignore)?;
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start > end || end > c || tx.shape().len() != 2 {
            return Err(Error::Shape { op: "slice_cols", detail: format!("{start}..{end} of {:?}", tx.shape()) });
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let out = Tensor::new(vec![tx.rows(), end - start], data)?;
        Ok(self.push_owned(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let mut cols = 0;
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(Error::Shape { op: "concat_cols", detail: format!("{:?}", t.shape()) });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_owned(out, Op::ConcatCols(xs.to_vec())))
    }

    /// Row `index` as a `[1, c]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.rows() {
            return Err(Error::Shape { op: "row", detail: format!("row {index} of {:?}", tx.shape()) });
        }
        let out = Tensor::new(vec![1, tx.cols()], tx.row(index).to_vec())?;
        Ok(self.push_owned(out, Op::Row { x, index }))
    }

    /// Column means as a `[1, c]` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(tx.row(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let out = Tensor::new(vec![1, c], data).expect("consistent shape");
        self.push_owned(out, Op::MeanRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push_owned(out, Op::L2NormalizeRows { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push_owned(out, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_owned(out, Op::Reshape(x)))
    }

    /// Exact reverse-mode gradients of a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Shape { op: "backward", detail: format!("loss must be scalar, got {:?}", lt.shape()) });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = Gradients::default();
        for (&key, v) in &self.params {
            out.map.insert(key, Tensor::zeros(self.value(*v).shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(key) = node.param {
                out.map.insert(key, g);
                continue;
            }
            self.propagate(node, g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<'p>, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g)?;
            }
            Op::AddBias(x, b) => {
                let mut gb = Tensor::zeros(self.value(*b).shape());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *b, gb)?;
                acc(grads, *x, g)?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(g.shape().to_vec(), g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect())?;
                let gb = Tensor::new(g.shape().to_vec(), g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect())?;
                acc(grads, *a, ga)?;
                acc(grads, *b, gb)?;
            }
            Op::Scale(x, s) => acc(grads, *x, g.map(|v| v * s))?,
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(grads, *x, g.reshape(&shape)?)?;
            }
            Op::MatMul(a, b) => {
                let ga = ops::matmul_nt(&g, self.value(*b))?;
                let gb = ops::matmul_tn(self.value(*a), &g)?;
                acc(grads, *a, ga)?;
                acc(grads, *b, gb)?;
            }
            Op::MatMulNT(a, b) => {
                let ga = ops::matmul(&g, self.value(*b))?;
                let gb = ops::matmul_tn(&g, self.value(*a))?;
                acc(grads, *a, ga)?;
                acc(grads, *b, gb)?;
            }
            Op::Gather { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *table, gt)?;
            }
            Op::MaskFill { x, allow } => {
                let mut gx = g;
                for (v, &a) in gx.data_mut().iter_mut().zip(allow) {
                    if !a {
                        *v = 0.0;
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::Softmax(x) => {
                let mut gx = g;
                for r in 0..gx.rows() {
                    let yr = y.row(r);
                    let dot: f64 = gx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, &yy) in gx.row_mut(r).iter_mut().zip(yr) {
                        *v = yy * (*v - dot);
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut gg = Tensor::zeros(&[d]);
                let mut gbeta = Tensor::zeros(&[d]);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        gg.data_mut()[j] += gr[j] * xh[j];
                        gbeta.data_mut()[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let out = gx.row_mut(r);
                    for j in 0..d {
                        out[j] = inv_std[r] * (gr[j] * gam[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(grads, *gamma, gg)?;
                acc(grads, *beta, gbeta)?;
                acc(grads, *x, gx)?;
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let data = g.data().iter().zip(tx.data()).map(|(gv, &xv)| gv * ops::gelu_grad(xv)).collect();
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?)?;
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let scale = g.item() / *count as f64;
                let mut gl = Tensor::zeros(probs.shape());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let out = gl.row_mut(r);
                    for (o, p) in out.iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    out[t as usize] -= scale;
                }
                acc(grads, *logits, gl)?;
            }
            Op::SliceCols { x, start } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *x, gx)?;
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    let mut gx = Tensor::zeros(self.value(x).shape());
                    for r in 0..g.rows() {
                        gx.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(grads, x, gx)?;
                }
            }
            Op::Row { x, index } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.row_mut(*index).copy_from_slice(g.data());
                acc(grads, *x, gx)?;
            }
            Op::MeanRows(x) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let n = gx.rows() as f64;
                for r in 0..gx.rows() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = g;
                for r in 0..gx.rows() {
                    let yr = y.row(r);
                    let dot: f64 = gx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, &yy) in gx.row_mut(r).iter_mut().zip(yr) {
                        *v = (*v - yy * dot) / norms[r];
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let s = g.item();
                acc(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                let data = g.data().iter().zip(tx.data()).map(|(gv, xv)| 2.0 * xv * gv).collect();
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?)?;
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let data = g.data().iter().zip(tx.data()).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}
