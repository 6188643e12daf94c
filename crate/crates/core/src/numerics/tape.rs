//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every op appends a node holding its forward value and parent handles.
//! Nodes are only ever appended, so the push order is a topological order and
//! [`Tape::backward`] walks it in reverse exactly once.

use std::sync::Arc;

use crate::mask::AttentionMask;

use super::kernels::{self, matmul_nt_acc, matmul_tn_acc};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SelectRow(Var, usize),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = kernels::transpose(self.value(x));
        self.push(value, Op::Transpose(x))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + width > c {
            return Err(NumericsError::Shape(format!(
                "slice {start}..{} of {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let value = Tensor::matrix(r, width, data)?;
        Ok(self.push(value, Op::SliceCols { src: x, start }))
    }

    /// Splits `x` (n×d) into `heads` column blocks of width d/heads.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Vec<Var>, NumericsError> {
        let d = self.value(x).cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericsError::Shape(format!(
                "{d} columns into {heads} heads"
            )));
        }
        let w = d / heads;
        (0..heads).map(|h| self.slice_cols(x, h * w, w)).collect()
    }

    /// Concatenates equal-height matrices side by side.
    pub fn concat_heads(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Shape("concat of zero parts".into()));
        };
        let r = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(NumericsError::Shape("concat of unequal heights".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of `table` selected by `rows` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= tv.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    index: r,
                    len: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(r));
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if row >= xv.rows() {
            return Err(NumericsError::IndexOutOfRange {
                index: row,
                len: xv.rows(),
            });
        }
        let value = Tensor::matrix(1, xv.cols(), xv.row(row).to_vec())?;
        Ok(self.push(value, Op::SelectRow(x, row)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Row-wise layer normalization with learned gain and bias (each `1×d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (xv.rows(), xv.cols());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let (xhat, inv_std) = kernels::normalize_rows(xv.data(), r, c);
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn masked_softmax(
        &mut self,
        scores: Var,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var, NumericsError> {
        let value = kernels::masked_softmax(self.value(scores), mask)?;
        Ok(self.push(value, Op::MaskedSoftmax(scores)))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(NumericsError::Shape(format!(
                "cross_entropy expects one row, got {:?}",
                lv.shape()
            )));
        }
        if target >= lv.cols() {
            return Err(NumericsError::IndexOutOfRange {
                index: target,
                len: lv.cols(),
            });
        }
        let (lse, probs) = kernels::log_softmax_parts(lv.data());
        let loss = lse - lv.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::Detached);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                matmul_nt_acc(acc(grads, *a, av).data_mut(), gd, bv.data(), m, n, k);
                matmul_tn_acc(acc(grads, *b, bv).data_mut(), av.data(), gd, m, k, n);
            }
            Op::Add(a, b) => {
                acc(grads, *a, self.value(*a)).add_assign(g);
                acc(grads, *b, self.value(*b)).add_assign(g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                for ((o, &gv), &y) in acc(grads, *a, &av)
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .zip(bv.data())
                {
                    *o += gv * y;
                }
                for ((o, &gv), &x) in acc(grads, *b, &bv)
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .zip(av.data())
                {
                    *o += gv * x;
                }
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, self.value(*x)).add_assign(g);
                let c = g.cols();
                let gr = acc(grads, *row, self.value(*row)).data_mut();
                for (idx, &gv) in gd.iter().enumerate() {
                    gr[idx % c] += gv;
                }
            }
            Op::Scale(x, s) => {
                for (o, &gv) in acc(grads, *x, self.value(*x)).data_mut().iter_mut().zip(gd) {
                    *o += gv * s;
                }
            }
            Op::Transpose(x) => {
                let t = kernels::transpose(g);
                acc(grads, *x, self.value(*x)).add_assign(&t);
            }
            Op::SliceCols { src, start } => {
                let sv = self.value(*src);
                let (c, w) = (sv.cols(), g.cols());
                let gs = acc(grads, *src, sv).data_mut();
                for r in 0..g.rows() {
                    for (o, &gv) in gs[r * c + start..r * c + start + w]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let gp = acc(grads, p, pv).data_mut();
                    for r in 0..g.rows() {
                        for (o, &gv) in gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g.row(r)[offset..offset + w])
                        {
                            *o += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let gt = acc(grads, *table, tv).data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &gv) in gt[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
            }
            Op::SelectRow(x, row) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = acc(grads, *x, xv).data_mut();
                for (o, &gv) in gx[row * c..(row + 1) * c].iter_mut().zip(gd) {
                    *o += gv;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = acc(grads, *x, xv).data_mut();
                for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv.data()) {
                    if v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gain_v = self.value(*gain).data().to_vec();
                {
                    let gg = acc(grads, *gain, self.value(*gain)).data_mut();
                    for (idx, &gv) in gd.iter().enumerate() {
                        gg[idx % c] += gv * xhat[idx];
                    }
                }
                {
                    let gb = acc(grads, *bias, self.value(*bias)).data_mut();
                    for (idx, &gv) in gd.iter().enumerate() {
                        gb[idx % c] += gv;
                    }
                }
                let gx = acc(grads, *x, self.value(*x)).data_mut();
                let mut dxhat = vec![0.0; c];
                for r in 0..g.rows() {
                    let h = &xhat[r * c..(r + 1) * c];
                    for (q, d) in dxhat.iter_mut().enumerate() {
                        *d = gd[r * c + q] * gain_v[q];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dh = dxhat.iter().zip(h).map(|(d, hv)| d * hv).sum::<f64>() / c as f64;
                    for q in 0..c {
                        gx[r * c + q] += inv_std[r] * (dxhat[q] - mean_d - h[q] * mean_dh);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                // dx = y ⊙ (g − Σ y g), row-wise; blocked entries have y = 0.
                let y = &node.value;
                let c = y.cols();
                let gx = acc(grads, *x, self.value(*x)).data_mut();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for q in 0..c {
                        gx[r * c + q] += yr[q] * (gr[q] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = gd[0];
                let gl = acc(grads, *logits, self.value(*logits)).data_mut();
                for (q, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if q == *target { 1.0 } else { 0.0 };
                    *o += scale * (p - onehot);
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                for o in acc(grads, *x, self.value(*x)).data_mut() {
                    *o += s;
                }
            }
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
