//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough cached state to run its backward
//! rule; [`Graph::backward`] walks the nodes in reverse insertion order, which
//! is a valid reverse topological order because operands always precede
//! their results.

use std::sync::Arc;

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::params::{ParamId, ParamStore};
use crate::activation::ScalarActivation;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Activation { x: Var, act: Arc<dyn ScalarActivation> },
    Sum(Var),
    Mean(Var),
    DepthwiseConv3 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    RepeatRows { x: Var, factor: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
    track_pieces: bool,
    pieces: Vec<i64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records which smooth piece each non-smooth operation used, see [`Graph::pieces`].
    pub fn with_piece_tracking() -> Self {
        Self {
            track_pieces: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Piece identifiers (activation table segments, pooling winners) in evaluation order.
    ///
    /// Two evaluations with equal piece lists are on the same smooth branch of
    /// the computed function.
    pub fn pieces(&self) -> &[i64] {
        &self.pieces
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A value whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.bound.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// Adds a length-`d` vector to every row of an `n × d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceRows { x, start }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::shape("concat_cols", format!("{shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Row-wise softmax along the last axis, max-subtracted.
    ///
    /// With `causal`, entry `(i, j)` for `j > i` is excluded and set to 0.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let live = if causal { (i + 1).min(c) } else { c };
            let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + live];
            let mut z = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - max).exp();
                z += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Softmax(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    t.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let r = t.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Elementwise activation; backward uses the activation's paired derivative.
    pub fn activation(&mut self, x: Var, act: &Arc<dyn ScalarActivation>) -> Var {
        let t = self.value(x);
        let value = t.map(|v| act.value(v));
        if self.track_pieces {
            let pieces: Vec<i64> = t.data().iter().filter_map(|&v| act.piece(v)).collect();
            self.pieces.extend(pieces);
        }
        let needs = self.needs(x);
        self.push(
            value,
            Op::Activation {
                x,
                act: Arc::clone(act),
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Per-channel convolution over rows with a width-3 kernel and zero padding.
    ///
    /// `w` is `3 × d` (taps for `t-1`, `t`, `t+1`), `b` has length `d`.
    pub fn depthwise_conv3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let d = tx.cols();
        if tw.shape() != [3, d] || tb.numel() != d {
            return Err(Error::shape(
                "depthwise_conv3",
                format!("input {:?}, kernel {:?}, bias {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let l = tx.rows();
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for c in 0..d {
                let mut acc = bd[c] + wd[d + c] * xd[t * d + c];
                if t > 0 {
                    acc += wd[c] * xd[(t - 1) * d + c];
                }
                if t + 1 < l {
                    acc += wd[2 * d + c] * xd[(t + 1) * d + c];
                }
                out[t * d + c] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::matrix(l, d, out)?, Op::DepthwiseConv3 { x, w, b }, needs))
    }

    /// Max over row pairs `(2i, 2i+1)`; output has `ceil(rows / 2)` rows.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (l, d) = (t.rows(), t.cols());
        let lo = l.div_ceil(2);
        let mut out = vec![0.0; lo * d];
        let mut argmax = vec![0usize; lo * d];
        for i in 0..lo {
            for c in 0..d {
                let a = 2 * i;
                let mut best = a;
                if a + 1 < l && t.data()[(a + 1) * d + c] > t.data()[a * d + c] {
                    best = a + 1;
                }
                out[i * d + c] = t.data()[best * d + c];
                argmax[i * d + c] = best;
            }
        }
        if self.track_pieces {
            self.pieces.extend(argmax.iter().map(|&a| a as i64));
        }
        let needs = self.needs(x);
        self.push(
            Tensor::matrix(lo, d, out).unwrap(),
            Op::MaxPool2 { x, argmax },
            needs,
        )
    }

    /// Nearest-neighbour upsampling over rows: row `t` of the output is row `t / factor`.
    pub fn repeat_rows(&mut self, x: Var, factor: usize, out_len: usize) -> Result<Var> {
        let t = self.value(x);
        if factor == 0 || out_len == 0 || (out_len - 1) / factor >= t.rows() {
            return Err(Error::shape(
                "repeat_rows",
                format!("{:?} x{factor} -> {out_len} rows", t.shape()),
            ));
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(out_len * d);
        for r in 0..out_len {
            out.extend_from_slice(t.row(r / factor));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(out_len, d, out)?, Op::RepeatRows { x, factor }, needs))
    }

    /// Reverse traversal from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(gd, tb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(ta.data(), gd, &mut db, m, k, n);
                    acc(*b, Tensor::matrix(k, n, db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                acc(*a, Tensor::matrix(c, r, out).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da: Vec<f64> = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let tb = val(*b);
                let d = tb.numel();
                let mut db = vec![0.0; d];
                for (i, v) in gd.iter().enumerate() {
                    db[i % d] += v;
                }
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (r, c, len) = (tx.rows(), tx.cols(), g.cols());
                let mut dx = Tensor::zeros(tx.shape());
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut dp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        dp.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                    }
                    acc(p, Tensor::new(val(p).shape().to_vec(), dp).unwrap());
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let r = node.value.rows();
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; r * d];
                let mut dxhat = vec![0.0; d];
                for i in 0..r {
                    let gr = &gd[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let k = inv_std[i] / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).unwrap());
                acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dgamma).unwrap());
                acc(*beta, Tensor::new(val(*beta).shape().to_vec(), dbeta).unwrap());
            }
            Op::Activation { x, act } => {
                let tx = val(*x);
                let dx = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| g * act.derivative(v))
                    .collect();
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::Sum(x) => {
                let tx = val(*x);
                acc(*x, Tensor::full(tx.shape(), gd[0]));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                acc(*x, Tensor::full(tx.shape(), gd[0] / tx.numel() as f64));
            }
            Op::DepthwiseConv3 { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (l, d) = (tx.rows(), tx.cols());
                let (xd, wd) = (tx.data(), tw.data());
                let mut dx = vec![0.0; l * d];
                let mut dw = vec![0.0; 3 * d];
                let mut db = vec![0.0; d];
                for t in 0..l {
                    for c in 0..d {
                        let gv = gd[t * d + c];
                        db[c] += gv;
                        dw[d + c] += gv * xd[t * d + c];
                        dx[t * d + c] += gv * wd[d + c];
                        if t > 0 {
                            dw[c] += gv * xd[(t - 1) * d + c];
                            dx[(t - 1) * d + c] += gv * wd[c];
                        }
                        if t + 1 < l {
                            dw[2 * d + c] += gv * xd[(t + 1) * d + c];
                            dx[(t + 1) * d + c] += gv * wd[2 * d + c];
                        }
                    }
                }
                acc(*x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                acc(*w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db).unwrap());
            }
            Op::MaxPool2 { x, argmax } => {
                let tx = val(*x);
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for (o, (&src, &gv)) in argmax.iter().zip(gd).enumerate() {
                    dx.data_mut()[src * d + o % d] += gv;
                }
                acc(*x, dx);
            }
            Op::RepeatRows { x, factor } => {
                let tx = val(*x);
                let d = tx.cols();
                let mut dx = Tensor::zeros(tx.shape());
                for r in 0..g.rows() {
                    let src = r / factor;
                    for c in 0..d {
                        dx.data_mut()[src * d + c] += gd[r * d + c];
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Per-parameter gradients in store order, zero-filled for parameters the loss does not touch.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
