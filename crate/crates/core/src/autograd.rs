//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs never require grad are stored as constants and skipped on the way
//! back, so forward-only evaluation on the same code path stays cheap.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::{
    broadcast, matmul_acc, matmul_at_acc, matmul_bt_acc, rows_cols, Result, Tensor, TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var, usize),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    TimeMix(Var, Arc<Tensor>),
    LayerNorm(Var),
    L2Normalize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }
}

/// Records one forward pass. Single writer; consumed by one `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node {
            value: tensor,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// `a[…×m×k] · b[k×n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rows_cols(av.shape());
        if av.rank() < 2 || bv.rank() != 2 || bv.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() != 3 || bv.rank() != 3 {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        if bv.shape()[0] != batch || bv.shape()[1] != k {
            return Err(bad());
        }
        let n = bv.shape()[2];
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_acc(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast(name, av.shape(), bv.shape())?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let numel: usize = bc.shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match (&bc.lhs, &bc.rhs) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(rm)) => (0..numel).map(|i| f(ad[i], bd[rm.at(i)])).collect(),
            (Some(lm), None) => (0..numel).map(|i| f(ad[lm.at(i)], bd[i])).collect(),
            (Some(lm), Some(rm)) => (0..numel).map(|i| f(ad[lm.at(i)], bd[rm.at(i)])).collect(),
        };
        let value = Tensor::new(bc.shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::Scale(a, c), &[a]))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = match kind {
            Unary::Sigmoid => self.value(a).map(sigmoid),
            Unary::Tanh => self.value(a).map(f64::tanh),
            Unary::Relu => self.value(a).map(|x| x.max(0.0)),
        };
        Ok(self.push(value, Op::Unary(kind, a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = softmax_rows(self.value(a));
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (rows, cols) = rows_cols(av.shape());
        let mut data = av.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::InvalidParameter("concat of zero tensors".into()))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(TensorError::InvalidParameter(format!(
                "slice [{start}, {end}) out of bounds for axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&av.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Mean(a, axis), &[a]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(value, Op::Sum(a), &[a]))
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let shape = av.shape();
        if shape.len() < 2 {
            return Err(TensorError::AxisOutOfRange {
                axis: 1,
                rank: shape.len(),
            });
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = av.numel() / (m * n).max(1);
        let mut data = vec![0.0; av.numel()];
        transpose_blocks(av.data(), &mut data, batch, m, n);
        let mut out_shape = shape.to_vec();
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `x` is `[T×C_in]` or `[B×T×C_in]`, `kernel` is `[k×C_in×C_out]`. Tap `j`
    /// reads `x[t − (k−1−j)·d]`, so the last tap is the current frame and the
    /// sequence is implicitly zero-padded on the left.
    pub fn dilated_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        if dilation == 0 {
            return Err(TensorError::InvalidParameter(
                "dilation must be a positive integer".into(),
            ));
        }
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (batch, t, cin) = seq_dims(xv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: "dilated_conv1d",
            lhs: xv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        })?;
        if kv.rank() != 3 || kv.shape()[1] != cin || kv.shape()[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "dilated_conv1d",
                lhs: xv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let (k, cout) = (kv.shape()[0], kv.shape()[2]);
        let mut out = vec![0.0; batch * t * cout];
        for b in 0..batch {
            let xb = &xv.data()[b * t * cin..(b + 1) * t * cin];
            let ob = &mut out[b * t * cout..(b + 1) * t * cout];
            for j in 0..k {
                let shift = (k - 1 - j) * dilation;
                if shift >= t {
                    continue;
                }
                let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                matmul_acc(&xb[..(t - shift) * cin], kj, &mut ob[shift * cout..], t - shift, cin, cout);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input: x,
                kernel,
                dilation,
            },
            &[x, kernel],
        ))
    }

    /// Applies a constant `[T'×T]` matrix along the time axis of `[T×C]` or
    /// `[B×T×C]`: `y[b] = P · x[b]`.
    pub fn time_mix(&mut self, x: Var, matrix: Arc<Tensor>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mismatch = || TensorError::ShapeMismatch {
            op: "time_mix",
            lhs: xv.shape().to_vec(),
            rhs: matrix.shape().to_vec(),
        };
        let (batch, t, c) = seq_dims(xv.shape()).ok_or_else(mismatch)?;
        if matrix.rank() != 2 || matrix.shape()[1] != t {
            return Err(mismatch());
        }
        let tp = matrix.shape()[0];
        let mut out = vec![0.0; batch * tp * c];
        for b in 0..batch {
            matmul_acc(
                matrix.data(),
                &xv.data()[b * t * c..(b + 1) * t * c],
                &mut out[b * tp * c..(b + 1) * tp * c],
                tp,
                t,
                c,
            );
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = tp;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TimeMix(x, matrix), &[x]))
    }

    /// Normalises the trailing axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (rows, cols) = rows_cols(av.shape());
        let mut data = av.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * inv);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm(a), &[a]))
    }

    /// Scales each trailing-axis slice to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (rows, cols) = rows_cols(av.shape());
        let mut data = av.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let inv = 1.0 / l2_norm(row);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.map.insert(Var(id), t);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = rows_cols(av.shape());
                let n = bv.shape()[1];
                if let Some(ga) = self.grad_slot(grads, a) {
                    matmul_bt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    matmul_at_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if let Some(ga) = self.grad_slot(grads, a) {
                    for i in 0..batch {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for i in 0..batch {
                        matmul_at_acc(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                // Shapes were validated on the way forward.
                let bc = broadcast("backward", av.shape(), bv.shape()).expect("validated shapes");
                let li = |i: usize| bc.lhs.as_ref().map_or(i, |m| m.at(i));
                let ri = |i: usize| bc.rhs.as_ref().map_or(i, |m| m.at(i));
                if let Some(ga) = self.grad_slot(grads, a) {
                    match kind {
                        Binary::Add | Binary::Sub => {
                            for (i, &gi) in g.iter().enumerate() {
                                ga[li(i)] += gi;
                            }
                        }
                        Binary::Mul => {
                            for (i, &gi) in g.iter().enumerate() {
                                ga[li(i)] += gi * bv.data()[ri(i)];
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    match kind {
                        Binary::Add => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[ri(i)] += gi;
                            }
                        }
                        Binary::Sub => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[ri(i)] -= gi;
                            }
                        }
                        Binary::Mul => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[ri(i)] += gi * av.data()[li(i)];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += c * gi;
                    }
                }
            }
            Op::Unary(kind, a) => {
                let input = self.value(a).data();
                if let Some(ga) = self.grad_slot(grads, a) {
                    let y = out.data();
                    for i in 0..g.len() {
                        ga[i] += g[i]
                            * match kind {
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Relu => {
                                    if input[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    let (rows, cols) = rows_cols(out.shape());
                    let y = out.data();
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    let (rows, cols) = rows_cols(out.shape());
                    let y = out.data();
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let total: f64 = g[span.clone()].iter().sum();
                        for i in span {
                            ga[i] += g[i] - y[i].exp() * total;
                        }
                    }
                }
            }
            Op::Concat(ref inputs, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[axis] * inner;
                    if let Some(gv) = self.grad_slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.value(input).shape().to_vec();
                let len = out.shape()[axis];
                if let Some(gi) = self.grad_slot(grads, input) {
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    for o in 0..outer {
                        let dst = o * in_shape[axis] * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in gi[dst..dst + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mean(a, axis) => {
                let shape = self.value(a).shape().to_vec();
                if let Some(ga) = self.grad_slot(grads, a) {
                    let outer: usize = shape[..axis].iter().product();
                    let n = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for (d, &s) in ga[base..base + inner].iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    let s = out.shape();
                    let r = s.len();
                    let (m, n) = (s[r - 2], s[r - 1]);
                    let batch = out.numel() / (m * n).max(1);
                    let mut tmp = vec![0.0; g.len()];
                    transpose_blocks(g, &mut tmp, batch, m, n);
                    for (d, s) in ga.iter_mut().zip(tmp) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => {
                let (xv, kv) = (self.value(input), self.value(kernel));
                let (batch, t, cin) = seq_dims(xv.shape()).expect("validated shapes");
                let (k, cout) = (kv.shape()[0], kv.shape()[2]);
                if let Some(gx) = self.grad_slot(grads, input) {
                    for b in 0..batch {
                        let gb = &g[b * t * cout..(b + 1) * t * cout];
                        let gxb = &mut gx[b * t * cin..(b + 1) * t * cin];
                        for j in 0..k {
                            let shift = (k - 1 - j) * dilation;
                            if shift >= t {
                                continue;
                            }
                            let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                            matmul_bt_acc(&gb[shift * cout..], kj, &mut gxb[..(t - shift) * cin], t - shift, cout, cin);
                        }
                    }
                }
                if let Some(gk) = self.grad_slot(grads, kernel) {
                    for b in 0..batch {
                        let gb = &g[b * t * cout..(b + 1) * t * cout];
                        let xb = &xv.data()[b * t * cin..(b + 1) * t * cin];
                        for j in 0..k {
                            let shift = (k - 1 - j) * dilation;
                            if shift >= t {
                                continue;
                            }
                            matmul_at_acc(
                                &xb[..(t - shift) * cin],
                                &gb[shift * cout..],
                                &mut gk[j * cin * cout..(j + 1) * cin * cout],
                                t - shift,
                                cin,
                                cout,
                            );
                        }
                    }
                }
            }
            Op::TimeMix(x, ref matrix) => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    let (batch, t, c) = seq_dims(self.value(x).shape()).expect("validated shapes");
                    let tp = matrix.shape()[0];
                    for b in 0..batch {
                        matmul_at_acc(
                            matrix.data(),
                            &g[b * tp * c..(b + 1) * tp * c],
                            &mut gx[b * t * c..(b + 1) * t * c],
                            tp,
                            t,
                            c,
                        );
                    }
                }
            }
            Op::LayerNorm(a) => {
                let xv = self.value(a);
                if let Some(ga) = self.grad_slot(grads, a) {
                    let (rows, cols) = rows_cols(out.shape());
                    let y = out.data();
                    let n = cols as f64;
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let x = &xv.data()[span.clone()];
                        let mu = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gm = g[span.clone()].iter().sum::<f64>() / n;
                        let gy = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum::<f64>() / n;
                        for i in span {
                            ga[i] += inv * (g[i] - gm - y[i] * gy);
                        }
                    }
                }
            }
            Op::L2Normalize(a) => {
                let xv = self.value(a);
                if let Some(ga) = self.grad_slot(grads, a) {
                    let (rows, cols) = rows_cols(out.shape());
                    let y = out.data();
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let inv = 1.0 / l2_norm(&xv.data()[span.clone()]);
                        let gy: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            ga[i] += inv * (g[i] - y[i] * gy);
                        }
                    }
                }
            }
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the trailing axis of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = rows_cols(x.shape());
    let mut data = x.data().to_vec();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `(batch, T, C)` for `[T×C]` or `[B×T×C]`.
fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [t, c] => Some((1, t, c)),
        [b, t, c] => Some((b, t, c)),
        _ => None,
    }
}

fn transpose_blocks(src: &[f64], dst: &mut [f64], batch: usize, m: usize, n: usize) {
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
}
