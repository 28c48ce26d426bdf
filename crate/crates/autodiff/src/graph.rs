//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every forward op appends a node holding its output value. Nodes whose
//! inputs need no gradient are recorded as constants, so frozen subgraphs
//! cost nothing on the way back.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::error::{AdError, Result};
use crate::par::ExecMode;
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A per-row vector function with a known Jacobian. Lets model dynamics
/// (pendulum, Lorenz) take part in backprop without being rebuilt from
/// primitive ops.
pub trait RowFunction<T>: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &[T], out: &mut [T]);
    /// Row-major `dim_out × dim_in` Jacobian at `x`.
    fn jacobian(&self, x: &[T], jac: &mut [T]);
}

pub(crate) enum Op<T> {
    Leaf,
    Param { set: u64, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    PassThrough(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Square(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat(Vec<Var>),
    SelectCols { x: Var, idx: Vec<usize> },
    Bmv { k: Var, v: Var },
    RowNormalize { x: Var, eps: T },
    RowMap { x: Var, f: Arc<dyn RowFunction<T>> },
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    exec: ExecMode,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AdError {
    AdError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(ExecMode::default())
    }

    pub fn with_exec(exec: ExecMode) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            exec,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (u64, usize, &[T])> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param { set, index } => self.grads[i].as_deref().map(|g| (set, index, g)),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked; used for inputs under test.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaf(&mut self, t: Tensor<T>, set: u64, index: usize, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Param { set, index },
            requires_grad: trainable,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape (truncated backprop).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&mut self, a: Var, alpha: T, beta: T) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| alpha * x + beta).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine(a, alpha), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Var {
        self.affine(a, alpha, T::zero())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape(), data);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return Err(mismatch("reshape", va.shape(), shape));
        }
        let t = va.clone().reshaped(shape);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::PassThrough(a), rg))
    }

    /// Collapse all trailing dimensions: `[B, ...] → [B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let (b, w) = {
            let v = &self.nodes[a.0].value;
            (v.rows(), v.row_len())
        };
        self.reshape(a, &[b, w])
    }

    /// Map the selected columns of a `[B, d]` tensor into `(-π, π]`. The
    /// gradient is the identity (the wrap is piecewise constant shift).
    pub fn wrap_angles(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 2 || cols.iter().any(|&c| c >= va.shape()[1]) {
            return Err(mismatch("wrap_angles", va.shape(), cols));
        }
        let d = va.shape()[1];
        let mut t = va.clone();
        for row in t.data_mut().chunks_mut(d) {
            for &c in cols {
                row[c] = wrap_angle(row[c]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::PassThrough(a), rg))
    }

    /// `x·wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(mismatch("linear", vx.shape(), vw.shape()));
        }
        let (batch, fan_in, fan_out) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        if let Some(b) = b {
            let vb = &self.nodes[b.0].value;
            if vb.len() != fan_out {
                return Err(mismatch("linear bias", vw.shape(), vb.shape()));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(vb.data());
            }
        }
        T::gemm(
            batch,
            fan_in,
            fan_out,
            T::one(),
            vx.data(),
            fan_in as isize,
            1,
            vw.data(),
            1,
            fan_in as isize,
            T::one(),
            &mut out,
            fan_out as isize,
            1,
        );
        let t = Tensor::new(&[batch, fan_out], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, padding)
            .ok_or_else(|| mismatch("conv2d", vx.shape(), vw.shape()))?;
        let bias = match b {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.len() != geom.out_channels {
                    return Err(mismatch("conv2d bias", vw.shape(), vb.shape()));
                }
                Some(vb.data())
            }
            None => None,
        };
        let out = conv::forward(self.exec, &geom, vx.data(), vw.data(), bias);
        let t = Tensor::new(&geom.out_shape(), out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn bn_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
        if shape.len() < 2 {
            return None;
        }
        Some((shape[0], shape[1], shape[2..].iter().product()))
    }

    /// Batch normalization over channel axis 1 using the statistics of the
    /// current batch. Returns the output and the batch mean/variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let vx = &self.nodes[x.0].value;
        let (b, c, s) = Self::bn_dims(vx.shape()).ok_or_else(|| mismatch("batch_norm", vx.shape(), &[]))?;
        let n = T::from_usize(b * s).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                mean[ci] += vx.data()[off..off + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                var[ci] += vx.data()[off..off + s]
                    .iter()
                    .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (b, c, s) = Self::bn_dims(vx.shape()).ok_or_else(|| mismatch("batch_norm", vx.shape(), &[]))?;
        let (vg, vb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.len() != c || vb.len() != c || mean.len() != c {
            return Err(mismatch("batch_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (g, be, m, is) = (vg.data()[ci], vb.data()[ci], mean[ci], inv_std[ci]);
                for k in off..off + s {
                    let h = (vx.data()[k] - m) * is;
                    xhat[k] = h;
                    out[k] = g * h + be;
                }
            }
        }
        let t = Tensor::new(vx.shape(), out);
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std,
            train,
        };
        Ok(self.push(t, op, rg))
    }

    /// Concatenate `[B, d_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let b = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != b {
                return Err(mismatch("concat", self.nodes[parts[0].0].value.shape(), v.shape()));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[bi * w..(bi + 1) * w]);
            }
        }
        let t = Tensor::new(&[b, total], out);
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Pick columns `idx` of a `[B, d]` tensor.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || idx.iter().any(|&i| i >= vx.shape()[1]) {
            return Err(mismatch("select_cols", vx.shape(), idx));
        }
        let (b, d) = (vx.shape()[0], vx.shape()[1]);
        let mut out = Vec::with_capacity(b * idx.len());
        for bi in 0..b {
            out.extend(idx.iter().map(|&i| vx.data()[bi * d + i]));
        }
        let t = Tensor::new(&[b, idx.len()], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectCols { x, idx: idx.to_vec() }, rg))
    }

    /// Batched matrix-vector product: `k: [B, m·p]` read as row-major `m×p`
    /// blocks, `v: [B, p]`, result `[B, m]`.
    pub fn bmv(&mut self, k: Var, v: Var) -> Result<Var> {
        let (vk, vv) = (&self.nodes[k.0].value, &self.nodes[v.0].value);
        if vk.shape().len() != 2 || vv.shape().len() != 2 || vk.rows() != vv.rows() {
            return Err(mismatch("bmv", vk.shape(), vv.shape()));
        }
        let (b, p) = (vv.shape()[0], vv.shape()[1]);
        if p == 0 || vk.shape()[1] % p != 0 {
            return Err(mismatch("bmv", vk.shape(), vv.shape()));
        }
        let m = vk.shape()[1] / p;
        let mut out = vec![T::zero(); b * m];
        for bi in 0..b {
            let kb = &vk.data()[bi * m * p..(bi + 1) * m * p];
            let vb = &vv.data()[bi * p..(bi + 1) * p];
            for i in 0..m {
                out[bi * m + i] = (0..p).map(|j| kb[i * p + j] * vb[j]).sum();
            }
        }
        let t = Tensor::new(&[b, m], out);
        let rg = self.rg(&[k, v]);
        Ok(self.push(t, Op::Bmv { k, v }, rg))
    }

    /// Row-wise `x / (‖x‖ + eps)` with `‖x‖` appended as an extra column.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 {
            return Err(mismatch("row_normalize", vx.shape(), &[]));
        }
        let (b, d) = (vx.shape()[0], vx.shape()[1]);
        let mut out = Vec::with_capacity(b * (d + 1));
        for row in vx.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let r = n + eps;
            out.extend(row.iter().map(|&v| v / r));
            out.push(n);
        }
        let t = Tensor::new(&[b, d + 1], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowNormalize { x, eps }, rg))
    }

    /// Apply `f` to every row of `x: [B, dim_in]`.
    pub fn row_map(&mut self, x: Var, f: Arc<dyn RowFunction<T>>) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || vx.shape()[1] != f.dim_in() {
            return Err(mismatch("row_map", vx.shape(), &[f.dim_in()]));
        }
        let (b, din, dout) = (vx.rows(), f.dim_in(), f.dim_out());
        let mut out = vec![T::zero(); b * dout];
        for bi in 0..b {
            f.eval(&vx.data()[bi * din..(bi + 1) * din], &mut out[bi * dout..(bi + 1) * dout]);
        }
        let t = Tensor::new(&[b, dout], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowMap { x, f }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Reverse sweep from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AdError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AdError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, contrib),
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops hold only indices and small caches; clone what the match needs
        // so gradient buffers can be mutated below.
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            &Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            &Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.acc(b, &neg);
            }
            &Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().zip(self.nodes[b.0].value.data()).map(|(&x, &y)| x * y).collect();
                let gb: Vec<T> = g.iter().zip(self.nodes[a.0].value.data()).map(|(&x, &y)| x * y).collect();
                self.acc(a, &ga);
                self.acc(b, &gb);
            }
            &Op::Affine(a, alpha) => {
                let ga: Vec<T> = g.iter().map(|&v| v * alpha).collect();
                self.acc(a, &ga);
            }
            &Op::PassThrough(a) => self.acc(a, g),
            &Op::Relu(a) => {
                let out = self.nodes[i].value.data();
                let ga: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(a, &ga);
            }
            &Op::Tanh(a) => {
                let out = self.nodes[i].value.data();
                let ga: Vec<T> = g.iter().zip(out).map(|(&gv, &o)| gv * (T::one() - o * o)).collect();
                self.acc(a, &ga);
            }
            &Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data();
                let ga: Vec<T> = g.iter().zip(out).map(|(&gv, &o)| gv * o * (T::one() - o)).collect();
                self.acc(a, &ga);
            }
            &Op::Sin(a) => {
                let x = self.nodes[a.0].value.data();
                let ga: Vec<T> = g.iter().zip(x).map(|(&gv, &xv)| gv * xv.cos()).collect();
                self.acc(a, &ga);
            }
            &Op::Square(a) => {
                let x = self.nodes[a.0].value.data();
                let two = T::lit(2.0);
                let ga: Vec<T> = g.iter().zip(x).map(|(&gv, &xv)| gv * two * xv).collect();
                self.acc(a, &ga);
            }
            &Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.acc(a, &vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let v = g[0] / T::from_usize(n.max(1)).unwrap();
                self.acc(a, &vec![v; n]);
            }
            &Op::Linear { x, w, b } => self.back_linear(g, x, w, b),
            &Op::Conv2d { x, w, b, geom } => self.back_conv(g, x, w, b, geom),
            Op::BatchNorm { .. } => self.back_bn(i, g),
            Op::Concat(parts) => {
                let parts = parts.clone();
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let b = self.nodes[i].value.rows();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = Vec::with_capacity(b * w);
                    for bi in 0..b {
                        gp.extend_from_slice(&g[bi * total + off..bi * total + off + w]);
                    }
                    self.acc(p, &gp);
                    off += w;
                }
            }
            Op::SelectCols { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let d = self.nodes[x.0].value.shape()[1];
                let k = idx.len();
                self.acc_with(x, |gx| {
                    for (bi, row) in g.chunks(k.max(1)).enumerate() {
                        for (j, &c) in idx.iter().enumerate() {
                            gx[bi * d + c] += row[j];
                        }
                    }
                });
            }
            &Op::Bmv { k, v } => {
                let (vk, vv) = (self.nodes[k.0].value.clone(), self.nodes[v.0].value.clone());
                let (b, p) = (vv.shape()[0], vv.shape()[1]);
                let m = vk.shape()[1] / p;
                let mut gk = vec![T::zero(); vk.len()];
                let mut gv = vec![T::zero(); vv.len()];
                for bi in 0..b {
                    for r in 0..m {
                        let gr = g[bi * m + r];
                        for j in 0..p {
                            gk[bi * m * p + r * p + j] = gr * vv.data()[bi * p + j];
                            gv[bi * p + j] += vk.data()[bi * m * p + r * p + j] * gr;
                        }
                    }
                }
                self.acc(k, &gk);
                self.acc(v, &gv);
            }
            &Op::RowNormalize { x, eps } => {
                let vx = self.nodes[x.0].value.clone();
                let d = vx.shape()[1];
                let mut gx = vec![T::zero(); vx.len()];
                for (bi, row) in vx.data().chunks(d).enumerate() {
                    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let r = n + eps;
                    let gy = &g[bi * (d + 1)..(bi + 1) * (d + 1)];
                    let dot: T = row.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        let mut v = gy[j] / r;
                        if n > T::zero() {
                            v += row[j] / n * (gy[d] - dot / (r * r));
                        }
                        gx[bi * d + j] = v;
                    }
                }
                self.acc(x, &gx);
            }
            Op::RowMap { x, f } => {
                let (x, f) = (*x, Arc::clone(f));
                let vx = self.nodes[x.0].value.clone();
                let (din, dout) = (f.dim_in(), f.dim_out());
                let mut jac = vec![T::zero(); din * dout];
                let mut gx = vec![T::zero(); vx.len()];
                for bi in 0..vx.rows() {
                    f.jacobian(&vx.data()[bi * din..(bi + 1) * din], &mut jac);
                    for o in 0..dout {
                        let gv = g[bi * dout + o];
                        for k in 0..din {
                            gx[bi * din + k] += jac[o * din + k] * gv;
                        }
                    }
                }
                self.acc(x, &gx);
            }
        }
    }

    fn back_linear(&mut self, g: &[T], x: Var, w: Var, b: Option<Var>) {
        let (batch, fan_in) = {
            let s = self.nodes[x.0].value.shape();
            (s[0], s[1])
        };
        let fan_out = self.nodes[w.0].value.shape()[0];
        if self.nodes[x.0].requires_grad {
            let mut gx = vec![T::zero(); batch * fan_in];
            T::gemm(
                batch,
                fan_out,
                fan_in,
                T::one(),
                g,
                fan_out as isize,
                1,
                self.nodes[w.0].value.data(),
                fan_in as isize,
                1,
                T::zero(),
                &mut gx,
                fan_in as isize,
                1,
            );
            self.acc(x, &gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = vec![T::zero(); fan_out * fan_in];
            T::gemm(
                fan_out,
                batch,
                fan_in,
                T::one(),
                g,
                1,
                fan_out as isize,
                self.nodes[x.0].value.data(),
                fan_in as isize,
                1,
                T::zero(),
                &mut gw,
                fan_in as isize,
                1,
            );
            self.acc(w, &gw);
        }
        if let Some(b) = b {
            let mut gb = vec![T::zero(); fan_out];
            for row in g.chunks(fan_out) {
                add_into(&mut gb, row);
            }
            self.acc(b, &gb);
        }
    }

    fn back_conv(&mut self, g: &[T], x: Var, w: Var, b: Option<Var>, geom: ConvGeom) {
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        if need_x || need_w {
            let (gx, gw) = conv::backward(
                self.exec,
                &geom,
                self.nodes[x.0].value.data(),
                self.nodes[w.0].value.data(),
                g,
                need_x,
                need_w,
            );
            if let Some(gx) = gx {
                self.acc(x, &gx);
            }
            if let Some(gw) = gw {
                self.acc(w, &gw);
            }
        }
        if let Some(b) = b {
            let gb = conv::bias_grad(&geom, g);
            self.acc(b, &gb);
        }
    }

    fn back_bn(&mut self, i: usize, g: &[T]) {
        let Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
            train,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let (b, c, s) = Self::bn_dims(self.nodes[x.0].value.shape()).unwrap();
        let xhat = xhat.clone();
        let inv_std = inv_std.clone();
        let gam = self.nodes[gamma.0].value.data().to_vec();
        let mut dg = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for k in off..off + s {
                    dg[ci] += g[k] * xhat[k];
                    db[ci] += g[k];
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            let mut gx = vec![T::zero(); g.len()];
            let n = T::from_usize(b * s).unwrap();
            for ci in 0..c {
                let scale = gam[ci] * inv_std[ci];
                // With batch statistics, mean and variance depend on x.
                let (sum_dxh, sum_dxh_xh) = if train {
                    (db[ci] * gam[ci] / n, dg[ci] * gam[ci] / n)
                } else {
                    (T::zero(), T::zero())
                };
                for bi in 0..b {
                    let off = (bi * c + ci) * s;
                    for k in off..off + s {
                        let dxh = g[k] * gam[ci];
                        gx[k] = if train {
                            inv_std[ci] * (dxh - sum_dxh - xhat[k] * sum_dxh_xh)
                        } else {
                            g[k] * scale
                        };
                    }
                }
            }
            self.acc(x, &gx);
        }
        self.acc(gamma, &dg);
        self.acc(beta, &db);
    }
}

/// Map an angle into `(-π, π]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::lit(2.0 * PI);
    let mut r = a - two_pi * (a / two_pi).round();
    if r <= -T::lit(PI) {
        r += two_pi;
    }
    r
}
