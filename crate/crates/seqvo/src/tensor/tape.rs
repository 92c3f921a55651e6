//! Reverse-mode tape over dense tensors.
//!
//! A `Tape` owns every intermediate value of one forward pass. Ops append
//! nodes in topological order; `backward` replays them in reverse. One
//! forward/backward pass owns one tape exclusively; parallelism happens
//! across independent tapes.

use std::cell::Cell;

use super::kernels;
use super::{pad_shape, Scalar, Tensor};

/// Epsilon guard for division denominators and log arguments.
pub const GUARD_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shapes {0:?} and {1:?} are not broadcast-compatible (singleton expansion only)")]
    Broadcast(Vec<usize>, Vec<usize>),
    #[error("matmul dimension mismatch: {0:?} x {1:?}")]
    MatmulDims(Vec<usize>, Vec<usize>),
    #[error("convolution produced non-positive output dims for input {input:?}, kernel {k}, stride {stride}, pad {pad}")]
    ConvDims { input: Vec<usize>, k: usize, stride: usize, pad: usize },
    #[error("conv2d kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of range on axis {axis} of shape {shape:?}")]
    Slice { axis: usize, start: usize, len: usize, shape: Vec<usize> },
    #[error("concat inputs disagree away from axis {axis}: {a:?} vs {b:?}")]
    Concat { axis: usize, a: Vec<usize>, b: Vec<usize> },
    #[error("reshape from {from:?} to {to:?} changes element count")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("expected shape {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("operation requires a rank-{0} tensor, got shape {1:?}")]
    Rank(usize, Vec<usize>),
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
    Neg,
    Sin,
    Cos,
    Asin,
    PowConst(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Unary { kind: UnaryKind, a: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, bias: Var, stride: usize, pad: usize },
    AvgPool { x: Var, k: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    BilinearSample { src: Var, coords: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    is_leaf_requiring_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
    /// Count of epsilon-guarded log/div/asin evaluations (diagnostics).
    pub clamp_events: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), clamp_events: Cell::new(0) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, is_leaf_requiring_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Gradients accumulate into it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            is_leaf_requiring_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A [1]-shaped constant.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a [1]-shaped node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0].to_f64()
    }

    /// Gradient of `v` after `backward`; zeros if never touched.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        if self.grads.is_empty() {
            return Tensor::zeros(self.nodes[v.0].value.shape().to_vec());
        }
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), self.grads[v.0].clone())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }
    /// Division with the denominator guarded away from zero by 1e-12.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }
    /// Elementwise atan2(y, x).
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Atan2, y, x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    /// Natural log; non-positive arguments clamp to 1e-12 and bump the
    /// diagnostics counter.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Cos, a)
    }
    pub fn asin(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Asin, a)
    }
    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        self.unary(UnaryKind::PowConst(e), a)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let guard = T::from_f64(GUARD_EPS);
        let na = &self.nodes[a.0];
        let clamp = &self.clamp_events;
        let value = match kind {
            UnaryKind::Relu => na.value.map(|x| if x > T::zero() { x } else { T::zero() }),
            UnaryKind::Sigmoid => na.value.map(|x| T::one() / (T::one() + (-x).exp())),
            UnaryKind::Tanh => na.value.map(|x| x.tanh()),
            UnaryKind::Exp => na.value.map(|x| x.exp()),
            UnaryKind::Log => na.value.map(|x| {
                if x < guard {
                    clamp.set(clamp.get() + 1);
                    guard.ln()
                } else {
                    x.ln()
                }
            }),
            UnaryKind::Abs => na.value.map(|x| x.abs()),
            UnaryKind::Neg => na.value.map(|x| -x),
            UnaryKind::Sin => na.value.map(|x| x.sin()),
            UnaryKind::Cos => na.value.map(|x| x.cos()),
            UnaryKind::Asin => na.value.map(|x| {
                let lim = T::one() - guard;
                if x > lim || x < -lim {
                    clamp.set(clamp.get() + 1);
                    x.max(-lim).min(lim).asin()
                } else {
                    x.asin()
                }
            }),
            UnaryKind::PowConst(e) => {
                let e = T::from_f64(e);
                na.value.map(|x| x.powf(e))
            }
        };
        let needs = na.needs_grad;
        self.push(value, Op::Unary { kind, a }, needs)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ea = expand_to(&self.nodes[a.0].value, &out_shape);
        let eb = expand_to(&self.nodes[b.0].value, &out_shape);
        let guard = T::from_f64(GUARD_EPS);
        let clamp = &self.clamp_events;
        let data: Vec<T> = match kind {
            BinaryKind::Add => ea.iter().zip(&eb).map(|(&x, &y)| x + y).collect(),
            BinaryKind::Sub => ea.iter().zip(&eb).map(|(&x, &y)| x - y).collect(),
            BinaryKind::Mul => ea.iter().zip(&eb).map(|(&x, &y)| x * y).collect(),
            BinaryKind::Div => ea
                .iter()
                .zip(&eb)
                .map(|(&x, &y)| {
                    let d = guard_denom(y, guard);
                    if d != y {
                        clamp.set(clamp.get() + 1);
                    }
                    x / d
                })
                .collect(),
            BinaryKind::Atan2 => ea.iter().zip(&eb).map(|(&y, &x)| y.atan2(x)).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data), Op::Binary { kind, a, b }, needs))
    }

    // ---- linear algebra and structure -----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::MatmulDims(sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data), Op::Matmul { a, b }, needs))
    }

    /// Cross-correlation x[B,C,H,W] with w[F,C,k,k] and bias[F], odd k.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank(4, sx));
        }
        if sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[1] {
            return Err(TensorError::Shape { expected: vec![0, sx[1], 0, 0], got: sw });
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel(k));
        }
        let (b, c, h, wd, f) = (sx[0], sx[1], sx[2], sx[3], sw[0]);
        let oh = kernels::conv_out_dim(h, k, stride, pad).filter(|&d| d > 0);
        let ow = kernels::conv_out_dim(wd, k, stride, pad).filter(|&d| d > 0);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(bo)) => (a, bo),
            _ => return Err(TensorError::ConvDims { input: sx, k, stride, pad }),
        };
        let data = kernels::conv2d_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            Some(self.nodes[bias.0].value.data()),
            b,
            c,
            h,
            wd,
            f,
            k,
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![b, f, oh, ow], data), Op::Conv2d { x, w, bias, stride, pad }, needs))
    }

    /// Transposed convolution, the adjoint of conv2d: x[B,Cin,H,W] with
    /// w[Cin,Cout,k,k] and bias[Cout].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank(4, sx));
        }
        if sw.len() != 4 || sw[2] != sw[3] || sw[0] != sx[1] {
            return Err(TensorError::Shape { expected: vec![sx[1], 0, 0, 0], got: sw });
        }
        let k = sw[2];
        let (b, cin, h, wd, cout) = (sx[0], sx[1], sx[2], sx[3], sw[1]);
        let oh = kernels::convt_out_dim(h, k, stride, pad).filter(|&d| d > 0);
        let ow = kernels::convt_out_dim(wd, k, stride, pad).filter(|&d| d > 0);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(bo)) => (a, bo),
            _ => return Err(TensorError::ConvDims { input: sx, k, stride, pad }),
        };
        let data = kernels::convt2d_fwd(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            Some(self.nodes[bias.0].value.data()),
            b,
            cin,
            h,
            wd,
            cout,
            k,
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![b, cout, oh, ow], data), Op::ConvT2d { x, w, bias, stride, pad }, needs))
    }

    /// k x k box average, stride 1, valid padding.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank(4, sx));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h < k || w < k {
            return Err(TensorError::ConvDims { input: sx, k, stride: 1, pad: 0 });
        }
        let data = kernels::avg_pool_fwd(self.nodes[x.0].value.data(), b, c, h, w, k);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, c, h - k + 1, w - k + 1], data), Op::AvgPool { x, k }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc / T::from_f64(n as f64)), Op::MeanAll { x }, needs)
    }

    /// Sum over one axis, keeping it as a singleton dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis, keeping it as a singleton dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, shape });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let (outer, mid, inner) = split3(&shape, axis);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + data[base + i];
                }
            }
        }
        if mean {
            let inv = T::from_f64(1.0 / mid as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        let needs = self.needs(x);
        let op = if mean { Op::MeanAxis { x, axis } } else { Op::SumAxis { x, axis } };
        Ok(self.push(Tensor::new(out_shape, out), op, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        assert!(!xs.is_empty());
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis { axis, shape: first });
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::Concat { axis, a: first, b: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split3(&out_shape, axis);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &v in xs {
            let s = self.nodes[v.0].value.shape();
            let mid = s[axis];
            let data = self.nodes[v.0].value.data();
            for o in 0..outer {
                let src = o * mid * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + mid * inner].copy_from_slice(&data[src..src + mid * inner]);
            }
            offset += mid;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(out_shape, out), Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, shape });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::Slice { axis, start, len, shape });
        }
        let (outer, mid, inner) = split3(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out), Op::Slice { x, axis, start, len }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let from = self.nodes[x.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != self.nodes[x.0].value.numel() {
            return Err(TensorError::Reshape { from, to: shape });
        }
        let value = self.nodes[x.0].value.reshaped(shape);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// [B,C,H,W] -> [B,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Rank(4, shape));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * h * w;
            let mut acc = T::zero();
            for &v in &data[base..base + h * w] {
                acc = acc + v;
            }
            *o = acc * inv;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![b, c], out), Op::GlobalAvgPool { x }, needs))
    }

    /// Bilinear sampling of src[B,C,H,W] at coords[B,2,Hc,Wc]; out-of-bounds
    /// samples read 0. Gradients flow to both src and coords.
    pub fn bilinear_sample(&mut self, src: Var, coords: Var) -> Result<Var, TensorError> {
        let ss = self.nodes[src.0].value.shape().to_vec();
        let sc = self.nodes[coords.0].value.shape().to_vec();
        if ss.len() != 4 {
            return Err(TensorError::Rank(4, ss));
        }
        if sc.len() != 4 || sc[1] != 2 || sc[0] != ss[0] {
            return Err(TensorError::Shape { expected: vec![ss[0], 2, 0, 0], got: sc });
        }
        let (b, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let (hc, wc) = (sc[2], sc[3]);
        let data = kernels::bilinear_fwd(
            self.nodes[src.0].value.data(),
            self.nodes[coords.0].value.data(),
            b,
            c,
            h,
            w,
            hc,
            wc,
        );
        let needs = self.needs(src) || self.needs(coords);
        Ok(self.push(Tensor::new(vec![b, c, hc, wc], data), Op::BilinearSample { src, coords }, needs))
    }

    /// Expands `x` to `shape` by broadcasting singleton dims (adds a zero
    /// tensor of the target shape, so no dedicated op is needed).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let zeros = self.constant(Tensor::zeros(shape.to_vec()));
        self.add(x, zeros)
    }

    // ---- backward --------------------------------------------------------

    /// Replays backward rules in reverse order. The root is seeded with ones
    /// of its own shape. Grads reset on every call, so repeated backward
    /// passes are bitwise identical.
    pub fn backward(&mut self, root: Var) {
        self.grads = self.nodes.iter().map(|n| vec![T::zero(); n.value.numel()]).collect();
        for g in &mut self.grads[root.0] {
            *g = T::one();
        }
        let guard = T::from_f64(GUARD_EPS);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // take this node's grad out to appease the borrow checker
            let g = std::mem::take(&mut self.grads[i]);
            self.apply_backward(i, &g, guard);
            self.grads[i] = g;
        }
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = &mut self.grads[v.0];
        for (a, &b) in g.iter_mut().zip(contrib) {
            *a = *a + b;
        }
    }

    fn accumulate_reduced(&mut self, v: Var, full: &[T], full_shape: &[usize]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let target = self.nodes[v.0].value.shape().to_vec();
        let reduced = reduce_to_shape(full, full_shape, &target);
        self.accumulate(v, &reduced);
    }

    fn apply_backward(&mut self, i: usize, g: &[T], guard: T) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let x = self.nodes[a.0].value.data();
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); x.len()];
                match kind {
                    UnaryKind::Relu => {
                        for j in 0..x.len() {
                            da[j] = if x[j] > T::zero() { g[j] } else { T::zero() };
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for j in 0..x.len() {
                            da[j] = g[j] * y[j] * (T::one() - y[j]);
                        }
                    }
                    UnaryKind::Tanh => {
                        for j in 0..x.len() {
                            da[j] = g[j] * (T::one() - y[j] * y[j]);
                        }
                    }
                    UnaryKind::Exp => {
                        for j in 0..x.len() {
                            da[j] = g[j] * y[j];
                        }
                    }
                    UnaryKind::Log => {
                        for j in 0..x.len() {
                            da[j] = g[j] / x[j].max(guard);
                        }
                    }
                    UnaryKind::Abs => {
                        for j in 0..x.len() {
                            da[j] = if x[j] > T::zero() {
                                g[j]
                            } else if x[j] < T::zero() {
                                -g[j]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    UnaryKind::Neg => {
                        for j in 0..x.len() {
                            da[j] = -g[j];
                        }
                    }
                    UnaryKind::Sin => {
                        for j in 0..x.len() {
                            da[j] = g[j] * x[j].cos();
                        }
                    }
                    UnaryKind::Cos => {
                        for j in 0..x.len() {
                            da[j] = -g[j] * x[j].sin();
                        }
                    }
                    UnaryKind::Asin => {
                        let lim = T::one() - guard;
                        for j in 0..x.len() {
                            let xc = x[j].max(-lim).min(lim);
                            da[j] = g[j] / (T::one() - xc * xc).sqrt();
                        }
                    }
                    UnaryKind::PowConst(e) => {
                        let ef = T::from_f64(e);
                        let em1 = T::from_f64(e - 1.0);
                        for j in 0..x.len() {
                            da[j] = g[j] * ef * x[j].powf(em1);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Binary { kind, a, b } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let ea = expand_to(&self.nodes[a.0].value, &out_shape);
                let eb = expand_to(&self.nodes[b.0].value, &out_shape);
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                match kind {
                    BinaryKind::Add => {
                        da.copy_from_slice(g);
                        db.copy_from_slice(g);
                    }
                    BinaryKind::Sub => {
                        da.copy_from_slice(g);
                        for j in 0..g.len() {
                            db[j] = -g[j];
                        }
                    }
                    BinaryKind::Mul => {
                        for j in 0..g.len() {
                            da[j] = g[j] * eb[j];
                            db[j] = g[j] * ea[j];
                        }
                    }
                    BinaryKind::Div => {
                        for j in 0..g.len() {
                            let d = guard_denom(eb[j], guard);
                            da[j] = g[j] / d;
                            db[j] = -g[j] * ea[j] / (d * d);
                        }
                    }
                    BinaryKind::Atan2 => {
                        for j in 0..g.len() {
                            let denom = (ea[j] * ea[j] + eb[j] * eb[j]).max(guard);
                            da[j] = g[j] * eb[j] / denom;
                            db[j] = -g[j] * ea[j] / denom;
                        }
                    }
                }
                self.accumulate_reduced(a, &da, &out_shape);
                self.accumulate_reduced(b, &db, &out_shape);
            }
            Op::Matmul { a, b } => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let at = transpose2d(self.nodes[a.0].value.data(), m, k);
                let bt = transpose2d(self.nodes[b.0].value.data(), k, n);
                let da = kernels::matmul(g, &bt, m, n, k);
                let db = kernels::matmul(&at, g, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let so = self.nodes[i].value.shape().to_vec();
                let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, k) = (sw[0], sw[2]);
                if self.nodes[x.0].needs_grad {
                    // adjoint: scatter dout through the weights
                    let dx =
                        kernels::convt2d_fwd(g, self.nodes[w.0].value.data(), None, b, f, so[2], so[3], c, k, stride, pad);
                    debug_assert_eq!(dx.len(), b * c * h * wd);
                    self.accumulate(x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::conv2d_dw(g, self.nodes[x.0].value.data(), b, c, h, wd, f, k, stride, pad);
                    self.accumulate(w, &dw);
                }
                if self.nodes[bias.0].needs_grad {
                    let db = kernels::channel_sums(g, b, f, so[2] * so[3]);
                    self.accumulate(bias, &db);
                }
            }
            Op::ConvT2d { x, w, bias, stride, pad } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let so = self.nodes[i].value.shape().to_vec();
                let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, k) = (sw[1], sw[2]);
                if self.nodes[x.0].needs_grad {
                    // adjoint: gather dout with the same weights
                    let dx =
                        kernels::conv2d_fwd(g, self.nodes[w.0].value.data(), None, b, cout, so[2], so[3], cin, k, stride, pad);
                    debug_assert_eq!(dx.len(), b * cin * h * wd);
                    self.accumulate(x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::convt2d_dw(g, self.nodes[x.0].value.data(), b, cin, h, wd, cout, k, stride, pad);
                    self.accumulate(w, &dw);
                }
                if self.nodes[bias.0].needs_grad {
                    let db = kernels::channel_sums(g, b, cout, so[2] * so[3]);
                    self.accumulate(bias, &db);
                }
            }
            Op::AvgPool { x, k } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let dx = kernels::avg_pool_bwd(g, sx[0], sx[1], sx[2], sx[3], k);
                self.accumulate(x, &dx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(x, &vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(x, &vec![v; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, mid, inner) = split3(&shape, axis);
                let scale = match self.nodes[i].op {
                    Op::MeanAxis { .. } => T::from_f64(1.0 / mid as f64),
                    _ => T::one(),
                };
                let mut dx = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = (o * mid + m) * inner;
                        let src = o * inner;
                        for j in 0..inner {
                            dx[dst + j] = g[src + j] * scale;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split3(&out_shape, axis);
                let mut offset = 0;
                for v in xs {
                    let s = self.nodes[v.0].value.shape().to_vec();
                    let mid = s[axis];
                    if self.nodes[v.0].needs_grad {
                        let mut dv = vec![T::zero(); outer * mid * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * mid * inner;
                            dv[dst..dst + mid * inner].copy_from_slice(&g[src..src + mid * inner]);
                        }
                        self.accumulate(v, &dv);
                    }
                    offset += mid;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, mid, inner) = split3(&shape, axis);
                let mut dx = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, g);
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![T::zero(); shape.iter().product()];
                for (bc, &gv) in g.iter().enumerate() {
                    let base = bc * h * w;
                    let v = gv * inv;
                    for d in &mut dx[base..base + h * w] {
                        *d = v;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::BilinearSample { src, coords } => {
                let ss = self.nodes[src.0].value.shape().to_vec();
                let sc = self.nodes[coords.0].value.shape().to_vec();
                let (dsrc, dcoords) = kernels::bilinear_bwd(
                    g,
                    self.nodes[src.0].value.data(),
                    self.nodes[coords.0].value.data(),
                    ss[0],
                    ss[1],
                    ss[2],
                    ss[3],
                    sc[2],
                    sc[3],
                );
                self.accumulate(src, &dsrc);
                self.accumulate(coords, &dcoords);
            }
        }
    }
}

fn guard_denom<T: Scalar>(y: T, guard: T) -> T {
    if y.abs() >= guard {
        y
    } else if y < T::zero() {
        -guard
    } else {
        guard
    }
}

fn transpose2d<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// outer * shape[axis] * inner decomposition around `axis`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let ndim = a.len().max(b.len());
    let pa = pad_shape(a, ndim);
    let pb = pad_shape(b, ndim);
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        out[i] = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::Broadcast(a.to_vec(), b.to_vec())),
        };
    }
    Ok(out)
}

/// Materializes `t` broadcast to `out_shape`.
fn expand_to<T: Scalar>(t: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let ndim = out_shape.len();
    let padded = pad_shape(t.shape(), ndim);
    let n: usize = out_shape.iter().product();
    let mut strides = vec![0usize; ndim];
    let mut s = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    let data = t.data();
    let mut out = vec![T::zero(); n];
    let mut coords = vec![0usize; ndim];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..ndim {
            src += coords[d] * strides[d];
        }
        *o = data[src];
    }
    out
}

/// Sums `full` (of `full_shape`) down to `target_shape` over broadcast dims.
fn reduce_to_shape<T: Scalar>(full: &[T], full_shape: &[usize], target_shape: &[usize]) -> Vec<T> {
    if full_shape == target_shape {
        return full.to_vec();
    }
    let ndim = full_shape.len();
    let padded = pad_shape(target_shape, ndim);
    let tn: usize = target_shape.iter().product();
    let mut strides = vec![0usize; ndim];
    let mut s = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    let mut out = vec![T::zero(); tn];
    let mut coords = vec![0usize; ndim];
    for (flat, &v) in full.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % full_shape[d];
            rem /= full_shape[d];
        }
        let mut dst = 0;
        for d in 0..ndim {
            dst += coords[d] * strides[d];
        }
        out[dst] = out[dst] + v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // d/dx sum(x*x) = 2x at x=[1,2,3]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert_close(&tape.grad(x).to_f64_vec(), &[2.0, 4.0, 6.0], 1e-12);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        tape.backward(y);
        assert!((tape.grad(x).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_and_hand() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(Tensor::new(vec![3, 1], vec![4., 5., 6.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 5., 6.]);

        let a = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn mean_reduction_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![2.0, 4.0, 6.0]), true);
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m).data()[0], 4.0);
        tape.backward(m);
        assert_close(&tape.grad(x).to_f64_vec(), &[1.0 / 3.0; 3], 1e-15);
    }

    #[test]
    fn concat_shapes_and_grad_slicing() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full(vec![2, 3], 1.0), true);
        let b = tape.leaf(Tensor::full(vec![2, 5], 2.0), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 8]);
        let w = tape.constant(Tensor::new(vec![2, 8], (0..16).map(|i| i as f64).collect()));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s);
        assert_eq!(tape.grad(a).data(), &[0., 1., 2., 8., 9., 10.]);
        assert_eq!(tape.grad(b).shape(), &[2, 5]);
    }

    #[test]
    fn global_avg_pool_constant_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 4, 4], 7.0));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_close(tape.value(y).data(), &[7.0, 7.0], 1e-12);
    }

    #[test]
    fn broadcast_add_and_reduce_back() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![3.0]), true);
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]), true);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s);
        assert_eq!(tape.grad(a).data(), &[10.0]);
        assert_eq!(tape.grad(b).data(), &[3.0; 4]);
    }

    #[test]
    fn broadcast_incompatible_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Broadcast(_, _))));
    }

    #[test]
    fn log_guard_counts_clamp_events() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 1.0]));
        let y = tape.log(x);
        assert_eq!(tape.clamp_events.get(), 1);
        assert!((tape.value(y).data()[0] - GUARD_EPS.ln()).abs() < 1e-9);
        assert_eq!(tape.value(y).data()[1], 0.0);
    }

    #[test]
    fn requires_grad_false_stays_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), false);
        let y = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]), true);
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s);
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic_bitwise() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![0.3, -0.7, 1.9, 0.01]), true);
        let y = tape.sigmoid(x);
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum_all(z);
        tape.backward(s);
        let g1 = tape.grad(x).data().to_vec();
        tape.backward(s);
        let g2 = tape.grad(x).data().to_vec();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(TensorError::EvenKernel(2))));
    }

    #[test]
    fn conv_nonpositive_output_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(TensorError::ConvDims { .. })));
    }

    #[test]
    fn bilinear_identity_grid_exact() {
        let mut tape = Tape::<f64>::new();
        let (h, w) = (3usize, 4usize);
        let src = tape.constant(Tensor::new(vec![1, 1, h, w], (0..h * w).map(|i| i as f64 * 0.5).collect()));
        let mut cdata = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                cdata[y * w + x] = x as f64;
                cdata[h * w + y * w + x] = y as f64;
            }
        }
        let coords = tape.constant(Tensor::new(vec![1, 2, h, w], cdata));
        let out = tape.bilinear_sample(src, coords).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(src).data());
    }
}
