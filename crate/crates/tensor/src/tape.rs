//! Reverse-mode differentiation tape.
//!
//! Every primitive evaluates eagerly, stores its output on the tape and
//! remembers what it needs for the backward pass. Nodes are appended in
//! execution order, so walking the tape backwards is a valid reverse
//! topological order and each node is visited once.

use std::cell::{Ref, RefCell};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, split_axis, strides, Tensor,
};

type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule of a custom unary op: `(input, output, output_grad) -> input_grad`.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T>>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Padding mode of [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k/2` so that odd kernels keep the spatial size.
    Same,
    /// No padding.
    Valid,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        pad: (usize, usize),
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Sqrt(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: usize,
        scale: T,
    },
    SumAll {
        x: Var,
        scale: T,
    },
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Custom {
        x: Var,
        backward: CustomBackward<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            Embedding { table, .. } => vec![*table],
            Concat { inputs, .. } => inputs.clone(),
            Scale(x, _) | AddScalar(x) | Relu(x) | Sigmoid(x) | Tanh(x) | Exp(x) | Ln(x)
            | Sin(x) | Sqrt(x) | Reshape(x) => vec![*x],
            MaxPool2d { x, .. }
            | Clamp { x, .. }
            | Softmax { x, .. }
            | Sum { x, .. }
            | SumAll { x, .. }
            | Transpose { x, .. }
            | Slice { x, .. }
            | LayerNorm { x, .. }
            | Custom { x, .. } => vec![*x],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward pass.
///
/// ```
/// use sonotag_tensor::{Tape, Tensor};
///
/// let tape = Tape::<f64>::new();
/// let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
/// let sq = tape.mul(x, x).unwrap();
/// let loss = tape.sum_all(sq);
/// let grads = tape.backward(loss).unwrap();
/// assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
/// ```
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        // saved activations are only needed when a gradient will flow
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    // ---------------------------------------------------------------------
    // elementwise binary ops with broadcasting

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            return Tensor::new(x.shape().to_vec(), data);
        }
        let out = broadcast_shape(x.shape(), y.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        })?;
        let sa = broadcast_strides(x.shape(), &out);
        let sb = broadcast_strides(y.shape(), &out);
        let mut data = vec![T::zero(); out.iter().product()];
        let (xd, yd) = (x.data(), y.data());
        for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(xd[i], yd[j]));
        Tensor::new(out, data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |p, q| p / q)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// `c·x` for a constant `c`.
    pub fn scale(&self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|p| p * c);
        self.push(v, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|p| p + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// Matrix product of `[m,k]×[k,n]`, or batched `[b,m,k]×[b,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            };
            let (batch, m, k, n) = match (x.shape(), y.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
                (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n),
                _ => return Err(mismatch()),
            };
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &x.data()[i * m * k..],
                    false,
                    &y.data()[i * k * n..],
                    false,
                    T::zero(),
                    &mut out[i * m * n..],
                );
            }
            let shape = if x.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
            Tensor::new(shape, out)?
        };
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// 2-D cross-correlation, stride 1.
    ///
    /// `x` is `[N,C,H,W]` or `[C,H,W]`, `w` is `[O,C,kh,kw]`. Implemented as
    /// an explicit patch matrix times the flattened kernel.
    pub fn conv2d(&self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (value, pad, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let mismatch = || TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            };
            let (batch, c, h, wd) = match xv.shape() {
                &[n, c, h, w] => (n, c, h, w),
                &[c, h, w] => (1, c, h, w),
                _ => return Err(mismatch()),
            };
            let &[o, c2, kh, kw] = wv.shape() else {
                return Err(mismatch());
            };
            if c != c2 {
                return Err(mismatch());
            }
            let pad = match padding {
                Padding::Same => (kh / 2, kw / 2),
                Padding::Valid => (0, 0),
            };
            if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
                return Err(mismatch());
            }
            let geo = ConvGeometry::new(c, h, wd, kh, kw, pad);
            let (k, p) = (geo.rows(), geo.positions());
            let mut cols = vec![T::zero(); batch * k * p];
            let mut out = vec![T::zero(); batch * o * p];
            for n in 0..batch {
                let cn = &mut cols[n * k * p..(n + 1) * k * p];
                geo.im2col(&xv.data()[n * c * h * wd..(n + 1) * c * h * wd], cn);
                T::gemm(
                    o,
                    k,
                    p,
                    T::one(),
                    wv.data(),
                    false,
                    cn,
                    false,
                    T::zero(),
                    &mut out[n * o * p..],
                );
            }
            let shape = if xv.rank() == 4 {
                vec![batch, o, geo.out_h, geo.out_w]
            } else {
                vec![o, geo.out_h, geo.out_w]
            };
            (Tensor::new(shape, out)?, pad, cols)
        };
        Ok(self.push(value, Op::Conv2d { x, w, pad, cols }))
    }

    /// Non-overlapping max pooling over the last two axes with
    /// `stride = kernel`; trailing rows/columns that do not fill a window
    /// are dropped.
    pub fn max_pool2d(&self, x: Var, kernel: (usize, usize)) -> Result<Var> {
        let (value, argmax) = {
            let xv = self.value(x);
            let r = xv.rank();
            if r < 2 || kernel.0 == 0 || kernel.1 == 0 {
                return Err(TensorError::InvalidShape {
                    op: "max_pool2d",
                    shape: xv.shape().to_vec(),
                    reason: "need rank ≥ 2 and a nonzero kernel".into(),
                });
            }
            let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
            let (oh, ow) = (h / kernel.0, w / kernel.1);
            if oh == 0 || ow == 0 {
                return Err(TensorError::InvalidShape {
                    op: "max_pool2d",
                    shape: xv.shape().to_vec(),
                    reason: format!("kernel {kernel:?} larger than input"),
                });
            }
            let planes = xv.len() / (h * w);
            let mut out = Vec::with_capacity(planes * oh * ow);
            let mut argmax = Vec::with_capacity(planes * oh * ow);
            let d = xv.data();
            for pl in 0..planes {
                let base = pl * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * kernel.0 * w + ox * kernel.1;
                        for ky in 0..kernel.0 {
                            let row = base + (oy * kernel.0 + ky) * w + ox * kernel.1;
                            for i in row..row + kernel.1 {
                                if d[i] > d[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(d[best]);
                        argmax.push(best);
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            shape[r - 2] = oh;
            shape[r - 1] = ow;
            (Tensor::new(shape, out)?, argmax)
        };
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    // ---------------------------------------------------------------------
    // elementwise unary ops

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |p| if p > T::zero() { p } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |p| p.tanh(), Op::Tanh(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |p| p.exp(), Op::Exp(x))
    }

    /// Natural logarithm.
    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |p| p.ln(), Op::Ln(x))
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, |p| p.sin(), Op::Sin(x))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |p| p.sqrt(), Op::Sqrt(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |p| p.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// A unary op with caller-supplied forward and backward rules.
    pub fn custom_unary(
        &self,
        x: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        let v = forward(&self.value(x));
        self.push(v, Op::Custom { x, backward })
    }

    // ---------------------------------------------------------------------
    // reductions and normalisation

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        Ok(shape)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(x, axis, "softmax")?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..n {
                    max = max.max(out[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..n {
                    let e = (out[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    out[at(a)] /= total;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    fn reduce_axis(&self, x: Var, axis: usize, op: &'static str, mean: bool) -> Result<Var> {
        let mut shape = self.check_axis(x, axis, op)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let scale = if mean { T::one() / T::of(n as f64) } else { T::one() };
        let mut out = vec![T::zero(); outer * inner];
        {
            let xv = self.value(x);
            let d = xv.data();
            for o in 0..outer {
                for a in 0..n {
                    let src = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
                    for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|p| *p *= scale);
        }
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Sum { x, axis, scale }))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, "sum", false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, "mean", true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll { x, scale: T::one() })
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&self, x: Var) -> Var {
        let (s, n) = {
            let v = self.value(x);
            (v.sum(), v.len())
        };
        let scale = T::one() / T::of(n.max(1) as f64);
        self.push(Tensor::scalar(s * scale), Op::SumAll { x, scale })
    }

    /// Normalises each row along the last axis to zero mean and unit
    /// variance: `(x − μ) / √(σ² + eps)`. No affine transform.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let Some(&d) = shape.last() else {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape,
                reason: "rank 0".into(),
            });
        };
        if d == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let rows = shape.iter().product::<usize>() / d;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.chunks_mut(d) {
            let mean = row.iter().map(|p| p.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|p| (p.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for p in row.iter_mut() {
                *p = T::of((p.f64() - mean) * inv);
            }
            inv_std.push(T::of(inv));
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::LayerNorm { x, inv_std }))
    }

    // ---------------------------------------------------------------------
    // shape manipulation

    /// Permutes axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = {
            let xv = self.value(x);
            let mut seen = vec![false; xv.rank()];
            let valid = perm.len() == xv.rank()
                && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::InvalidShape {
                    op: "transpose",
                    shape: xv.shape().to_vec(),
                    reason: format!("bad permutation {perm:?}"),
                });
            }
            permute(&xv, perm)
        };
        Ok(self.push(v, Op::Transpose {
            x,
            perm: perm.to_vec(),
        }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let first = inputs
                .first()
                .map(|v| nodes[v.0].value.shape().to_vec())
                .ok_or(TensorError::EmptyAxis { op: "concat" })?;
            if axis >= first.len() {
                return Err(TensorError::InvalidAxis {
                    op: "concat",
                    axis,
                    rank: first.len(),
                });
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        Ok(self.push(v, Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        }))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(TensorError::InvalidAxis {
                    op: "slice",
                    axis,
                    rank: xv.rank(),
                });
            }
            if start > end || end > xv.shape()[axis] {
                return Err(TensorError::InvalidShape {
                    op: "slice",
                    shape: xv.shape().to_vec(),
                    reason: format!("range {start}..{end} on axis {axis}"),
                });
            }
            let (outer, n, inner) = split_axis(xv.shape(), axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, out)?
        };
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Gathers rows of a `[V,d]` table: output is `[indices.len(), d]`.
    pub fn embedding_lookup(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let v = {
            let t = self.value(table);
            let &[rows, d] = t.shape() else {
                return Err(TensorError::InvalidShape {
                    op: "embedding_lookup",
                    shape: t.shape().to_vec(),
                    reason: "table must be rank 2".into(),
                });
            };
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::IndexOutOfRange { index: i, rows });
                }
                out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new([indices.len(), d], out)?
        };
        Ok(self.push(v, Op::Embedding {
            table,
            indices: indices.to_vec(),
        }))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Propagates gradients of the scalar `loss` to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape.to_vec()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[inline]
fn sigmoid<T: Scalar>(p: T) -> T {
    if p >= T::zero() {
        T::one() / (T::one() + (-p).exp())
    } else {
        let e = p.exp();
        e / (T::one() + e)
    }
}

fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let sa: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; perm.len()];
    let mut out = vec![T::zero(); x.len()];
    let d = x.data();
    for_each_broadcast(&out_shape, &sa, &zeros, |o, i, _| out[o] = d[i]);
    Tensor::new(out_shape, out).expect("permutation preserves length")
}

/// Im2col bookkeeping for one sample of a stride-1 convolution.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: (usize, usize),
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: (usize, usize)) -> Self {
        Self {
            c,
            h,
            w,
            kh,
            kw,
            pad,
            out_h: h + 2 * pad.0 + 1 - kh,
            out_w: w + 2 * pad.1 + 1 - kw,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits each (patch row, output row) pair with the valid column span:
    /// `f(col_offset, input_offset, len)`.
    fn spans(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    // output columns ox whose input column ox + kx - pad lies in [0, w)
                    let lo = self.pad.1.saturating_sub(kx);
                    let hi = (self.w + self.pad.1).saturating_sub(kx).min(self.out_w);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = oy + ky;
                        if iy < self.pad.0 || iy - self.pad.0 >= self.h {
                            continue;
                        }
                        let iy = iy - self.pad.0;
                        let ix = lo + kx - self.pad.1;
                        f(r * p + oy * self.out_w + lo, (ci * self.h + iy) * self.w + ix, hi - lo);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        self.spans(|dst, src, len| cols[dst..dst + len].copy_from_slice(&x[src..src + len]));
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        self.spans(|src, dst, len| {
            for (g, &c) in gx[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                *g += c;
            }
        });
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf; zeros when the leaf did not participate.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sums a broadcast-shaped gradient back into `shape`.
fn unbroadcast<T: Scalar>(
    g: &Tensor<T>,
    shape: &[usize],
    factor: impl Fn(usize) -> T,
) -> Tensor<T> {
    let out = g.shape();
    let sa = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(out, &sa, &zeros, |o, i, _| acc[i] += gd[o] * factor(o));
    Tensor::new(shape.to_vec(), acc).expect("unbroadcast shape")
}

/// Gradient of a binary broadcast op with respect to one operand:
/// `Σ g[o]·∂f/∂operand(o)` reduced onto the operand's shape.
fn binary_grad<T: Scalar>(
    g: &Tensor<T>,
    operand: &[usize],
    a: &Tensor<T>,
    b: &Tensor<T>,
    d: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let out = g.shape();
    if a.shape() == out && b.shape() == out {
        let data = g
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&gv, (&x, &y))| gv * d(x, y))
            .collect();
        return Tensor::new(out.to_vec(), data).expect("same shape");
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut av = vec![T::zero(); g.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(out, &sa, &sb, |o, i, j| av[o] = d(ad[i], bd[j]));
    unbroadcast(g, operand, |o| av[o])
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    let y = &node.value;
    let elementwise = |x: &Var, d: &dyn Fn(T, T) -> T| {
        let xd = val(x).data();
        let data = g
            .data()
            .iter()
            .zip(xd.iter().zip(y.data()))
            .map(|(&gv, (&xi, &yi))| gv * d(xi, yi))
            .collect();
        Tensor::new(y.shape().to_vec(), data).expect("elementwise grad")
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if needs(a) {
                accumulate(grads, *a, unbroadcast(g, val(a).shape(), |_| T::one()));
            }
            if needs(b) {
                accumulate(grads, *b, unbroadcast(g, val(b).shape(), |_| sign));
            }
        }
        Op::Mul(a, b) => {
            let (x, z) = (val(a), val(b));
            if needs(a) {
                accumulate(grads, *a, binary_grad(g, x.shape(), x, z, |_, q| q));
            }
            if needs(b) {
                accumulate(grads, *b, binary_grad(g, z.shape(), x, z, |p, _| p));
            }
        }
        Op::Div(a, b) => {
            let (x, z) = (val(a), val(b));
            if needs(a) {
                accumulate(grads, *a, binary_grad(g, x.shape(), x, z, |_, q| T::one() / q));
            }
            if needs(b) {
                accumulate(grads, *b, binary_grad(g, z.shape(), x, z, |p, q| -p / (q * q)));
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, *x, g.map(|p| p * c));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            let shape = val(x).shape().to_vec();
            accumulate(grads, *x, g.clone().reshape(shape).expect("same length"));
        }
        Op::MatMul(a, b) => {
            let (x, z) = (val(a), val(b));
            let batched = x.rank() == 3;
            let (batch, m, k) = if batched {
                (x.shape()[0], x.shape()[1], x.shape()[2])
            } else {
                (1, x.shape()[0], x.shape()[1])
            };
            let n = z.shape()[z.rank() - 1];
            if needs(a) {
                let mut ga = vec![T::zero(); x.len()];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data()[i * m * n..],
                        false,
                        &z.data()[i * k * n..],
                        true,
                        T::zero(),
                        &mut ga[i * m * k..],
                    );
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga).unwrap());
            }
            if needs(b) {
                let mut gb = vec![T::zero(); z.len()];
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &x.data()[i * m * k..],
                        true,
                        &g.data()[i * m * n..],
                        false,
                        T::zero(),
                        &mut gb[i * k * n..],
                    );
                }
                accumulate(grads, *b, Tensor::new(z.shape().to_vec(), gb).unwrap());
            }
        }
        Op::Conv2d { x, w, pad, cols } => {
            let (xv, wv) = (val(x), val(w));
            let xs = xv.shape();
            let (batch, c, h, wd) = if xs.len() == 4 {
                (xs[0], xs[1], xs[2], xs[3])
            } else {
                (1, xs[0], xs[1], xs[2])
            };
            let ws = wv.shape();
            let (o, kh, kw) = (ws[0], ws[2], ws[3]);
            let geo = ConvGeometry::new(c, h, wd, kh, kw, *pad);
            let (k, p) = (geo.rows(), geo.positions());
            if needs(w) {
                let mut gw = vec![T::zero(); wv.len()];
                for n in 0..batch {
                    T::gemm(
                        o,
                        p,
                        k,
                        T::one(),
                        &g.data()[n * o * p..],
                        false,
                        &cols[n * k * p..],
                        true,
                        T::one(),
                        &mut gw,
                    );
                }
                accumulate(grads, *w, Tensor::new(ws.to_vec(), gw).unwrap());
            }
            if needs(x) {
                let mut gx = vec![T::zero(); xv.len()];
                let mut gcols = vec![T::zero(); k * p];
                for n in 0..batch {
                    T::gemm(
                        k,
                        o,
                        p,
                        T::one(),
                        wv.data(),
                        true,
                        &g.data()[n * o * p..],
                        false,
                        T::zero(),
                        &mut gcols,
                    );
                    geo.col2im(&gcols, &mut gx[n * c * h * wd..(n + 1) * c * h * wd]);
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), gx).unwrap());
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gx = Tensor::zeros(val(x).shape().to_vec());
            let d = gx.data_mut();
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                d[i] += gv;
            }
            accumulate(grads, *x, gx);
        }
        Op::Relu(x) => {
            let t = elementwise(x, &|p, _| if p > T::zero() { T::one() } else { T::zero() });
            accumulate(grads, *x, t);
        }
        Op::Sigmoid(x) => accumulate(grads, *x, elementwise(x, &|_, s| s * (T::one() - s))),
        Op::Tanh(x) => accumulate(grads, *x, elementwise(x, &|_, t| T::one() - t * t)),
        Op::Exp(x) => accumulate(grads, *x, elementwise(x, &|_, e| e)),
        Op::Ln(x) => accumulate(grads, *x, elementwise(x, &|p, _| T::one() / p)),
        Op::Sin(x) => accumulate(grads, *x, elementwise(x, &|p, _| p.cos())),
        Op::Sqrt(x) => {
            let half = T::of(0.5);
            accumulate(grads, *x, elementwise(x, &|_, s| half / s));
        }
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            let t = elementwise(x, &|p, _| if p >= lo && p <= hi { T::one() } else { T::zero() });
            accumulate(grads, *x, t);
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let dot: T = (0..n).map(|a| gd[at(a)] * yd[at(a)]).sum();
                    for a in 0..n {
                        gx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
        }
        Op::Sum { x, axis, scale } => {
            let shape = val(x).shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    gx.extend(row.iter().map(|&p| p * *scale));
                }
            }
            accumulate(grads, *x, Tensor::new(shape.to_vec(), gx).unwrap());
        }
        Op::SumAll { x, scale } => {
            let gv = g.item() * *scale;
            accumulate(grads, *x, Tensor::full(val(x).shape().to_vec(), gv));
        }
        Op::Transpose { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(grads, *x, permute(g, &inverse));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for v in inputs {
                let s = val(v).shape();
                let len = s[*axis];
                if needs(v) {
                    let mut part = Vec::with_capacity(val(v).len());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    accumulate(grads, *v, Tensor::new(s.to_vec(), part).unwrap());
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = val(x).shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let len = y.shape()[*axis];
            let mut gx = Tensor::zeros(shape.to_vec());
            let d = gx.data_mut();
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, gx);
        }
        Op::LayerNorm { x, inv_std } => {
            let d = *y.shape().last().unwrap();
            let inv_d = T::one() / T::of(d as f64);
            let mut gx = Vec::with_capacity(y.len());
            for ((yr, gr), &inv) in y.data().chunks(d).zip(g.data().chunks(d)).zip(inv_std) {
                let mean_g: T = gr.iter().copied().sum::<T>() * inv_d;
                let mean_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                gx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| inv * (gv - mean_g - yv * mean_gy)));
            }
            accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
        }
        Op::Embedding { table, indices } => {
            let t = val(table);
            let dim = t.shape()[1];
            let mut gt = Tensor::zeros(t.shape().to_vec());
            let d = gt.data_mut();
            for (row, &i) in indices.iter().enumerate() {
                for j in 0..dim {
                    d[i * dim + j] += g.data()[row * dim + j];
                }
            }
            accumulate(grads, *table, gt);
        }
        Op::Custom { x, backward } => {
            let gx = backward(val(x), y, g);
            accumulate(grads, *x, gx);
        }
    }
}
