//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Ops evaluate eagerly; each records enough to emit its vector-Jacobian
//! product *as new tape ops*. Because the backward pass is itself expressed
//! in tape ops, gradients are differentiable again: `grad` can be nested,
//! which the gradient-penalty term of the training loop relies on.
//!
//! Execution is single-threaded and deterministic: identical op sequences
//! produce bitwise-identical buffers.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // mask inputs are recorded for tape inspection only
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulScalar { x: Var, s: Var },
    SumMany(Vec<Var>),
    SumAll(Var),
    BroadcastScalar { s: Var },
    SumAxis { x: Var, axis: usize },
    BroadcastAxis { x: Var, axis: usize },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    Slice0 { x: Var, start: usize },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    GeluDeriv { x: Var, order: u32 },
    LeakyRelu { x: Var, slope: S },
    LeakyReluMask { x: Var, slope: S },
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvGradInput { g: Var, w: Var, stride: usize, pad: usize },
    ConvGradWeight { x: Var, g: Var, stride: usize, pad: usize },
    BceWithLogits { logits: Var, targets: Var },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Key for cached convolution patch matrices: input var plus geometry
/// (stride, pad, kh, kw).
type ColsKey = (usize, usize, usize, usize, usize);

#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    // Patch matrices from conv2d forwards, reused by the weight-gradient of
    // the same input.
    cols_cache: std::collections::HashMap<ColsKey, std::rc::Rc<Vec<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            cols_cache: std::collections::HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad_of(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_const(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn zeros_const(&mut self, shape: Vec<usize>) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    // ── Elementwise and structural ops ──────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.node(a)
                .value
                .data()
                .iter()
                .zip(self.node(b).value.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.node(a)
                .value
                .data()
                .iter()
                .zip(self.node(b).value.data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), value, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.node(a)
                .value
                .data()
                .iter()
                .zip(self.node(b).value.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), value, req))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.node(x).value.map(|v| v * c);
        let req = self.requires(x);
        self.push(Op::Scale(x, c), value, req)
    }

    /// Multiply every element by a learnable rank-0 tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.node(s).value.numel() != 1 {
            return Err(Error::Config {
                op: "mul_scalar",
                msg: format!("scale must be rank-0, got {:?}", self.shape(s)),
            });
        }
        let sv = self.node(s).value.data()[0];
        let value = self.node(x).value.map(|v| v * sv);
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Op::MulScalar { x, s }, value, req))
    }

    /// Elementwise sum of any number of same-shape tensors. Empty input is a
    /// configuration error; callers handle empty pools by substituting a zero
    /// constant.
    pub fn sum_many(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Config {
                op: "sum_many",
                msg: "empty input list".into(),
            });
        };
        let mut data = self.node(first).value.data().to_vec();
        let mut req = self.requires(first);
        for &x in &xs[1..] {
            self.check_same_shape("sum_many", first, x)?;
            for (d, &v) in data.iter_mut().zip(self.node(x).value.data()) {
                *d += v;
            }
            req = req || self.requires(x);
        }
        let value = Tensor::new(self.shape(first).to_vec(), data)?;
        Ok(self.push(Op::SumMany(xs.to_vec()), value, req))
    }

    /// Sum of all elements down to a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self
            .node(x)
            .value
            .data()
            .iter()
            .fold(S::zero(), |acc, &v| acc + v);
        let req = self.requires(x);
        self.push(Op::SumAll(x), Tensor::scalar(total), req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.node(x).value.numel();
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    /// Fill `shape` with the single value of a rank-0 tensor.
    pub fn broadcast_scalar(&mut self, s: Var, shape: Vec<usize>) -> Result<Var> {
        if self.node(s).value.numel() != 1 {
            return Err(Error::Config {
                op: "broadcast_scalar",
                msg: format!("source must be rank-0, got {:?}", self.shape(s)),
            });
        }
        let v = self.node(s).value.data()[0];
        let req = self.requires(s);
        Ok(self.push(Op::BroadcastScalar { s }, Tensor::full(shape, v), req))
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let mut data = vec![S::zero(); outer * inner];
        {
            let src = self.node(x).value.data();
            if inner == 1 {
                for (o, d) in data.iter_mut().enumerate() {
                    for &v in &src[o * n..(o + 1) * n] {
                        *d += v;
                    }
                }
            } else {
                for o in 0..outer {
                    for j in 0..n {
                        let base = o * n * inner + j * inner;
                        let dst = &mut data[o * inner..(o + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::SumAxis { x, axis }, Tensor::new(out_shape, data)?, req))
    }

    /// Repeat a size-1 axis `n` times.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::Config {
                op: "broadcast_axis",
                msg: format!("axis {axis} of {shape:?} must exist with size 1"),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape;
        out_shape[axis] = n;
        let mut data = vec![S::zero(); outer * n * inner];
        {
            let src = self.node(x).value.data();
            if inner == 1 {
                for (o, &v) in src.iter().enumerate() {
                    for d in &mut data[o * n..(o + 1) * n] {
                        *d = v;
                    }
                }
            } else {
                for o in 0..outer {
                    let s_row = &src[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = o * n * inner + j * inner;
                        data[base..base + inner].copy_from_slice(s_row);
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            Op::BroadcastAxis { x, axis },
            Tensor::new(out_shape, data)?,
            req,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        kernels::matmul(
            self.node(a).value.data(),
            self.node(b).value.data(),
            m,
            k,
            n,
            &mut data,
        );
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], data)?, req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Config {
                op: "transpose",
                msg: format!("expects rank-2, got {shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let mut data = vec![S::zero(); r * c];
        kernels::transpose(self.node(x).value.data(), r, c, &mut data);
        let req = self.requires(x);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![c, r], data)?, req))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.node(x).value.clone().reshaped(shape)?;
        let req = self.requires(x);
        Ok(self.push(Op::Reshape(x), value, req))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Config {
                op: "concat0",
                msg: "empty input list".into(),
            });
        };
        let rest = self.shape(first)[1..].to_vec();
        let mut dim0 = 0;
        let mut req = false;
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            dim0 += s[0];
            req = req || self.requires(x);
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&rest);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &x in xs {
            data.extend_from_slice(self.node(x).value.data());
        }
        Ok(self.push(Op::Concat0(xs.to_vec()), Tensor::new(shape, data)?, req))
    }

    /// Slice `len` entries of axis 0 starting at `start`.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::Config {
                op: "slice0",
                msg: format!("slice {start}..{} of {shape:?}", start + len),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.node(x).value.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        let req = self.requires(x);
        Ok(self.push(
            Op::Slice0 { x, start },
            Tensor::new(out_shape, data)?,
            req,
        ))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let mut data = vec![S::zero(); self.node(x).value.numel()];
        kernels::softmax_axis(self.node(x).value.data(), &shape, axis, &mut data);
        let req = self.requires(x);
        Ok(self.push(Op::Softmax { x, axis }, Tensor::new(shape, data)?, req))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.node(x).value.map(kernels::gelu);
        let req = self.requires(x);
        self.push(Op::Gelu(x), value, req)
    }

    fn gelu_deriv(&mut self, x: Var, order: u32) -> Var {
        let value = self.node(x).value.map(|v| kernels::gelu_deriv(v, order));
        let req = self.requires(x);
        self.push(Op::GeluDeriv { x, order }, value, req)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let value = self.node(x).value.map(|v| kernels::leaky_relu(v, slope));
        let req = self.requires(x);
        self.push(Op::LeakyRelu { x, slope }, value, req)
    }

    fn leaky_relu_mask(&mut self, x: Var, slope: S) -> Var {
        let value = self
            .node(x)
            .value
            .map(|v| if v >= S::zero() { S::one() } else { slope });
        // Piecewise constant: carries no gradient of its own.
        self.push(Op::LeakyReluMask { x, slope }, value, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.node(x).value.map(kernels::sigmoid);
        let req = self.requires(x);
        self.push(Op::Sigmoid(x), value, req)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.node(x).value.map(|v| v.sqrt());
        let req = self.requires(x);
        self.push(Op::Sqrt(x), value, req)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.node(x).value.map(|v| S::one() / v);
        let req = self.requires(x);
        self.push(Op::Recip(x), value, req)
    }

    // ── Convolutions ────────────────────────────────────────────────────

    fn conv_geometry(
        &self,
        op: &'static str,
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let (ci, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
        let (co, wci, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wci != ci {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 || stride > 2 {
            return Err(Error::Config {
                op,
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if hp < kh || wp < kw || (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::Config {
                op,
                msg: format!(
                    "non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            });
        }
        Ok((ci, h, wd, co, kh, kw, (hp - kh) / stride + 1))
    }

    /// 2-D cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, h, wd, co, kh, kw, oh) = self.conv_geometry(
            "conv2d",
            self.shape(x),
            self.shape(w),
            stride,
            pad,
        )?;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut data = vec![S::zero(); co * oh * ow];
        let cols = kernels::conv2d_keep_cols(
            self.node(x).value.data(),
            self.node(w).value.data(),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            &mut data,
        );
        self.cols_cache
            .insert((x.0, stride, pad, kh, kw), std::rc::Rc::new(cols));
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(
            Op::Conv2d { x, w, stride, pad },
            Tensor::new(vec![co, oh, ow], data)?,
            req,
        ))
    }

    /// Adjoint-of-conv2d upsampling. `x: [C, H, W]`, `w: [C, C_out, kh, kw]`;
    /// stride must be 2 and the kernel/padding combination must exactly
    /// double the spatial size.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride != 2 {
            return Err(Error::Config {
                op: "conv_transpose2d",
                msg: format!("stride must be 2, got {stride}"),
            });
        }
        let (h, wd) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        let oh = stride * (h - 1) + kh - 2 * pad;
        let ow = stride * (wd - 1) + kw - 2 * pad;
        if oh != 2 * h || ow != 2 * wd {
            return Err(Error::Config {
                op: "conv_transpose2d",
                msg: format!(
                    "kernel {kh}x{kw} with pad {pad} yields {oh}x{ow}, not double of {h}x{wd}"
                ),
            });
        }
        self.conv_grad_input_op(x, w, stride, pad)
    }

    /// Shared constructor for `ConvGradInput` nodes (used both as the
    /// transposed convolution and as the conv2d input-gradient).
    fn conv_grad_input_op(&mut self, g: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let gs = self.shape(g).to_vec();
        let ws = self.shape(w).to_vec();
        if gs.len() != 3 || ws.len() != 4 || gs[0] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_grad_input",
                lhs: gs,
                rhs: ws,
            });
        }
        let (co, oh, ow) = (gs[0], gs[1], gs[2]);
        let (ci, kh, kw) = (ws[1], ws[2], ws[3]);
        let h = stride * (oh - 1) + kh - 2 * pad;
        let wd = stride * (ow - 1) + kw - 2 * pad;
        let mut data = vec![S::zero(); ci * h * wd];
        kernels::conv_grad_input(
            self.node(g).value.data(),
            self.node(w).value.data(),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            &mut data,
        );
        let req = self.requires(g) || self.requires(w);
        Ok(self.push(
            Op::ConvGradInput { g, w, stride, pad },
            Tensor::new(vec![ci, h, wd], data)?,
            req,
        ))
    }

    fn conv_grad_weight_op(&mut self, x: Var, g: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        if xs.len() != 3 || gs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv_grad_weight",
                lhs: xs,
                rhs: gs,
            });
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, oh, ow) = (gs[0], gs[1], gs[2]);
        let kh = h + 2 * pad - stride * (oh - 1);
        let kw = wd + 2 * pad - stride * (ow - 1);
        let mut data = vec![S::zero(); co * ci * kh * kw];
        let cached = self
            .cols_cache
            .get(&(x.0, stride, pad, kh, kw))
            .cloned();
        kernels::conv_grad_weight(
            self.node(x).value.data(),
            self.node(g).value.data(),
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
            cached.as_deref().map(|v| &v[..]),
            &mut data,
        );
        let req = self.requires(x) || self.requires(g);
        Ok(self.push(
            Op::ConvGradWeight { x, g, stride, pad },
            Tensor::new(vec![co, ci, kh, kw], data)?,
            req,
        ))
    }

    /// Mean binary cross-entropy with logits against fixed-shape targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_same_shape("bce_with_logits", logits, targets)?;
        let v = kernels::bce_with_logits(
            self.node(logits).value.data(),
            self.node(targets).value.data(),
        );
        let req = self.requires(logits) || self.requires(targets);
        Ok(self.push(
            Op::BceWithLogits { logits, targets },
            Tensor::scalar(v),
            req,
        ))
    }

    // ── Composite helpers ───────────────────────────────────────────────

    /// Affine map `x W^T + b` for `x: [m, in]` or `[in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let x_shape = self.shape(x).to_vec();
        let one_d = x_shape.len() == 1;
        let x2 = if one_d {
            self.reshape(x, vec![1, x_shape[0]])?
        } else {
            x
        };
        let wt = self.transpose(w)?;
        let mut y = self.matmul(x2, wt)?;
        if let Some(b) = b {
            let out = self.shape(y)[1];
            let rows = self.shape(y)[0];
            let b_row = self.reshape(b, vec![1, out])?;
            let b_full = self.broadcast_axis(b_row, 0, rows)?;
            y = self.add(y, b_full)?;
        }
        if one_d {
            let out = self.shape(y)[1];
            y = self.reshape(y, vec![out])?;
        }
        Ok(y)
    }

    /// Add a per-channel bias to a `[C, H, W]` volume.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || self.shape(b) != [shape[0]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                lhs: shape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let b3 = self.reshape(b, vec![shape[0], 1, 1])?;
        let bh = self.broadcast_axis(b3, 1, shape[1])?;
        let bw = self.broadcast_axis(bh, 2, shape[2])?;
        self.add(x, bw)
    }

    /// Frobenius norm: sqrt of the sum of squared entries. At exactly zero
    /// the norm is at its minimum and sqrt's derivative diverges; the zero
    /// subgradient is taken there so optimization over a perfectly matched
    /// pair stays finite.
    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.sum_all(sq);
        if self.node(s).value.data()[0] == S::zero() {
            return Ok(self.scale(s, S::zero()));
        }
        Ok(self.sqrt(s))
    }

    // ── Reverse mode ────────────────────────────────────────────────────

    /// Builds gradient nodes of scalar `y` with respect to `wrt`, returning
    /// one Var per entry (zero constants where no gradient flows). The
    /// returned vars live on this tape and can be differentiated again.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.node(y).value.numel() != 1 {
            return Err(Error::Config {
                op: "grad",
                msg: format!("target must be scalar, shape is {:?}", self.shape(y)),
            });
        }
        let limit = y.0;
        let mut adj: Vec<Option<Var>> = vec![None; limit + 1];
        let seed = self.constant(Tensor::ones(self.shape(y).to_vec()));
        if self.requires(y) {
            adj[y.0] = Some(seed);
            for id in (0..=limit).rev() {
                let Some(g) = adj[id] else { continue };
                if !self.nodes[id].requires_grad {
                    continue;
                }
                let op = self.nodes[id].op.clone();
                self.emit_vjp(&op, Var(id), g, &mut adj)?;
            }
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(v) => Ok(v),
                None => Ok(self.zeros_const(self.shape(w).to_vec())),
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) -> Result<()> {
        debug_assert!(target.0 < adj.len(), "adjoint flowed forward in the tape");
        adj[target.0] = Some(match adj[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    fn emit_vjp(&mut self, op: &Op<S>, out: Var, g: Var, adj: &mut [Option<Var>]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(a) {
                    self.accumulate(adj, a, g)?;
                }
                if self.requires(b) {
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.requires(a) {
                    self.accumulate(adj, a, g)?;
                }
                if self.requires(b) {
                    let neg = self.scale(g, -S::one());
                    self.accumulate(adj, b, neg)?;
                }
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let c = self.mul(g, b)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires(b) {
                    let c = self.mul(g, a)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Scale(x, c) => {
                if self.requires(x) {
                    let gx = self.scale(g, c);
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::MulScalar { x, s } => {
                if self.requires(x) {
                    let gx = self.mul_scalar(g, s)?;
                    self.accumulate(adj, x, gx)?;
                }
                if self.requires(s) {
                    let gxv = self.mul(g, x)?;
                    let gs = self.sum_all(gxv);
                    self.accumulate(adj, s, gs)?;
                }
            }
            Op::SumMany(ref xs) => {
                for &x in xs {
                    if self.requires(x) {
                        self.accumulate(adj, x, g)?;
                    }
                }
            }
            Op::SumAll(x) => {
                if self.requires(x) {
                    let gx = self.broadcast_scalar(g, self.shape(x).to_vec())?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::BroadcastScalar { s } => {
                if self.requires(s) {
                    let gs = self.sum_all(g);
                    let gs = self.reshape(gs, self.shape(s).to_vec())?;
                    self.accumulate(adj, s, gs)?;
                }
            }
            Op::SumAxis { x, axis } => {
                if self.requires(x) {
                    let n = self.shape(x)[axis];
                    let gx = self.broadcast_axis(g, axis, n)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::BroadcastAxis { x, axis } => {
                if self.requires(x) {
                    let gx = self.sum_axis(g, axis)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Matmul(a, b) => {
                if self.requires(a) {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate(adj, a, ga)?;
                }
                if self.requires(b) {
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate(adj, b, gb)?;
                }
            }
            Op::Transpose(x) => {
                if self.requires(x) {
                    let gx = self.transpose(g)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Reshape(x) => {
                if self.requires(x) {
                    let gx = self.reshape(g, self.shape(x).to_vec())?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Concat0(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[0];
                    if self.requires(x) {
                        let gx = self.slice0(g, offset, len)?;
                        self.accumulate(adj, x, gx)?;
                    }
                    offset += len;
                }
            }
            Op::Slice0 { x, start } => {
                if self.requires(x) {
                    let x_shape = self.shape(x).to_vec();
                    let len = self.shape(out)[0];
                    let mut parts = Vec::new();
                    if start > 0 {
                        let mut s = x_shape.clone();
                        s[0] = start;
                        parts.push(self.zeros_const(s));
                    }
                    parts.push(g);
                    if start + len < x_shape[0] {
                        let mut s = x_shape.clone();
                        s[0] = x_shape[0] - start - len;
                        parts.push(self.zeros_const(s));
                    }
                    let gx = self.concat0(&parts)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(x) {
                    // gx = y * (g - broadcast(sum_axis(g * y)))
                    let gy = self.mul(g, out)?;
                    let s = self.sum_axis(gy, axis)?;
                    let n = self.shape(out)[axis];
                    let sb = self.broadcast_axis(s, axis, n)?;
                    let d = self.sub(g, sb)?;
                    let gx = self.mul(out, d)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Gelu(x) => {
                if self.requires(x) {
                    let d = self.gelu_deriv(x, 1);
                    let gx = self.mul(g, d)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::GeluDeriv { x, order } => {
                if self.requires(x) {
                    let d = self.gelu_deriv(x, order + 1);
                    let gx = self.mul(g, d)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.requires(x) {
                    let mask = self.leaky_relu_mask(x, slope);
                    let gx = self.mul(g, mask)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            // Piecewise constant in x almost everywhere.
            Op::LeakyReluMask { .. } => {}
            Op::Sigmoid(x) => {
                if self.requires(x) {
                    let ones = self.constant(Tensor::ones(self.shape(out).to_vec()));
                    let om = self.sub(ones, out)?;
                    let yy = self.mul(out, om)?;
                    let gx = self.mul(g, yy)?;
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Sqrt(x) => {
                if self.requires(x) {
                    let r = self.recip(out);
                    let gr = self.mul(g, r)?;
                    let gx = self.scale(gr, S::c(0.5));
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Recip(x) => {
                if self.requires(x) {
                    let yy = self.mul(out, out)?;
                    let gy = self.mul(g, yy)?;
                    let gx = self.scale(gy, -S::one());
                    self.accumulate(adj, x, gx)?;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                if self.requires(x) {
                    let gx = self.conv_grad_input_op(g, w, stride, pad)?;
                    self.accumulate(adj, x, gx)?;
                }
                if self.requires(w) {
                    let gw = self.conv_grad_weight_op(x, g, stride, pad)?;
                    self.accumulate(adj, w, gw)?;
                }
            }
            Op::ConvGradInput {
                g: g0,
                w,
                stride,
                pad,
            } => {
                // Linear in both args; upstream g has the conv-input shape.
                if self.requires(g0) {
                    let gg = self.conv2d(g, w, stride, pad)?;
                    self.accumulate(adj, g0, gg)?;
                }
                if self.requires(w) {
                    let gw = self.conv_grad_weight_op(g, g0, stride, pad)?;
                    self.accumulate(adj, w, gw)?;
                }
            }
            Op::ConvGradWeight {
                x,
                g: g0,
                stride,
                pad,
            } => {
                // Upstream g is weight-shaped.
                if self.requires(x) {
                    let gx = self.conv_grad_input_op(g0, g, stride, pad)?;
                    self.accumulate(adj, x, gx)?;
                }
                if self.requires(g0) {
                    let gg = self.conv2d(x, g, stride, pad)?;
                    self.accumulate(adj, g0, gg)?;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = S::from_usize(self.node(logits).value.numel()).unwrap();
                let shape = self.shape(logits).to_vec();
                let gb = self.broadcast_scalar(g, shape)?;
                if self.requires(logits) {
                    let sig = self.sigmoid(logits);
                    let d = self.sub(sig, targets)?;
                    let gl = self.mul(gb, d)?;
                    let gl = self.scale(gl, S::one() / n);
                    self.accumulate(adj, logits, gl)?;
                }
                if self.requires(targets) {
                    let gt = self.mul(gb, logits)?;
                    let gt = self.scale(gt, -S::one() / n);
                    self.accumulate(adj, targets, gt)?;
                }
            }
        }
        Ok(())
    }

    /// Runs reverse mode from scalar `y` and adds the results into the
    /// `grad` buffers of every gradient-requiring leaf. Accumulates across
    /// calls; it never overwrites.
    pub fn backward(&mut self, y: Var) -> Result<()> {
        let leaves: Vec<Var> = (0..=y.0)
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(Var)
            .collect();
        let grads = self.grad(y, &leaves)?;
        for (&leaf, gv) in leaves.iter().zip(grads) {
            let data = self.nodes[gv.0].value.data().to_vec();
            let node = &mut self.nodes[leaf.0];
            match &mut node.grad {
                None => node.grad = Some(data),
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&data) {
                        *a += *d;
                    }
                }
            }
        }
        Ok(())
    }
}
