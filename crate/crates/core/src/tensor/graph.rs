use super::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
    },
    Conv1x1 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    PixelNorm {
        input: Var,
        inv: Vec<T>,
    },
    Modulate {
        input: Var,
        style: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SpatialMean(Var),
    RowSum(Var),
    ColMean(Var),
    RepeatRows(Var),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

/// Names of every differentiable op the tape can record.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add_row_bias",
    "conv2d",
    "conv1x1",
    "upsample_nearest2x",
    "avgpool2x",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "abs",
    "square",
    "sqrt",
    "pixel_norm",
    "modulate",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "variance",
    "spatial_mean",
    "row_sum",
    "col_mean",
    "repeat_rows",
    "select_rows",
    "reshape",
];

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Conv3x3 { .. } => "conv2d",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::AvgPool2x(_) => "avgpool2x",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::PixelNorm { .. } => "pixel_norm",
            Op::Modulate { .. } => "modulate",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Variance(_) => "variance",
            Op::SpatialMean(_) => "spatial_mean",
            Op::RowSum(_) => "row_sum",
            Op::ColMean(_) => "col_mean",
            Op::RepeatRows(_) => "repeat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording tape. Nodes are appended in execution order, so the node list
/// is already topologically sorted and backward walks it in reverse.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    non_finite: Option<(Var, &'static str)>,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(TensorError::Rank {
            op,
            rank: 4,
            shape: shape.to_vec(),
        }),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(TensorError::Rank {
            op,
            rank: 2,
            shape: shape.to_vec(),
        }),
    }
}

/// Splits a rank >= 2 shape into (dim0, dim1, product of the rest).
fn split_lead(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(TensorError::Rank {
            op,
            rank: 2,
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn im2col<T: Scalar>(x: &[T], b: usize, cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let kdim = cin * 9;
    let mut cols = vec![T::zero(); b * kdim * hw];
    for n in 0..b {
        for ci in 0..cin {
            let plane = &x[(n * cin + ci) * hw..(n * cin + ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = ci * 9 + ky * 3 + kx;
                    let dst = &mut cols[(n * kdim + r) * hw..(n * kdim + r + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        for (xo, d) in dst_row.iter_mut().enumerate() {
                            let sx = xo as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                *d = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], dx: &mut [T], n: usize, cin: usize, h: usize, w: usize) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[(n * cin + ci) * hw..(n * cin + ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are tracked and retained.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `v` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// First node whose forward value contained NaN or Inf, with its op name.
    /// Name of the op that produced `v` (`"leaf"` for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Op names in recording order.
    pub fn recorded_ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    /// Test fixture: from now on, `op`'s backward pass is off by 1%. Used to
    /// confirm the finite-difference oracle notices a broken gradient.
    pub fn inject_backward_fault(&mut self, op: &str) -> Result<(), TensorError> {
        let name = OP_NAMES.iter().find(|n| **n == op).ok_or_else(|| TensorError::Invalid {
            op: "inject_backward_fault",
            msg: format!("unknown op `{op}`"),
        })?;
        self.fault = Some(name);
        Ok(())
    }

    pub fn non_finite(&self) -> Option<(Var, &'static str)> {
        self.non_finite
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((Var(id), "leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let id = self.nodes.len();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((Var(id), op.name()));
        }
        self.nodes.push(Node {
            value,
            // Constant subgraphs keep no saved state.
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            false,
        );
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2("add_row_bias", self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                expected: vec![n],
                got: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddRowBias(x, bias),
            &[x, bias],
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (b, cin, h, w) = dims4("conv2d", self.shape(input))?;
        let (cout, wcin, kh, kw) = dims4("conv2d", self.shape(weight))?;
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout, cin, 3, 3],
                got: self.shape(weight).to_vec(),
            });
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![cout],
                got: self.shape(bias).to_vec(),
            });
        }
        let hw = h * w;
        let kdim = cin * 9;
        let cols = im2col(self.data(input), b, cin, h, w);
        let mut out = vec![T::zero(); b * cout * hw];
        let wd = self.data(weight);
        for n in 0..b {
            T::gemm(
                cout,
                kdim,
                hw,
                wd,
                (kdim as isize, 1),
                &cols[n * kdim * hw..(n + 1) * kdim * hw],
                (hw as isize, 1),
                &mut out[n * cout * hw..(n + 1) * cout * hw],
                (hw as isize, 1),
                false,
            );
        }
        let bd = self.data(bias);
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let bb = bd[i % cout];
            for v in plane {
                *v += bb;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, cout, h, w],
                data: out,
            },
            Op::Conv3x3 {
                input,
                weight,
                bias,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// Per-pixel channel mixing; `weight` is `[cout, cin]`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (b, cin, h, w) = dims4("conv1x1", self.shape(input))?;
        let (cout, wcin) = dims2("conv1x1", self.shape(weight))?;
        if wcin != cin || self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1x1",
                expected: vec![cout, cin],
                got: self.shape(weight).to_vec(),
            });
        }
        let hw = h * w;
        let mut out = vec![T::zero(); b * cout * hw];
        let xd = self.data(input);
        let wd = self.data(weight);
        for n in 0..b {
            T::gemm(
                cout,
                cin,
                hw,
                wd,
                (cin as isize, 1),
                &xd[n * cin * hw..(n + 1) * cin * hw],
                (hw as isize, 1),
                &mut out[n * cout * hw..(n + 1) * cout * hw],
                (hw as isize, 1),
                false,
            );
        }
        let bd = self.data(bias);
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let bb = bd[i % cout];
            for v in plane {
                *v += bb;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, cout, h, w],
                data: out,
            },
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4("upsample_nearest2x", self.shape(x))?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (plane, src) in out.chunks_mut(oh * ow).zip(xd.chunks(h * w)) {
            for y in 0..oh {
                for xo in 0..ow {
                    plane[y * ow + xo] = src[(y / 2) * w + xo / 2];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, c, oh, ow],
                data: out,
            },
            Op::Upsample2x(x),
            &[x],
        ))
    }

    pub fn avgpool2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4("avgpool2x", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avgpool2x",
                msg: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (plane, src) in out.chunks_mut(oh * ow).zip(xd.chunks(h * w)) {
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * w + 2 * xo;
                    plane[y * ow + xo] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, c, oh, ow],
                data: out,
            },
            Op::AvgPool2x(x),
            &[x],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), T::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), T::sqrt)
    }

    /// `x / sqrt(mean_c(x^2) + 1e-8)` over dim 1, independently at every
    /// other index.
    pub fn pixel_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let (b, c, p) = split_lead("pixel_norm", self.shape(x))?;
        let eps = T::lit(1e-8);
        let inv_c = T::one() / T::lit(c as f64);
        let xd = self.data(x);
        let mut inv = vec![T::zero(); b * p];
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..b {
            let base = n * c * p;
            for q in 0..p {
                let mut acc = T::zero();
                for ch in 0..c {
                    let v = xd[base + ch * p + q];
                    acc += v * v;
                }
                let s = T::one() / (acc * inv_c + eps).sqrt();
                inv[n * p + q] = s;
                for ch in 0..c {
                    out[base + ch * p + q] = xd[base + ch * p + q] * s;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: self.shape(x).to_vec(),
                data: out,
            },
            Op::PixelNorm { input: x, inv },
            &[x],
        ))
    }

    /// Per-channel style modulation `x * (1 + scale) + shift`, where
    /// `style` is `[b, 2c]` holding scales then shifts.
    pub fn modulate(&mut self, x: Var, style: Var) -> Result<Var, TensorError> {
        let (b, c, p) = split_lead("modulate", self.shape(x))?;
        if self.shape(style) != [b, 2 * c] {
            return Err(TensorError::ShapeMismatch {
                op: "modulate",
                expected: vec![b, 2 * c],
                got: self.shape(style).to_vec(),
            });
        }
        let xd = self.data(x);
        let sd = self.data(style);
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let scale = T::one() + sd[n * 2 * c + ch];
                let shift = sd[n * 2 * c + c + ch];
                let off = (n * c + ch) * p;
                for q in off..off + p {
                    out[q] = xd[q] * scale + shift;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: self.shape(x).to_vec(),
                data: out,
            },
            Op::Modulate { input: x, style },
            &[x, style],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn blend(&mut self, a: Var, b: Var, alpha: T) -> Result<Var, TensorError> {
        let sa = self.scale(a, alpha);
        let sb = self.scale(b, T::one() - alpha);
        self.add(sa, sb)
    }

    fn reduce(&mut self, x: Var, op: Op<T>, value: T) -> Var {
        self.push(Tensor::scalar(value), op, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.reduce(x, Op::Sum(x), s)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(d.len() as f64);
        self.reduce(x, Op::Mean(x), s)
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = T::lit(d.len() as f64);
        let mu = d.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let var = d
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu))
            / n;
        self.reduce(x, Op::Variance(x), var)
    }

    /// Mean over every dim after the first two: `[b, c, ...] -> [b, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let (b, c, p) = split_lead("spatial_mean", self.shape(x))?;
        let inv = T::one() / T::lit(p as f64);
        let data = self
            .data(x)
            .chunks(p)
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![b, c],
                data,
            },
            Op::SpatialMean(x),
            &[x],
        ))
    }

    /// Sum over every dim after the first: `[m, ...] -> [m, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        let Some((&m, rest)) = shape.split_first() else {
            return Err(TensorError::Rank {
                op: "row_sum",
                rank: 1,
                shape: shape.to_vec(),
            });
        };
        let inner: usize = rest.iter().product();
        let data = self
            .data(x)
            .chunks(inner.max(1))
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::RowSum(x),
            &[x],
        ))
    }

    /// Mean over the first dim: `[m, ...] -> [1, ...]`.
    pub fn col_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(TensorError::Rank {
                op: "col_mean",
                rank: 1,
                shape,
            });
        }
        let m = shape[0];
        let inner: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut data = vec![T::zero(); inner];
        for row in xd.chunks(inner) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        for v in &mut data {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape[0] = 1;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::ColMean(x),
            &[x],
        ))
    }

    /// Tiles a `[1, ...]` tensor `n` times along the first dim.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                msg: format!("leading dim must be 1, got shape {shape:?}"),
            });
        }
        let row = self.data(x);
        let mut data = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::RepeatRows(x),
            &[x],
        ))
    }

    /// Gathers rows (first-dim slices) by index; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let Some(&m) = shape.first() else {
            return Err(TensorError::Rank {
                op: "select_rows",
                rank: 1,
                shape,
            });
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SelectRows(x, idx.to_vec()),
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Backpropagates from a scalar `loss`, adding into every reachable
    /// node's retained gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Vector-Jacobian product: backpropagates `seed` as the gradient of
    /// `output`.
    pub fn backward_with(&mut self, output: Var, seed: Vec<T>) -> Result<(), TensorError> {
        if seed.len() != self.value(output).len() {
            return Err(TensorError::DataLength {
                shape: self.shape(output).to_vec(),
                len: seed.len(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                if self.fault == Some(self.nodes[i].op.name()) {
                    let skewed: Vec<T> = gy.iter().map(|&v| v * T::lit(1.01)).collect();
                    self.propagate(i, &skewed, &mut grads);
                } else {
                    self.propagate(i, &gy, &mut grads);
                }
            }
            grads[i] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let y = nodes[i].value.data();

        fn buf<'g, T: Scalar>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'g mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }

        let elementwise = |grads: &mut [Option<Vec<T>>], x: Var, f: &dyn Fn(usize) -> T| {
            if wants(x) {
                let g = buf(grads, nodes, x);
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj += gy[j] * f(j);
                }
            }
        };

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if wants(a) {
                    let ga = buf(grads, nodes, a);
                    T::gemm(m, n, k, gy, (n as isize, 1), val(b), (1, n as isize), ga, (k as isize, 1), true);
                }
                if wants(b) {
                    let gb = buf(grads, nodes, b);
                    T::gemm(k, m, n, val(a), (1, k as isize), gy, (n as isize, 1), gb, (n as isize, 1), true);
                }
            }
            &Op::AddRowBias(x, bias) => {
                elementwise(grads, x, &|_| T::one());
                if wants(bias) {
                    let n = shape(bias)[0];
                    let gb = buf(grads, nodes, bias);
                    for row in gy.chunks(n) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
                cols,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let [b, cin, h, w] = *shape(input) else { unreachable!() };
                let cout = shape(weight)[0];
                let hw = h * w;
                let kdim = cin * 9;
                if wants(weight) {
                    let gw = buf(grads, nodes, weight);
                    for n in 0..b {
                        T::gemm(
                            cout,
                            hw,
                            kdim,
                            &gy[n * cout * hw..(n + 1) * cout * hw],
                            (hw as isize, 1),
                            &cols[n * kdim * hw..(n + 1) * kdim * hw],
                            (1, hw as isize),
                            gw,
                            (kdim as isize, 1),
                            true,
                        );
                    }
                }
                if wants(bias) {
                    let gb = buf(grads, nodes, bias);
                    for (j, plane) in gy.chunks(hw).enumerate() {
                        gb[j % cout] += plane.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                }
                if wants(input) {
                    let mut dcols = vec![T::zero(); kdim * hw];
                    let wd = val(weight);
                    let gx = buf(grads, nodes, input);
                    for n in 0..b {
                        T::gemm(
                            kdim,
                            cout,
                            hw,
                            wd,
                            (1, kdim as isize),
                            &gy[n * cout * hw..(n + 1) * cout * hw],
                            (hw as isize, 1),
                            &mut dcols,
                            (hw as isize, 1),
                            false,
                        );
                        col2im_add(&dcols, gx, n, cin, h, w);
                    }
                }
            }
            &Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let [b, cin, h, w] = *shape(input) else { unreachable!() };
                let cout = shape(weight)[0];
                let hw = h * w;
                if wants(weight) {
                    let xd = val(input);
                    let gw = buf(grads, nodes, weight);
                    for n in 0..b {
                        T::gemm(
                            cout,
                            hw,
                            cin,
                            &gy[n * cout * hw..(n + 1) * cout * hw],
                            (hw as isize, 1),
                            &xd[n * cin * hw..(n + 1) * cin * hw],
                            (1, hw as isize),
                            gw,
                            (cin as isize, 1),
                            true,
                        );
                    }
                }
                if wants(bias) {
                    let gb = buf(grads, nodes, bias);
                    for (j, plane) in gy.chunks(hw).enumerate() {
                        gb[j % cout] += plane.iter().fold(T::zero(), |acc, &v| acc + v);
                    }
                }
                if wants(input) {
                    let wd = val(weight);
                    let gx = buf(grads, nodes, input);
                    for n in 0..b {
                        T::gemm(
                            cin,
                            cout,
                            hw,
                            wd,
                            (1, cin as isize),
                            &gy[n * cout * hw..(n + 1) * cout * hw],
                            (hw as isize, 1),
                            &mut gx[n * cin * hw..(n + 1) * cin * hw],
                            (hw as isize, 1),
                            true,
                        );
                    }
                }
            }
            &Op::Upsample2x(x) => {
                if wants(x) {
                    let [_, _, h, w] = *shape(x) else { unreachable!() };
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = buf(grads, nodes, x);
                    for (g, plane) in gx.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                g[(yy / 2) * w + xx / 2] += plane[yy * ow + xx];
                            }
                        }
                    }
                }
            }
            &Op::AvgPool2x(x) => {
                if wants(x) {
                    let [_, _, h, w] = *shape(x) else { unreachable!() };
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let gx = buf(grads, nodes, x);
                    for (g, plane) in gx.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                        for yy in 0..h {
                            for xx in 0..w {
                                g[yy * w + xx] += plane[(yy / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                }
            }
            &Op::LeakyRelu(x, slope) => {
                let xd = val(x);
                elementwise(grads, x, &|j| if xd[j] > T::zero() { T::one() } else { slope });
            }
            &Op::Sigmoid(x) => elementwise(grads, x, &|j| y[j] * (T::one() - y[j])),
            &Op::Tanh(x) => elementwise(grads, x, &|j| T::one() - y[j] * y[j]),
            &Op::Softplus(x) => {
                let xd = val(x);
                elementwise(grads, x, &|j| sigmoid(xd[j]));
            }
            &Op::Abs(x) => {
                let xd = val(x);
                elementwise(grads, x, &|j| {
                    if xd[j] > T::zero() {
                        T::one()
                    } else if xd[j] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::Square(x) => {
                let xd = val(x);
                elementwise(grads, x, &|j| xd[j] + xd[j]);
            }
            &Op::Sqrt(x) => elementwise(grads, x, &|j| T::lit(0.5) / y[j]),
            Op::PixelNorm { input, inv } => {
                let x = *input;
                if wants(x) {
                    let [b, c, ..] = *shape(x) else { unreachable!() };
                    let p: usize = shape(x)[2..].iter().product();
                    let inv_c = T::one() / T::lit(c as f64);
                    let xd = val(x);
                    let gx = buf(grads, nodes, x);
                    for n in 0..b {
                        let base = n * c * p;
                        for q in 0..p {
                            let s = inv[n * p + q];
                            let mut dot = T::zero();
                            for ch in 0..c {
                                dot += gy[base + ch * p + q] * xd[base + ch * p + q];
                            }
                            let k = dot * s * s * s * inv_c;
                            for ch in 0..c {
                                let j = base + ch * p + q;
                                gx[j] += gy[j] * s - xd[j] * k;
                            }
                        }
                    }
                }
            }
            &Op::Modulate { input, style } => {
                let [b, c, ..] = *shape(input) else { unreachable!() };
                let p: usize = shape(input)[2..].iter().product();
                let sd = val(style);
                if wants(input) {
                    let gx = buf(grads, nodes, input);
                    for n in 0..b {
                        for ch in 0..c {
                            let scale = T::one() + sd[n * 2 * c + ch];
                            let off = (n * c + ch) * p;
                            for q in off..off + p {
                                gx[q] += gy[q] * scale;
                            }
                        }
                    }
                }
                if wants(style) {
                    let xd = val(input);
                    let gs = buf(grads, nodes, style);
                    for n in 0..b {
                        for ch in 0..c {
                            let off = (n * c + ch) * p;
                            let mut ds = T::zero();
                            let mut dt = T::zero();
                            for q in off..off + p {
                                ds += gy[q] * xd[q];
                                dt += gy[q];
                            }
                            gs[n * 2 * c + ch] += ds;
                            gs[n * 2 * c + c + ch] += dt;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                elementwise(grads, a, &|_| T::one());
                elementwise(grads, b, &|_| T::one());
            }
            &Op::Sub(a, b) => {
                elementwise(grads, a, &|_| T::one());
                elementwise(grads, b, &|_| -T::one());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                elementwise(grads, a, &|j| bd[j]);
                elementwise(grads, b, &|j| ad[j]);
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (val(a), val(b));
                elementwise(grads, a, &|j| T::one() / bd[j]);
                elementwise(grads, b, &|j| -ad[j] / (bd[j] * bd[j]));
            }
            &Op::Scale(x, c) => elementwise(grads, x, &|_| c),
            &Op::AddScalar(x) | &Op::Reshape(x) => elementwise(grads, x, &|_| T::one()),
            &Op::Sum(x) => {
                if wants(x) {
                    let g0 = gy[0];
                    buf(grads, nodes, x).iter_mut().for_each(|g| *g += g0);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let g0 = gy[0] / T::lit(val(x).len() as f64);
                    buf(grads, nodes, x).iter_mut().for_each(|g| *g += g0);
                }
            }
            &Op::Variance(x) => {
                if wants(x) {
                    let xd = val(x);
                    let n = T::lit(xd.len() as f64);
                    let mu = xd.iter().fold(T::zero(), |acc, &v| acc + v) / n;
                    let k = gy[0] * T::lit(2.0) / n;
                    let gx = buf(grads, nodes, x);
                    for (g, &v) in gx.iter_mut().zip(xd) {
                        *g += k * (v - mu);
                    }
                }
            }
            &Op::SpatialMean(x) => {
                if wants(x) {
                    let p: usize = shape(x)[2..].iter().product();
                    let inv = T::one() / T::lit(p as f64);
                    let gx = buf(grads, nodes, x);
                    for (plane, &d) in gx.chunks_mut(p).zip(gy) {
                        plane.iter_mut().for_each(|g| *g += d * inv);
                    }
                }
            }
            &Op::RowSum(x) => {
                if wants(x) {
                    let inner: usize = shape(x)[1..].iter().product();
                    let gx = buf(grads, nodes, x);
                    for (row, &d) in gx.chunks_mut(inner.max(1)).zip(gy) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                }
            }
            &Op::ColMean(x) => {
                if wants(x) {
                    let m = shape(x)[0];
                    let inv = T::one() / T::lit(m as f64);
                    let gx = buf(grads, nodes, x);
                    for row in gx.chunks_mut(gy.len()) {
                        for (g, &d) in row.iter_mut().zip(gy) {
                            *g += d * inv;
                        }
                    }
                }
            }
            &Op::RepeatRows(x) => {
                if wants(x) {
                    let gx = buf(grads, nodes, x);
                    let inner = gx.len();
                    for row in gy.chunks(inner) {
                        for (g, &d) in gx.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                let x = *x;
                if wants(x) {
                    let inner: usize = shape(x)[1..].iter().product();
                    let gx = buf(grads, nodes, x);
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..inner {
                            gx[r * inner + c] += gy[k * inner + c];
                        }
                    }
                }
            }
        }
    }
}
