use super::kernels::{
    broadcast_index_map, broadcast_shape, col2im, gemm, im2col, split_axis, ConvGeom,
};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow(NodeId, f64),
    Affine(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Softmax(NodeId, usize),
    Sum(NodeId, usize),
    Mean(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    L2Normalize {
        input: NodeId,
        axis: usize,
        norms: Vec<f64>,
    },
    InstanceNorm {
        input: NodeId,
        inv_std: Vec<f64>,
    },
    Reshape(NodeId),
    Gather {
        input: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Neg(_) => "neg",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Pow(..) => "pow",
            Op::Affine(..) => "affine",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b)
            | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Affine(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Clamp(a, ..)
            | Op::Transpose(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a) => vec![*a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::L2Normalize { input, .. }
            | Op::InstanceNorm { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation, in topological order by construction.
///
/// Every builder method evaluates its forward rule immediately and fails on
/// shape errors or non-finite results. [`Graph::backward`] replays the nodes
/// in exact reverse order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the node did not influence the output.
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        let shape = self.shapes.get(id.0)?;
        let numel = shape.iter().product();
        let data = self.grads[id.0].clone().unwrap_or_else(|| vec![0.0; numel]);
        Tensor::new(shape.clone(), data).ok()
    }
}

// Elementwise unary helper.
fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node, TensorError> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TensorError> {
        self.node(id)?.value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, TensorError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn check(&self, ids: &[NodeId]) -> Result<(), TensorError> {
        for id in ids {
            self.node(*id)?;
        }
        Ok(())
    }

    /// Input tensor; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId, TensorError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: "leaf",
                node: id,
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId, TensorError> {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `a`'s value with no gradient path back to it.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.node(a)?.value.clone();
        self.constant(v)
    }

    // ---- broadcasting binary ops ----

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check(&[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(va.shape().to_vec(), data);
        }
        let shape =
            broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
        let ma = broadcast_index_map(&shape, va.shape());
        let mb = broadcast_index_map(&shape, vb.shape());
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "maximum", f64::max)?;
        self.push(Op::Maximum(a, b), v)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.binary(a, b, "minimum", f64::min)?;
        self.push(Op::Minimum(a, b), v)
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId, TensorError> {
        let v = map(&self.node(a)?.value, f);
        self.push(op, v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Pow(a, exponent), |x| x.powf(exponent))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> Result<NodeId, TensorError> {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        if lo > hi {
            return Err(TensorError::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(&[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            1.0,
            va.data(),
            vb.data(),
            0.0,
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.node(a)?.value;
        if va.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose needs rank 2, got {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let v = Tensor::new(vec![c, r], transpose_data(r, c, va.data()))?;
        self.push(Op::Transpose(a), v)
    }

    /// 2-D convolution. `input` is `N x Cin x H x W`, `weight` is
    /// `Cout x Cin x k x k`, `bias` is `Cout`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        self.check(&[input, weight])?;
        let (vx, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vx.rank() != 4 || vw.rank() != 4 || vw.shape()[1] != vx.shape()[1] {
            return Err(mismatch());
        }
        let (n, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        if vw.shape()[3] != k {
            return Err(mismatch());
        }
        let geom = ConvGeom::new(cin, h, w, k, stride, pad).ok_or_else(mismatch)?;
        let bias_vals = self.bias_values(bias, cout, "conv2d")?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * cout * p];
        for b in 0..n {
            let c = &mut cols[b * rows * p..(b + 1) * rows * p];
            im2col(&vx.data()[b * cin * h * w..(b + 1) * cin * h * w], &geom, c);
            let o = &mut out[b * cout * p..(b + 1) * cout * p];
            gemm(false, false, cout, p, rows, 1.0, vw.data(), c, 0.0, o);
            add_channel_bias(o, bias_vals.as_deref(), p);
        }
        let v = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            v,
        )
    }

    /// Transposed 2-D convolution. `input` is `N x Cin x H x W`, `weight` is
    /// `Cin x Cout x k x k`; output side is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        self.check(&[input, weight])?;
        let (vx, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vx.rank() != 4 || vw.rank() != 4 || vw.shape()[0] != vx.shape()[1] || stride == 0 {
            return Err(mismatch());
        }
        let (n, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, k) = (vw.shape()[1], vw.shape()[2]);
        if vw.shape()[3] != k || h == 0 || w == 0 {
            return Err(mismatch());
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(mismatch)?;
        let ow = ((w - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(mismatch)?;
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad).ok_or_else(mismatch)?;
        if geom.out_h != h || geom.out_w != w {
            return Err(mismatch());
        }
        let bias_vals = self.bias_values(bias, cout, "conv_transpose2d")?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            let x = &vx.data()[b * cin * p..(b + 1) * cin * p];
            gemm(true, false, rows, p, cin, 1.0, vw.data(), x, 0.0, &mut cols);
            let o = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            col2im(&cols, &geom, o);
            add_channel_bias(o, bias_vals.as_deref(), oh * ow);
        }
        let v = Tensor::new(vec![n, cout, oh, ow], out)?;
        self.push(
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            v,
        )
    }

    fn bias_values(
        &self,
        bias: Option<NodeId>,
        channels: usize,
        op: &'static str,
    ) -> Result<Option<Vec<f64>>, TensorError> {
        match bias {
            None => Ok(None),
            Some(b) => {
                let vb = &self.node(b)?.value;
                if vb.shape() != [channels] {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: vec![channels],
                        rhs: vb.shape().to_vec(),
                    });
                }
                Ok(Some(vb.data().to_vec()))
            }
        }
    }

    // ---- reductions and normalizations ----

    fn check_axis(&self, a: NodeId, axis: usize, op: &'static str) -> Result<(), TensorError> {
        let rank = self.node(a)?.value.rank();
        if axis >= rank {
            return Err(TensorError::Invalid(format!(
                "{op}: axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis, "softmax")?;
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::Softmax(a, axis), v)
    }

    fn reduce_axis(&self, a: NodeId, axis: usize, scale_by_len: bool) -> Tensor {
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &va.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale_by_len {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out).expect("reduced shape")
    }

    /// Sum over `axis`, dropping it.
    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis, "sum")?;
        let v = self.reduce_axis(a, axis, false);
        self.push(Op::Sum(a, axis), v)
    }

    /// Mean over `axis`, dropping it.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis, "mean")?;
        if self.nodes[a.0].value.shape()[axis] == 0 {
            return Err(TensorError::Invalid("mean over empty axis".into()));
        }
        let v = self.reduce_axis(a, axis, true);
        self.push(Op::Mean(a, axis), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let total: f64 = self.node(a)?.value.data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(total))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.node(a)?.value;
        if va.numel() == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let total: f64 = va.data().iter().sum();
        let v = Tensor::scalar(total / va.numel() as f64);
        self.push(Op::MeanAll(a), v)
    }

    /// Divide each lane along `axis` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis, "l2_normalize")?;
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let ss: f64 = (0..len).map(|j| x[at(j)] * x[at(j)]).sum();
                let norm = ss.sqrt().max(L2_EPS);
                for j in 0..len {
                    out[at(j)] = x[at(j)] / norm;
                }
                norms.push(norm);
            }
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(
            Op::L2Normalize {
                input: a,
                axis,
                norms,
            },
            v,
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes of an
    /// `N x C x H x W` tensor (no affine parameters).
    pub fn instance_norm(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.node(a)?.value;
        if va.rank() != 4 {
            return Err(TensorError::Invalid(format!(
                "instance_norm needs N x C x H x W, got {:?}",
                va.shape()
            )));
        }
        let plane = va.shape()[2] * va.shape()[3];
        let lanes = va.shape()[0] * va.shape()[1];
        let mut out = vec![0.0; va.numel()];
        let mut inv_std = Vec::with_capacity(lanes);
        for l in 0..lanes {
            let x = &va.data()[l * plane..(l + 1) * plane];
            let mean = x.iter().sum::<f64>() / plane as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            for (o, v) in out[l * plane..(l + 1) * plane].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push(Op::InstanceNorm { input: a, inv_std }, v)
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.node(a)?.value.clone().reshaped(shape)?;
        self.push(Op::Reshape(a), v)
    }

    /// Select slices along `axis` at `indices` (repeats allowed).
    pub fn gather(
        &mut self,
        a: NodeId,
        axis: usize,
        indices: &[usize],
    ) -> Result<NodeId, TensorError> {
        self.check_axis(a, axis, "gather")?;
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range for axis length {len}"
            )));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                out.extend_from_slice(&va.data()[(o * len + j) * inner..(o * len + j + 1) * inner]);
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = indices.len();
        let v = Tensor::new(shape, out)?;
        self.push(
            Op::Gather {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            v,
        )
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        self.check(inputs)?;
        self.check_axis(first, axis, "concat")?;
        let base = self.nodes[first.0].value.shape().to_vec();
        let mut total = 0;
        for id in inputs {
            let s = self.nodes[id.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .enumerate()
                    .all(|(d, &n)| d == axis || n == base[d]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let v = &self.nodes[id.0].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            v,
        )
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a one-element `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, TensorError> {
        let out = self.node(output)?;
        if out.value.numel() != 1 {
            return Err(TensorError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    pub fn gradients(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, TensorError> {
        for id in wrt {
            if !self.node(*id)?.requires_grad {
                return Err(TensorError::NotDifferentiable(id.0));
            }
        }
        let all = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|id| all.get(*id).expect("checked above"))
            .collect())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, &node.value, grads, |i, _, _| g[i]);
                self.acc_broadcast(*b, &node.value, grads, |i, _, _| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, &node.value, grads, |i, _, _| g[i]);
                self.acc_broadcast(*b, &node.value, grads, |i, _, _| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ma, mb) = self.maps(*a, *b, &node.value);
                self.acc_broadcast(*a, &node.value, grads, |i, _, _| g[i] * vb[mb(i)]);
                self.acc_broadcast(*b, &node.value, grads, |i, _, _| g[i] * va[ma(i)]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ma, mb) = self.maps(*a, *b, &node.value);
                self.acc_broadcast(*a, &node.value, grads, |i, _, _| g[i] / vb[mb(i)]);
                self.acc_broadcast(*b, &node.value, grads, |i, _, _| {
                    let d = vb[mb(i)];
                    -g[i] * va[ma(i)] / (d * d)
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ma, mb) = self.maps(*a, *b, &node.value);
                let take_max = matches!(node.op, Op::Maximum(..));
                let picks_a = |i: usize| {
                    let (x, y) = (va[ma(i)], vb[mb(i)]);
                    if take_max {
                        x >= y
                    } else {
                        x <= y
                    }
                };
                self.acc_broadcast(
                    *a,
                    &node.value,
                    grads,
                    |i, _, _| {
                        if picks_a(i) {
                            g[i]
                        } else {
                            0.0
                        }
                    },
                );
                self.acc_broadcast(
                    *b,
                    &node.value,
                    grads,
                    |i, _, _| {
                        if picks_a(i) {
                            0.0
                        } else {
                            g[i]
                        }
                    },
                );
            }
            Op::Neg(a) => self.acc_elementwise(*a, grads, |i, _| -g[i]),
            Op::Abs(a) => self.acc_elementwise(*a, grads, |i, x| {
                if x > 0.0 {
                    g[i]
                } else if x < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            }),
            Op::Exp(a) => self.acc_elementwise(*a, grads, |i, _| g[i] * y[i]),
            Op::Log(a) => self.acc_elementwise(*a, grads, |i, x| g[i] / x),
            // x = 0 with p < 1 has an infinite slope; use the zero subgradient
            Op::Pow(a, p) => self.acc_elementwise(*a, grads, |i, x| {
                if x == 0.0 && *p < 1.0 {
                    0.0
                } else {
                    g[i] * p * x.powf(p - 1.0)
                }
            }),
            Op::Affine(a, s) => self.acc_elementwise(*a, grads, |i, _| g[i] * s),
            Op::Relu(a) => self.acc_elementwise(*a, grads, |i, x| if x > 0.0 { g[i] } else { 0.0 }),
            Op::LeakyRelu(a, s) => self.acc_elementwise(*a, grads, |i, x| {
                if x > 0.0 {
                    g[i]
                } else if x < 0.0 {
                    s * g[i]
                } else {
                    0.0
                }
            }),
            Op::Tanh(a) => self.acc_elementwise(*a, grads, |i, _| g[i] * (1.0 - y[i] * y[i])),
            Op::Sigmoid(a) => self.acc_elementwise(*a, grads, |i, _| g[i] * y[i] * (1.0 - y[i])),
            Op::Clamp(a, lo, hi) => {
                self.acc_elementwise(
                    *a,
                    grads,
                    |i, x| {
                        if x >= *lo && x <= *hi {
                            g[i]
                        } else {
                            0.0
                        }
                    },
                )
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if let Some(ga) = self.grad_buf(*a, grads) {
                    gemm(false, true, m, k, n, 1.0, g, vb.data(), 1.0, ga);
                }
                if let Some(gb) = self.grad_buf(*b, grads) {
                    gemm(true, false, k, n, m, 1.0, va.data(), g, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let back = transpose_data(r, c, g);
                self.acc_elementwise(*a, grads, |i, _| back[i]);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, *bias, geom, cols, &node.value, g, grads),
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                self.conv_transpose2d_backward(*input, *weight, *bias, geom, &node.value, g, grads)
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut back = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            back[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.acc_elementwise(*a, grads, |i, _| back[i]);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                self.acc_elementwise(*a, grads, |i, _| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    debug_assert!(o < outer);
                    g[o * inner + r] * scale
                });
            }
            Op::SumAll(a) => self.acc_elementwise(*a, grads, |_, _| g[0]),
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc_elementwise(*a, grads, |_, _| g[0] / n)
            }
            Op::L2Normalize { input, axis, norms } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut back = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm <= L2_EPS {
                            for j in 0..len {
                                back[at(j)] = g[at(j)] / norm;
                            }
                            continue;
                        }
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            back[at(j)] = (g[at(j)] - y[at(j)] * dot) / norm;
                        }
                    }
                }
                self.acc_elementwise(*input, grads, |i, _| back[i]);
            }
            Op::InstanceNorm { input, inv_std } => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                let mut back = vec![0.0; y.len()];
                for (l, inv) in inv_std.iter().enumerate() {
                    let gl = &g[l * plane..(l + 1) * plane];
                    let yl = &y[l * plane..(l + 1) * plane];
                    let mg = gl.iter().sum::<f64>() / plane as f64;
                    let mgy = gl.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for ((bk, gv), yv) in
                        back[l * plane..(l + 1) * plane].iter_mut().zip(gl).zip(yl)
                    {
                        *bk = inv * (gv - mg - yv * mgy);
                    }
                }
                self.acc_elementwise(*input, grads, |i, _| back[i]);
            }
            Op::Reshape(a) => self.acc_elementwise(*a, grads, |i, _| g[i]),
            Op::Gather {
                input,
                axis,
                indices,
            } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                if let Some(buf) = self.grad_buf(*input, grads) {
                    let n = indices.len();
                    for o in 0..outer {
                        for (k, &j) in indices.iter().enumerate() {
                            let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                            let dst = &mut buf[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for id in inputs {
                    let len = self.shape(*id)[*axis];
                    if let Some(buf) = self.grad_buf(*id, grads) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in buf[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: &ConvGeom,
        cols: &[f64],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, cout) = (out.shape()[0], out.shape()[1]);
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.channels * geom.in_h * geom.in_w;
        if let Some(b) = bias {
            if let Some(gb) = self.grad_buf(b, grads) {
                accumulate_channel_sums(gb, g, n, cout, p);
            }
        }
        if let Some(gw) = self.grad_buf(weight, grads) {
            for b in 0..n {
                let gout = &g[b * cout * p..(b + 1) * cout * p];
                let c = &cols[b * rows * p..(b + 1) * rows * p];
                gemm(false, true, cout, rows, p, 1.0, gout, c, 1.0, gw);
            }
        }
        let w = self.value(weight).data();
        if let Some(gx) = self.grad_buf(input, grads) {
            let mut gcols = vec![0.0; rows * p];
            for b in 0..n {
                let gout = &g[b * cout * p..(b + 1) * cout * p];
                gemm(true, false, rows, p, cout, 1.0, w, gout, 0.0, &mut gcols);
                col2im(&gcols, geom, &mut gx[b * in_plane..(b + 1) * in_plane]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: &ConvGeom,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, cout) = (out.shape()[0], out.shape()[1]);
        let out_plane = geom.in_h * geom.in_w;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let cin = self.shape(input)[1];
        if let Some(b) = bias {
            if let Some(gb) = self.grad_buf(b, grads) {
                accumulate_channel_sums(gb, g, n, cout, out_plane);
            }
        }
        let need_w = self.requires_grad(weight);
        let need_x = self.requires_grad(input);
        if !need_w && !need_x {
            return;
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut gcols = vec![0.0; rows * p];
        for b in 0..n {
            im2col(
                &g[b * cout * out_plane..(b + 1) * cout * out_plane],
                geom,
                &mut gcols,
            );
            if let Some(gw) = self.grad_buf(weight, grads) {
                let xb = &x[b * cin * p..(b + 1) * cin * p];
                gemm(false, true, cin, rows, p, 1.0, xb, &gcols, 1.0, gw);
            }
            if let Some(gx) = self.grad_buf(input, grads) {
                let gxb = &mut gx[b * cin * p..(b + 1) * cin * p];
                gemm(false, false, cin, p, rows, 1.0, w, &gcols, 1.0, gxb);
            }
        }
    }

    /// Mutable gradient accumulator for `id`, or `None` when untracked.
    fn grad_buf<'g>(
        &self,
        id: NodeId,
        grads: &'g mut [Option<Vec<f64>>],
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let numel = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn acc_elementwise(
        &self,
        id: NodeId,
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let x = self.nodes[id.0].value.data();
        if let Some(buf) = self.grad_buf(id, grads) {
            for (i, (b, &xv)) in buf.iter_mut().zip(x).enumerate() {
                *b += f(i, xv);
            }
        }
    }

    fn maps(
        &self,
        a: NodeId,
        b: NodeId,
        out: &Tensor,
    ) -> (impl Fn(usize) -> usize, impl Fn(usize) -> usize) {
        let mk = |id: NodeId| {
            let s = self.shape(id);
            let m = (s != out.shape()).then(|| broadcast_index_map(out.shape(), s));
            move |i: usize| m.as_ref().map_or(i, |m| m[i])
        };
        (mk(a), mk(b))
    }

    /// Accumulate `f(out_index)` into `id`, summing over broadcast axes.
    fn acc_broadcast(
        &self,
        id: NodeId,
        out: &Tensor,
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(usize, (), ()) -> f64,
    ) {
        let shape = self.shape(id).to_vec();
        let Some(buf) = self.grad_buf(id, grads) else {
            return;
        };
        if shape == out.shape() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i, (), ());
            }
        } else {
            let m = broadcast_index_map(out.shape(), &shape);
            for (i, &j) in m.iter().enumerate() {
                buf[j] += f(i, (), ());
            }
        }
    }
}

const L2_EPS: f64 = 1e-12;
const INSTANCE_NORM_EPS: f64 = 1e-5;

fn transpose_data(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn add_channel_bias(out: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(bias) = bias {
        for (c, b) in bias.iter().enumerate() {
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
    }
}

fn accumulate_channel_sums(gb: &mut [f64], g: &[f64], n: usize, channels: usize, plane: usize) {
    for b in 0..n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc += g[start..start + plane].iter().sum::<f64>();
        }
    }
}
