//! Reverse-mode automatic differentiation over [`Grid`]s.
//!
//! A [`Tape`] records a computation as it is evaluated; [`Tape::backward`]
//! then walks the record once in reverse to produce gradients. The primitive
//! set is fixed: matrix product, 2-D convolution, smooth activations,
//! elementwise add/scale/concat, bias broadcasts, reductions, mean-squared
//! error and softmax cross-entropy with label smoothing. Anything else is
//! unrepresentable, so unsupported computations fail to construct at compile
//! time rather than at run time.
//!
//! All primitives are smooth, so central finite differences are a valid
//! oracle everywhere; functions with piecewise-linear kinks at the probe
//! point are outside the supported input class of [`grad_check`].
//!
//! A tape is confined to one thread. Data-parallel training uses one tape
//! per shard and reduces gradients in a fixed order at a synchronization
//! point.

use super::grid::Grid;
use super::kernels::{self, Conv2dDims};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-node gradients produced by [`Tape::backward`]; `None` where no
/// gradient was required or reachable.
pub struct Gradients(Vec<Option<Grid>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Grid> {
        self.0[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Grid> {
        self.0[id.0].take()
    }

    /// Gradient for `id`, or zeros of the given shape when absent.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Grid {
        self.get(id).cloned().unwrap_or_else(|| Grid::zeros(shape))
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Differentiable leaf.
    Input,
    /// Non-differentiable leaf.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Silu(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Square(NodeId),
    Reshape(NodeId),
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
        n: usize,
        k: usize,
        m: usize,
    },
    AddRowBias {
        x: NodeId,
        bias: NodeId,
        n: usize,
        m: usize,
    },
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
        channels: usize,
        plane: usize,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        dims: Conv2dDims,
    },
    AvgPool2d {
        x: NodeId,
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    UpsampleNearest {
        x: NodeId,
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    GlobalAvgPool {
        x: NodeId,
        channels: usize,
        plane: usize,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        classes: usize,
        smoothing: f64,
    },
}

struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph with forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Grid {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).require_same_shape(self.value(b), "add")?;
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::add(self.value(a).data(), self.value(b).data()),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).require_same_shape(self.value(b), "sub")?;
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::sub(self.value(a).data(), self.value(b).data()),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).require_same_shape(self.value(b), "mul")?;
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::mul(self.value(a).data(), self.value(b).data()),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::scale(self.value(a).data(), c),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::silu(self.value(a).data()),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Silu(a), rg))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::sin_fwd(self.value(a).data()),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sin(a), rg))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::cos_fwd(self.value(a).data()),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Cos(a), rg))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::new(
            self.value(a).shape().to_vec(),
            kernels::square(self.value(a).data()),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Square(a), rg))
    }

    /// Metadata-only shape change.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = Grid::new(
            vec![n, m],
            kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { lhs: a, rhs: b, n, k, m }, rg))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let value = Grid::new(
            sx.to_vec(),
            kernels::add_row_bias(self.value(x).data(), self.value(bias).data(), n, m),
        )?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowBias { x, bias, n, m }, rg))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (channels, plane) = (sx[0], sx[1] * sx[2]);
        let value = Grid::new(
            sx.to_vec(),
            kernels::add_channel_bias(self.value(x).data(), self.value(bias).data(), channels, plane),
        )?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            value,
            Op::AddChannelBias {
                x,
                bias,
                channels,
                plane,
            },
            rg,
        ))
    }

    /// `input: [c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`, stride 1.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, padding: usize) -> Result<NodeId> {
        let (si, sw) = (self.value(input).shape(), self.value(weight).shape());
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let dims = Conv2dDims {
            in_channels: si[0],
            height: si[1],
            width: si[2],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            padding,
        };
        if dims.kernel_h > dims.height + 2 * padding || dims.kernel_w > dims.width + 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: si.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let value = Grid::new(
            vec![dims.out_channels, dims.out_height(), dims.out_width()],
            kernels::conv2d(self.value(input).data(), self.value(weight).data(), dims),
        )?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, dims }, rg))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || sx[1] % k != 0 || sx[2] % k != 0 {
            return Err(Error::invalid(format!(
                "avg_pool2d: shape {sx:?} not divisible by {k}"
            )));
        }
        let (channels, h, w) = (sx[0], sx[1], sx[2]);
        let value = Grid::new(
            vec![channels, h / k, w / k],
            kernels::avg_pool2d(self.value(x).data(), channels, h, w, k),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool2d { x, channels, h, w, k }, rg))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::invalid(format!("upsample_nearest: rank-3 input required, got {sx:?}")));
        }
        let (channels, h, w) = (sx[0], sx[1], sx[2]);
        let value = Grid::new(
            vec![channels, h * k, w * k],
            kernels::upsample_nearest(self.value(x).data(), channels, h, w, k),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::UpsampleNearest { x, channels, h, w, k }, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::invalid(format!("global_avg_pool: rank-3 input required, got {sx:?}")));
        }
        let (channels, plane) = (sx[0], sx[1] * sx[2]);
        let value = Grid::new(
            vec![channels],
            kernels::global_avg_pool(self.value(x).data(), channels, plane),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x, channels, plane }, rg))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis0 = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis0 += s[0];
        }
        let mut shape = first;
        shape[0] = axis0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Grid::new(shape, data)?, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::scalar(kernels::sum_all(self.value(a).data()));
        value.check_finite("sum_all")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAll(a), rg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Grid::scalar(kernels::mean_all(self.value(a).data()));
        value.check_finite("mean_all")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanAll(a), rg))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).require_same_shape(self.value(b), "mse")?;
        let value = Grid::scalar(kernels::mse(self.value(a).data(), self.value(b).data()));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let value = Grid::scalar(kernels::softmax_cross_entropy(
            self.value(logits).data(),
            labels,
            classes,
            smoothing,
        ));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                classes,
                smoothing,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `root`. Returns one gradient slot per node
    /// (`None` where no gradient is required or reachable). Each node is
    /// visited exactly once, in reverse topological (= creation) order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            let spread = |grads: &mut Vec<Option<Vec<f32>>>, id: NodeId, len: usize| -> usize {
                if grads[id.0].is_none() {
                    grads[id.0] = Some(vec![0.0; len]);
                }
                id.0
            };
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Add(a, b) => {
                    for &side in &[*a, *b] {
                        if self.rg(side) {
                            let i = spread(&mut grads, side, self.value(side).len());
                            let g = grads[i].as_mut().unwrap();
                            for (gi, go) in g.iter_mut().zip(&gout) {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        let i = spread(&mut grads, *a, self.value(*a).len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    }
                    if self.rg(*b) {
                        let i = spread(&mut grads, *b, self.value(*b).len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi -= go;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b).data().to_vec();
                        let i = spread(&mut grads, *a, self.value(*a).len());
                        let g = grads[i].as_mut().unwrap();
                        for j in 0..g.len() {
                            g[j] += gout[j] * bv[j];
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data().to_vec();
                        let i = spread(&mut grads, *b, self.value(*b).len());
                        let g = grads[i].as_mut().unwrap();
                        for j in 0..g.len() {
                            g[j] += gout[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        let i = spread(&mut grads, *a, self.value(*a).len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go * c;
                        }
                    }
                }
                Op::Silu(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data().to_vec();
                        let i = spread(&mut grads, *a, x.len());
                        kernels::silu_backward(&x, &gout, grads[i].as_mut().unwrap());
                    }
                }
                Op::Sin(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data().to_vec();
                        let i = spread(&mut grads, *a, x.len());
                        let g = grads[i].as_mut().unwrap();
                        for j in 0..g.len() {
                            g[j] += gout[j] * x[j].cos();
                        }
                    }
                }
                Op::Cos(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data().to_vec();
                        let i = spread(&mut grads, *a, x.len());
                        let g = grads[i].as_mut().unwrap();
                        for j in 0..g.len() {
                            g[j] -= gout[j] * x[j].sin();
                        }
                    }
                }
                Op::Square(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data().to_vec();
                        let i = spread(&mut grads, *a, x.len());
                        let g = grads[i].as_mut().unwrap();
                        for j in 0..g.len() {
                            g[j] += gout[j] * 2.0 * x[j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    if self.rg(*a) {
                        let i = spread(&mut grads, *a, self.value(*a).len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    }
                }
                Op::MatMul { lhs, rhs, n, k, m } => {
                    let (lhs, rhs, n, k, m) = (*lhs, *rhs, *n, *k, *m);
                    let a = self.value(lhs).data().to_vec();
                    let b = self.value(rhs).data().to_vec();
                    let mut ga = vec![0.0; a.len()];
                    let mut gb = vec![0.0; b.len()];
                    kernels::matmul_backward(&gout, &a, &b, n, k, m, &mut ga, &mut gb);
                    if self.rg(lhs) {
                        let i = spread(&mut grads, lhs, a.len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&ga) {
                            *gi += go;
                        }
                    }
                    if self.rg(rhs) {
                        let i = spread(&mut grads, rhs, b.len());
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gb) {
                            *gi += go;
                        }
                    }
                }
                Op::AddRowBias { x, bias, n, m } => {
                    let (x, bias, n, m) = (*x, *bias, *n, *m);
                    let mut gx = vec![0.0; n * m];
                    let mut gb = vec![0.0; m];
                    kernels::add_row_bias_backward(&gout, n, m, &mut gx, &mut gb);
                    if self.rg(x) {
                        let i = spread(&mut grads, x, n * m);
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gx) {
                            *gi += go;
                        }
                    }
                    if self.rg(bias) {
                        let i = spread(&mut grads, bias, m);
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gb) {
                            *gi += go;
                        }
                    }
                }
                Op::AddChannelBias {
                    x,
                    bias,
                    channels,
                    plane,
                } => {
                    let (x, bias, channels, plane) = (*x, *bias, *channels, *plane);
                    let mut gx = vec![0.0; channels * plane];
                    let mut gb = vec![0.0; channels];
                    kernels::add_channel_bias_backward(&gout, channels, plane, &mut gx, &mut gb);
                    if self.rg(x) {
                        let i = spread(&mut grads, x, channels * plane);
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gx) {
                            *gi += go;
                        }
                    }
                    if self.rg(bias) {
                        let i = spread(&mut grads, bias, channels);
                        let g = grads[i].as_mut().unwrap();
                        for (gi, go) in g.iter_mut().zip(&gb) {
                            *gi += go;
                        }
                    }
                }
                Op::Conv2d { input, weight, dims } => {
                    let (input, weight, dims) = (*input, *weight, *dims);
                    let iv = self.value(input).data().to_vec();
                    let wv = self.value(weight).data().to_vec();
                    let mut gi = vec![0.0; iv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    kernels::conv2d_backward(&gout, &iv, &wv, dims, &mut gi, &mut gw);
                    if self.rg(input) {
                        let i = spread(&mut grads, input, iv.len());
                        let g = grads[i].as_mut().unwrap();
                        for (a, b) in g.iter_mut().zip(&gi) {
                            *a += b;
                        }
                    }
                    if self.rg(weight) {
                        let i = spread(&mut grads, weight, wv.len());
                        let g = grads[i].as_mut().unwrap();
                        for (a, b) in g.iter_mut().zip(&gw) {
                            *a += b;
                        }
                    }
                }
                Op::AvgPool2d { x, channels, h, w, k } => {
                    if self.rg(*x) {
                        let (x, channels, h, w, k) = (*x, *channels, *h, *w, *k);
                        let i = spread(&mut grads, x, channels * h * w);
                        kernels::avg_pool2d_backward(&gout, channels, h, w, k, grads[i].as_mut().unwrap());
                    }
                }
                Op::UpsampleNearest { x, channels, h, w, k } => {
                    if self.rg(*x) {
                        let (x, channels, h, w, k) = (*x, *channels, *h, *w, *k);
                        let i = spread(&mut grads, x, channels * h * w);
                        kernels::upsample_nearest_backward(
                            &gout,
                            channels,
                            h,
                            w,
                            k,
                            grads[i].as_mut().unwrap(),
                        );
                    }
                }
                Op::GlobalAvgPool { x, channels, plane } => {
                    if self.rg(*x) {
                        let (x, channels, plane) = (*x, *channels, *plane);
                        let i = spread(&mut grads, x, channels * plane);
                        kernels::global_avg_pool_backward(&gout, channels, plane, grads[i].as_mut().unwrap());
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.value(p).len();
                        if self.rg(p) {
                            let i = spread(&mut grads, p, len);
                            let g = grads[i].as_mut().unwrap();
                            for j in 0..len {
                                g[j] += gout[offset + j];
                            }
                        }
                        offset += len;
                    }
                }
                Op::SumAll(a) => {
                    if self.rg(*a) {
                        let i = spread(&mut grads, *a, self.value(*a).len());
                        let g = grads[i].as_mut().unwrap();
                        for gi in g.iter_mut() {
                            *gi += gout[0];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    if self.rg(*a) {
                        let n = self.value(*a).len();
                        let i = spread(&mut grads, *a, n);
                        let g = grads[i].as_mut().unwrap();
                        let s = gout[0] / n as f32;
                        for gi in g.iter_mut() {
                            *gi += s;
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a).data().to_vec();
                    let bv = self.value(b).data().to_vec();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    kernels::mse_backward(gout[0], &av, &bv, &mut ga, &mut gb);
                    if self.rg(a) {
                        let i = spread(&mut grads, a, av.len());
                        let g = grads[i].as_mut().unwrap();
                        for (x, y) in g.iter_mut().zip(&ga) {
                            *x += y;
                        }
                    }
                    if self.rg(b) {
                        let i = spread(&mut grads, b, bv.len());
                        let g = grads[i].as_mut().unwrap();
                        for (x, y) in g.iter_mut().zip(&gb) {
                            *x += y;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    classes,
                    smoothing,
                } => {
                    if self.rg(*logits) {
                        let (logits, classes, smoothing) = (*logits, *classes, *smoothing);
                        let labels = labels.clone();
                        let lv = self.value(logits).data().to_vec();
                        let i = spread(&mut grads, logits, lv.len());
                        kernels::softmax_cross_entropy_backward(
                            gout[0],
                            &lv,
                            &labels,
                            classes,
                            smoothing,
                            grads[i].as_mut().unwrap(),
                        );
                    }
                }
            }
            // Keep every visited node's gradient visible in the result.
            grads[idx] = Some(gout);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, slot) in grads.into_iter().enumerate() {
            match slot {
                Some(g) => out.push(Some(Grid::new(self.nodes[i].value.shape().to_vec(), g)?)),
                None => out.push(None),
            }
        }
        Ok(Gradients(out))
    }

    /// Replay the recorded graph in `f64`, with selected leaf values
    /// overridden. Returns the value of `output` (which must be scalar).
    /// Errors on any non-finite intermediate.
    pub fn eval_f64(&self, output: NodeId, overrides: &[(NodeId, Vec<f64>)]) -> Result<f64> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(output.0 + 1);
        for idx in 0..=output.0 {
            let node = &self.nodes[idx];
            let v: Vec<f64> = match &node.op {
                Op::Input | Op::Constant => {
                    match overrides.iter().find(|(id, _)| id.0 == idx) {
                        Some((_, data)) => data.clone(),
                        None => node.value.data().iter().map(|&x| x as f64).collect(),
                    }
                }
                Op::Add(a, b) => kernels::add(&vals[a.0], &vals[b.0]),
                Op::Sub(a, b) => kernels::sub(&vals[a.0], &vals[b.0]),
                Op::Mul(a, b) => kernels::mul(&vals[a.0], &vals[b.0]),
                Op::Scale(a, c) => kernels::scale(&vals[a.0], *c as f64),
                Op::Silu(a) => kernels::silu(&vals[a.0]),
                Op::Sin(a) => kernels::sin_fwd(&vals[a.0]),
                Op::Cos(a) => kernels::cos_fwd(&vals[a.0]),
                Op::Square(a) => kernels::square(&vals[a.0]),
                Op::Reshape(a) => vals[a.0].clone(),
                Op::MatMul { lhs, rhs, n, k, m } => {
                    kernels::matmul(&vals[lhs.0], &vals[rhs.0], *n, *k, *m)
                }
                Op::AddRowBias { x, bias, n, m } => {
                    kernels::add_row_bias(&vals[x.0], &vals[bias.0], *n, *m)
                }
                Op::AddChannelBias {
                    x,
                    bias,
                    channels,
                    plane,
                } => kernels::add_channel_bias(&vals[x.0], &vals[bias.0], *channels, *plane),
                Op::Conv2d { input, weight, dims } => {
                    kernels::conv2d(&vals[input.0], &vals[weight.0], *dims)
                }
                Op::AvgPool2d { x, channels, h, w, k } => {
                    kernels::avg_pool2d(&vals[x.0], *channels, *h, *w, *k)
                }
                Op::UpsampleNearest { x, channels, h, w, k } => {
                    kernels::upsample_nearest(&vals[x.0], *channels, *h, *w, *k)
                }
                Op::GlobalAvgPool { x, channels, plane } => {
                    kernels::global_avg_pool(&vals[x.0], *channels, *plane)
                }
                Op::Concat { parts } => {
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(&vals[p.0]);
                    }
                    data
                }
                Op::SumAll(a) => vec![kernels::sum_all(&vals[a.0])],
                Op::MeanAll(a) => vec![kernels::mean_all(&vals[a.0])],
                Op::Mse(a, b) => vec![kernels::mse(&vals[a.0], &vals[b.0])],
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    classes,
                    smoothing,
                } => vec![kernels::softmax_cross_entropy(
                    &vals[logits.0],
                    labels,
                    *classes,
                    *smoothing,
                )],
            };
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("eval_f64 node {idx}")));
            }
            vals.push(v);
        }
        let out = &vals[output.0];
        if out.len() != 1 {
            return Err(Error::invalid("eval_f64 output must be scalar".to_string()));
        }
        Ok(out[0])
    }
}

/// Builder closure: given a tape and the input node ids, record the
/// computation and return the output node.
pub type TapeFn<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Record `f` over `inputs`, run the reverse pass, and return the scalar
/// output value together with one gradient grid per input.
pub fn record_and_backward(f: TapeFn, inputs: &[Grid]) -> Result<(Grid, Vec<Grid>)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|g| tape.input(g.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).clone();
    let input_grads = ids
        .iter()
        .map(|id| grads.get_or_zeros(*id, tape.value(*id).shape()))
        .collect();
    Ok((value, input_grads))
}

/// Compare reverse-mode gradients against central finite differences of the
/// same computation replayed in `f64` with perturbation `step`.
///
/// Returns the maximum over all input coordinates of
/// `|autodiff - central| / (|central| + 1e-8)`.
///
/// Valid only where `f` is smooth at `inputs`; every primitive of [`Tape`]
/// is smooth, but probing at a point where a composition has negligible
/// curvature-free gradient may still amplify noise. Inputs sitting exactly
/// on a piecewise-linear kink are unsupported.
pub fn grad_check(f: TapeFn, inputs: &[Grid], step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|g| tape.input(g.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid("grad_check output must be scalar"));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (input_idx, id) in ids.iter().enumerate() {
        let base: Vec<f64> = inputs[input_idx].data().iter().map(|&v| v as f64).collect();
        let ad = grads.get_or_zeros(*id, inputs[input_idx].shape());
        for coord in 0..base.len() {
            let mut plus = base.clone();
            plus[coord] += step;
            let mut minus = base.clone();
            minus[coord] -= step;
            let fp = tape.eval_f64(out, &[(*id, plus)])?;
            let fm = tape.eval_f64(out, &[(*id, minus)])?;
            let central = (fp - fm) / (2.0 * step);
            let rel = (ad.data()[coord] as f64 - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_value_and_grad() {
        // f(x) = x^2 at x = 3: value 9, gradient 6
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let sq = tape.square(ids[0])?;
            tape.sum_all(sq)
        };
        let (value, grads) = record_and_backward(&f, &[Grid::scalar(3.0)]).unwrap();
        assert_eq!(value.item(), 9.0);
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn mean_square_grad() {
        // f(x) = mean(x^2), x = [1, 2]: grad = [1, 2]
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let sq = tape.square(ids[0])?;
            tape.mean_all(sq)
        };
        let x = Grid::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (_, grads) = record_and_backward(&f, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_check_square() {
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let sq = tape.square(ids[0])?;
            tape.sum_all(sq)
        };
        let err = grad_check(&f, &[Grid::scalar(3.0)], 1e-3).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Grid::zeros(&[2, 3]));
        let b = tape.input(Grid::zeros(&[3, 3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn constant_receives_no_grad() {
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let c = tape.constant(Grid::scalar(5.0));
            let prod = tape.mul(ids[0], c)?;
            tape.sum_all(prod)
        };
        let (value, grads) = record_and_backward(&f, &[Grid::scalar(2.0)]).unwrap();
        assert_eq!(value.item(), 10.0);
        assert_eq!(grads[0].item(), 5.0);
    }

    #[test]
    fn forward_through_tape_matches_direct_kernels_bitwise() {
        // perceptron: silu(x W1 + b1) W2, then mean
        let x = Grid::from_fn(&[1, 4], |i| 0.3 * i as f32 - 0.5);
        let w1 = Grid::from_fn(&[4, 3], |i| 0.1 * (i as f32) - 0.2);
        let b1 = Grid::from_fn(&[3], |i| 0.05 * i as f32);
        let w2 = Grid::from_fn(&[3, 2], |i| 0.07 * (i as f32) - 0.1);

        let mut tape = Tape::new();
        let (xi, w1i, b1i, w2i) = (
            tape.input(x.clone()),
            tape.input(w1.clone()),
            tape.input(b1.clone()),
            tape.input(w2.clone()),
        );
        let h = tape.matmul(xi, w1i).unwrap();
        let h = tape.add_row_bias(h, b1i).unwrap();
        let h = tape.silu(h).unwrap();
        let o = tape.matmul(h, w2i).unwrap();
        let m = tape.mean_all(o).unwrap();

        let h_direct = kernels::matmul(x.data(), w1.data(), 1, 4, 3);
        let h_direct = kernels::add_row_bias(&h_direct, b1.data(), 1, 3);
        let h_direct = kernels::silu(&h_direct);
        let o_direct = kernels::matmul(&h_direct, w2.data(), 1, 3, 2);
        let m_direct = kernels::mean_all(&o_direct);

        assert_eq!(tape.value(o).data(), &o_direct[..]);
        assert_eq!(tape.value(m).item(), m_direct);
    }

    #[test]
    fn two_layer_perceptron_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Grid::standard_normal(&[2, 5], &mut rng);
        let w1 = Grid::standard_normal(&[5, 4], &mut rng);
        let b1 = Grid::standard_normal(&[4], &mut rng);
        let w2 = Grid::standard_normal(&[4, 1], &mut rng);
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let h = tape.matmul(ids[0], ids[1])?;
            let h = tape.add_row_bias(h, ids[2])?;
            let h = tape.silu(h)?;
            let o = tape.matmul(h, ids[3])?;
            let sq = tape.square(o)?;
            tape.mean_all(sq)
        };
        let err = grad_check(&f, &[x, w1, b1, w2], 1e-3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn conv_pool_upsample_concat_grad_check() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Grid::standard_normal(&[2, 4, 4], &mut rng);
        let w = Grid::standard_normal(&[3, 2, 3, 3], &mut rng).map(|v| v * 0.3);
        let bias = Grid::standard_normal(&[3], &mut rng);
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            let c = tape.conv2d(ids[0], ids[1], 1)?;
            let c = tape.add_channel_bias(c, ids[2])?;
            let c = tape.silu(c)?;
            let p = tape.avg_pool2d(c, 2)?;
            let u = tape.upsample_nearest(p, 2)?;
            let j = tape.concat(&[u, c])?;
            let g = tape.global_avg_pool(j)?;
            let sq = tape.square(g)?;
            tape.sum_all(sq)
        };
        let err = grad_check(&f, &[x, w, bias], 1e-3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn cross_entropy_grad_check() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let logits = Grid::standard_normal(&[3, 5], &mut rng);
        let f = |tape: &mut Tape, ids: &[NodeId]| {
            tape.softmax_cross_entropy(ids[0], &[0, 3, 4], 0.1)
        };
        let err = grad_check(&f, &[logits], 1e-3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn eval_f64_reports_non_finite() {
        // record at a tame point, then replay at one that overflows
        let mut tape = Tape::new();
        let id = tape.input(Grid::scalar(1.2));
        let mut cur = id;
        for _ in 0..8 {
            cur = tape.square(cur).unwrap();
        }
        let err = tape.eval_f64(cur, &[(id, vec![50.0])]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn recording_non_finite_intermediate_errors() {
        let mut tape = Tape::new();
        let id = tape.input(Grid::scalar(3.0e20));
        let sq = tape.square(id); // overflows f32
        assert!(matches!(sq, Err(Error::NonFinite(_))));
    }
}
