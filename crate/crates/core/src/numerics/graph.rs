//! Reverse-mode autodiff over an append-only operation record.
//!
//! Every op appends one node holding its forward value; nodes only refer
//! to earlier nodes, so the node vector is already in topological order
//! and backward is a single reverse sweep.

use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// How the right operand of `add`/`mul` lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[C]` or `[1, C, 1, 1]`, one value per channel.
    PerChannel,
    /// rhs is `[N, 1, H, W]`, shared across all channels.
    AcrossChannels,
}

/// The differentiable operations, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    MaxPool2d,
    UpsampleNearest,
    UpsampleBilinear,
    Relu,
    Sigmoid,
    Add,
    Mul,
    ConcatChannels,
    Sum,
    Scale,
    AddScalar,
    Div,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::UpsampleNearest,
        OpKind::UpsampleBilinear,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Add,
        OpKind::Mul,
        OpKind::ConcatChannels,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Div,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Div => "div",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        mode: UpsampleMode,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Concat(Vec<Var>),
    Sum(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Div(Var, Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Upsample {
                mode: UpsampleMode::Nearest,
                ..
            } => OpKind::UpsampleNearest,
            Op::Upsample {
                mode: UpsampleMode::Bilinear,
                ..
            } => OpKind::UpsampleBilinear,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Concat(_) => OpKind::ConcatChannels,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Div(..) => OpKind::Div,
        })
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Build one per forward pass; it owns every
/// intermediate value until dropped.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong
    /// (gradients scaled by 1.01). Used as a negative control for the
    /// gradient checker.
    pub fn with_fault(kind: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `d(loss)/d(v)` after [`Graph::backward`]; `None` if `v` received no gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let geometry = ConvGeometry::new(
            x.dims4("conv2d")?,
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let data = kernels::conv2d_forward(
            &geometry,
            x.data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.output_shape().to_vec(), data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial axes (2,3) must be even, got {h}x{w}"),
            ));
        }
        let (data, argmax) = kernels::maxpool2d_forward([n, c, h, w], x.data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn upsample2d(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims4("upsample2d")?;
        let data = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest_forward(dims, x.data()),
            UpsampleMode::Bilinear => kernels::upsample_bilinear_forward(dims, x.data()),
        };
        let [n, c, h, w] = dims;
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Upsample { input, mode }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Sigmoid(input))
    }

    fn broadcast(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<Broadcast> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a == b {
            return Ok(Broadcast::Same);
        }
        if a.len() == 4 {
            let c = a[1];
            if b == [c] || b == [1, c, 1, 1] {
                return Ok(Broadcast::PerChannel);
            }
            if b == [a[0], 1, a[2], a[3]] {
                return Ok(Broadcast::AcrossChannels);
            }
        }
        Err(Error::shape(
            op,
            format!("cannot broadcast {b:?} onto {a:?} (only equal shapes, per-channel [C] or single-channel [N,1,H,W])"),
        ))
    }

    fn binary(
        &self,
        lhs: Var,
        rhs: Var,
        bc: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let mut out = a.clone();
        let dims = a.shape().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, &y) in out.data_mut().iter_mut().zip(b) {
                    *o = f(*o, y);
                }
            }
            Broadcast::PerChannel => {
                let plane: usize = dims[2..].iter().product();
                for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                    let y = b[i % dims[1]];
                    chunk.iter_mut().for_each(|o| *o = f(*o, y));
                }
            }
            Broadcast::AcrossChannels => {
                let plane: usize = dims[2..].iter().product();
                for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                    let n = i / dims[1];
                    let ys = &b[n * plane..(n + 1) * plane];
                    chunk.iter_mut().zip(ys).for_each(|(o, &y)| *o = f(*o, y));
                }
            }
        }
        out
    }

    /// Element-wise sum. `rhs` may also be a per-channel bias or a
    /// single-channel map broadcast over channels.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let bc = self.broadcast("add", lhs, rhs)?;
        let value = self.binary(lhs, rhs, bc, |a, b| a + b);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Add(lhs, rhs, bc)))
    }

    /// Element-wise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let bc = self.broadcast("mul", lhs, rhs)?;
        let value = self.binary(lhs, rhs, bc, |a, b| a * b);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Mul(lhs, rhs, bc)))
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape(
                "div",
                format!("{:?} vs {:?}", self.shape(lhs), self.shape(rhs)),
            ));
        }
        let value = self.binary(lhs, rhs, Broadcast::Same, |a, b| a / b);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Div(lhs, rhs)))
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat_channels", format!("rank < 2: {base:?}")));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("non-channel axes differ: {base:?} vs {s:?}"),
                ));
            }
            channels += s[1];
        }
        let batch = base[0];
        let plane: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * plane);
        for n in 0..batch {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[1] * plane;
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec())))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Sum(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Scale(input, factor))
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        let value = self.value(input).map(|v| v + offset);
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::AddScalar(input))
    }

    /// Populates `grad` on every node that requires it, seeding
    /// `d(loss)/d(loss) = 1`. Gradients from several consumers accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Usage(
                "backward called on a leaf tensor with no recorded operations".into(),
            ));
        }
        let Some(value) = node.value.item() else {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        };
        if !value.is_finite() {
            return Err(Error::Usage(format!("loss is not finite: {value}")));
        }
        if !node.requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let fault = (self.fault.is_some() && self.fault == self.nodes[i].op.kind())
                .then_some(1.01);
            let contributions = self.backward_rule(i, &upstream);
            for (target, mut g) in contributions {
                if let Some(f) = fault {
                    g.data_mut().iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(target, g);
            }
            self.nodes[i].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, g: Tensor) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its operands.
    fn backward_rule(&self, i: usize, up: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut dx = self.wants(*input).then(|| Tensor::zeros(x.shape()));
                let mut dk = self.wants(*kernel).then(|| Tensor::zeros(k.shape()));
                let mut db = self.wants(*bias).then(|| Tensor::zeros(self.shape(*bias)));
                kernels::conv2d_backward(
                    geometry,
                    x.data(),
                    k.data(),
                    up.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                out.extend(dx.map(|t| (*input, t)));
                out.extend(dk.map(|t| (*kernel, t)));
                out.extend(db.map(|t| (*bias, t)));
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(up.data()) {
                    d[idx] += g;
                }
                out.push((*input, dx));
            }
            Op::Upsample { input, mode } => {
                let x = self.value(*input);
                let dims = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let mut dx = Tensor::zeros(x.shape());
                match mode {
                    UpsampleMode::Nearest => {
                        kernels::upsample_nearest_backward(dims, up.data(), dx.data_mut())
                    }
                    UpsampleMode::Bilinear => {
                        kernels::upsample_bilinear_backward(dims, up.data(), dx.data_mut())
                    }
                }
                out.push((*input, dx));
            }
            Op::Relu(input) => {
                let mut dx = up.clone();
                for (g, &x) in dx.data_mut().iter_mut().zip(self.value(*input).data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                out.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let mut dx = up.clone();
                for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *g *= y * (1.0 - y);
                }
                out.push((*input, dx));
            }
            Op::Add(lhs, rhs, bc) => {
                if self.wants(*lhs) {
                    out.push((*lhs, up.clone()));
                }
                if self.wants(*rhs) {
                    out.push((*rhs, self.reduce_broadcast(up, *rhs, *bc, None)));
                }
            }
            Op::Mul(lhs, rhs, bc) => {
                if self.wants(*lhs) {
                    let rhs_full = self.expand(*rhs, *bc, up.shape());
                    let mut dl = up.clone();
                    dl.data_mut()
                        .iter_mut()
                        .zip(rhs_full.data())
                        .for_each(|(g, b)| *g *= b);
                    out.push((*lhs, dl));
                }
                if self.wants(*rhs) {
                    let lhs_v = self.value(*lhs);
                    out.push((*rhs, self.reduce_broadcast(up, *rhs, *bc, Some(lhs_v))));
                }
            }
            Op::Div(lhs, rhs) => {
                let b = self.value(*rhs).data();
                if self.wants(*lhs) {
                    let mut dl = up.clone();
                    dl.data_mut().iter_mut().zip(b).for_each(|(g, b)| *g /= b);
                    out.push((*lhs, dl));
                }
                if self.wants(*rhs) {
                    let mut dr = up.clone();
                    for ((g, &q), &b) in dr.data_mut().iter_mut().zip(node.value.data()).zip(b) {
                        *g *= -q / b;
                    }
                    out.push((*rhs, dr));
                }
            }
            Op::Concat(inputs) => {
                let batch = up.shape()[0];
                let plane: usize = up.shape()[2..].iter().product();
                let total = up.shape()[1] * plane;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[1] * plane;
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(batch * len);
                        for n in 0..batch {
                            let start = n * total + offset;
                            d.extend_from_slice(&up.data()[start..start + len]);
                        }
                        out.push((v, Tensor::new(self.shape(v).to_vec(), d).expect("concat slice")));
                    }
                    offset += len;
                }
            }
            Op::Sum(input) => {
                let g = up.data()[0];
                out.push((*input, Tensor::full(self.shape(*input), g)));
            }
            Op::Scale(input, factor) => out.push((*input, up.map(|g| g * factor))),
            Op::AddScalar(input) => out.push((*input, up.clone())),
        }
        out
    }

    /// rhs expanded to the lhs shape (as the forward pass saw it).
    fn expand(&self, rhs: Var, bc: Broadcast, shape: &[usize]) -> Tensor {
        let b = self.value(rhs);
        match bc {
            Broadcast::Same => b.clone(),
            _ => {
                let mut t = Tensor::zeros(shape);
                let plane: usize = shape[2..].iter().product();
                for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
                    match bc {
                        Broadcast::PerChannel => chunk.fill(b.data()[i % shape[1]]),
                        _ => {
                            let n = i / shape[1];
                            chunk.copy_from_slice(&b.data()[n * plane..(n + 1) * plane]);
                        }
                    }
                }
                t
            }
        }
    }

    /// Sums `up ⊙ scale` back down to the rhs operand's shape.
    fn reduce_broadcast(&self, up: &Tensor, rhs: Var, bc: Broadcast, scale: Option<&Tensor>) -> Tensor {
        let rhs_shape = self.shape(rhs);
        let prod = |i: usize| up.data()[i] * scale.map_or(1.0, |s| s.data()[i]);
        match bc {
            Broadcast::Same => {
                let data = (0..up.len()).map(prod).collect();
                Tensor::new(rhs_shape.to_vec(), data).expect("same shape")
            }
            Broadcast::PerChannel => {
                let c = up.shape()[1];
                let plane: usize = up.shape()[2..].iter().product();
                let mut acc = vec![0.0; c];
                for (chunk_idx, start) in (0..up.len()).step_by(plane).enumerate() {
                    acc[chunk_idx % c] += (start..start + plane).map(prod).sum::<f64>();
                }
                Tensor::new(rhs_shape.to_vec(), acc).expect("per-channel shape")
            }
            Broadcast::AcrossChannels => {
                let c = up.shape()[1];
                let plane: usize = up.shape()[2..].iter().product();
                let mut acc = vec![0.0; up.shape()[0] * plane];
                for (chunk_idx, start) in (0..up.len()).step_by(plane).enumerate() {
                    let n = chunk_idx / c;
                    for (k, a) in acc[n * plane..(n + 1) * plane].iter_mut().enumerate() {
                        *a += prod(start + k);
                    }
                }
                Tensor::new(rhs_shape.to_vec(), acc).expect("single-channel shape")
            }
        }
    }
}

/// Logistic function. Saturated inputs are clamped to the nearest
/// representable values inside the open interval (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
