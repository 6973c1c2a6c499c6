//! Attention U-Net: a contracting path of conv blocks and max pooling, an
//! expanding path of bilinear upsampling and conv blocks, and additive
//! attention gates that rescale each skip tensor before it is concatenated
//! into the decoder.

mod checkpoint;

use log::debug;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::metrics::soft_dice_loss;
use crate::numerics::{Graph, Tensor, UpsampleMode, Var};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    /// Channels at the top level; doubled at every level below.
    pub base_channels: usize,
    pub attention: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            depth: 3,
            base_channels: 16,
            attention: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.in_channels", self.in_channels),
            ("model.out_channels", self.out_channels),
            ("model.depth", self.depth),
            ("model.base_channels", self.base_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.depth > 16 {
            return Err(Error::config("model.depth", "must be at most 16"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named model parameters in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Usage(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat vector; on a length mismatch
    /// nothing is modified.
    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "set_weights",
                format!("expected {} values, got {}", self.numel(), flat.len()),
            ));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, params[self.weight], params[self.bias], self.stride, self.padding)
    }

    fn apply_relu(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let y = self.apply(g, params, x)?;
        Ok(g.relu(y))
    }
}

/// Additive attention gate between a skip tensor `x` and the gating tensor
/// `g` from the level below (half the resolution of `x`).
#[derive(Clone, Copy, Debug)]
pub struct AttentionGate {
    w_x: ConvLayer,
    w_g: ConvLayer,
    psi: ConvLayer,
}

impl AttentionGate {
    /// Returns `(gated_x, coefficients)`; coefficients are `[N, 1, H, W]`
    /// at the resolution of `x`.
    pub fn apply(&self, graph: &mut Graph, params: &[Var], x: Var, g: Var) -> Result<(Var, Var)> {
        let (xs, gs) = (graph.value(x).dims4("attention_gate")?, graph.value(g).dims4("attention_gate")?);
        if xs[0] != gs[0] || xs[2] != 2 * gs[2] || xs[3] != 2 * gs[3] {
            return Err(Error::shape(
                "attention_gate",
                format!("gating tensor {gs:?} must be at half the resolution of skip tensor {xs:?}"),
            ));
        }
        let theta_x = self.w_x.apply(graph, params, x)?;
        let phi_g = self.w_g.apply(graph, params, g)?;
        let joint = graph.add(theta_x, phi_g)?;
        let joint = graph.relu(joint);
        let logits = self.psi.apply(graph, params, joint)?;
        let coarse = graph.sigmoid(logits);
        let coefficients = graph.upsample2d(coarse, UpsampleMode::Bilinear)?;
        let gated = graph.mul(x, coefficients)?;
        Ok((gated, coefficients))
    }

    /// Index of the bias of the final 1-channel projection.
    pub fn psi_bias_index(&self) -> usize {
        self.psi.bias
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl ConvBlock {
    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let y = self.conv1.apply_relu(g, params, x)?;
        self.conv2.apply_relu(g, params, y)
    }
}

#[derive(Clone, Copy, Debug)]
struct DecoderLevel {
    level: usize,
    gate: Option<AttentionGate>,
    up: ConvLayer,
    block: ConvBlock,
}

/// Per-level record of one gate evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GateTrace {
    pub level: usize,
    pub skip: Var,
    pub gated: Var,
    pub coefficients: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    pub gates: Vec<GateTrace>,
}

#[derive(Clone, Debug)]
pub struct AttentionUNet {
    config: ModelConfig,
    params: ParameterSet,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    head: ConvLayer,
}

struct Builder {
    entries: Vec<(String, Tensor)>,
    rng: rng::Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let weight = Tensor::randn(vec![cout, cin, k, k], (2.0 / fan_in).sqrt(), &mut self.rng);
        self.entries.push((format!("{name}.weight"), weight));
        self.entries.push((format!("{name}.bias"), Tensor::zeros(vec![cout])));
        ConvLayer {
            weight: self.entries.len() - 2,
            bias: self.entries.len() - 1,
            stride,
            padding,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> ConvBlock {
        ConvBlock {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1),
        }
    }
}

impl AttentionUNet {
    /// Builds the network with He-normal kernels and zero biases drawn
    /// from a stream seeded by `config.init_seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            entries: Vec::new(),
            rng: rng::stream(config.init_seed, &[tag::INIT]),
        };
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels_at(level);
            encoder.push(b.block(&format!("enc{level}"), cin, c));
            cin = c;
        }
        let bottleneck = b.block("bottleneck", cin, config.channels_at(config.depth));
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let (c, c_below) = (config.channels_at(level), config.channels_at(level + 1));
            let gate = config.attention.then(|| {
                let inter = (c_below / 2).max(1);
                AttentionGate {
                    w_x: b.conv(&format!("dec{level}.gate.wx"), c, inter, 2, 2, 0),
                    w_g: b.conv(&format!("dec{level}.gate.wg"), c_below, inter, 1, 1, 0),
                    psi: b.conv(&format!("dec{level}.gate.psi"), inter, 1, 1, 1, 0),
                }
            });
            let up = b.conv(&format!("dec{level}.up"), c_below, c, 3, 1, 1);
            let block = b.block(&format!("dec{level}"), 2 * c, c);
            decoder.push(DecoderLevel {
                level,
                gate,
                up,
                block,
            });
        }
        let head = b.conv("head", config.base_channels, config.out_channels, 1, 1, 0);
        let params = ParameterSet::new(b.entries)?;
        debug!(
            "built model depth={} base={} attention={} params={}",
            config.depth,
            config.base_channels,
            config.attention,
            params.numel()
        );
        Ok(AttentionUNet {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ParameterSet {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn get_weights(&self) -> Vec<f64> {
        self.params.flatten()
    }

    pub fn set_weights(&mut self, flat: &[f64]) -> Result<()> {
        self.params.assign(flat)
    }

    /// Replaces all parameters after checking names and shapes; reports the
    /// first tensor that does not match this architecture.
    pub fn load_parameters(&mut self, other: ParameterSet) -> Result<()> {
        if other.len() != self.params.len() {
            let first_extra = self
                .params
                .names()
                .find(|n| other.get(n).is_none())
                .or_else(|| other.names().find(|n| self.params.get(n).is_none()))
                .unwrap_or("<none>");
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {} (first mismatch: {first_extra})",
                other.len(),
                self.params.len()
            )));
        }
        for ((mine, t), (theirs, u)) in self.params.iter().zip(other.iter()) {
            if mine != theirs || t.shape() != u.shape() {
                return Err(Error::Format(format!(
                    "tensor mismatch: model expects {mine} {:?}, checkpoint has {theirs} {:?}",
                    t.shape(),
                    u.shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    /// Attention gate of the decoder level at `level` (0 = top), if enabled.
    pub fn gate(&self, level: usize) -> Option<&AttentionGate> {
        self.decoder.iter().find(|d| d.level == level)?.gate.as_ref()
    }

    /// Adds every parameter to `graph` as a leaf, in parameter order.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), requires_grad))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("forward", format!("expected NCHW input, got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "forward",
                format!("spatial size {h}x{w} is not divisible by 2^depth = {m}"),
            ));
        }
        Ok(())
    }

    /// Records a forward pass using `params` (from [`Self::bind`]).
    pub fn forward_graph(&self, graph: &mut Graph, params: &[Var], input: Var) -> Result<ForwardTrace> {
        self.check_input(graph.shape(input))?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for block in &self.encoder {
            let y = block.apply(graph, params, x)?;
            skips.push(y);
            x = graph.maxpool2d(y)?;
        }
        let mut current = self.bottleneck.apply(graph, params, x)?;
        let mut gates = Vec::new();
        for dec in &self.decoder {
            let skip = skips[dec.level];
            let gated = match &dec.gate {
                Some(gate) => {
                    let (gated, coefficients) = gate.apply(graph, params, skip, current)?;
                    gates.push(GateTrace {
                        level: dec.level,
                        skip,
                        gated,
                        coefficients,
                    });
                    gated
                }
                None => skip,
            };
            let up = graph.upsample2d(current, UpsampleMode::Bilinear)?;
            let up = dec.up.apply_relu(graph, params, up)?;
            let merged = graph.concat_channels(&[gated, up])?;
            current = dec.block.apply(graph, params, merged)?;
        }
        let logits = self.head.apply(graph, params, current)?;
        Ok(ForwardTrace {
            output: graph.sigmoid(logits),
            gates,
        })
    }

    /// Lesion probabilities for a batch, without recording gradients.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let trace = self.forward_graph(&mut g, &params, x)?;
        Ok(g.value(trace.output).clone())
    }

    /// Soft Dice loss of the batch and its gradient with respect to the
    /// flat parameter vector.
    pub fn loss_and_gradient(&self, images: &Tensor, masks: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, true);
        let x = g.constant(images.clone());
        let trace = self.forward_graph(&mut g, &params, x)?;
        let truth = g.constant(masks.clone());
        let loss = soft_dice_loss(&mut g, trace.output, truth)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        let mut grad = Vec::with_capacity(self.parameter_count());
        for (&v, (_, t)) in params.iter().zip(self.params.iter()) {
            match g.grad(v) {
                Some(d) => grad.extend_from_slice(d.data()),
                None => grad.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests;
