//! Small feed-forward networks: layer zoo, traced forward passes through
//! the autodiff graph, SGD-with-momentum updates, layer freezing, and the
//! directory checkpoint format (JSON manifest + XTSR payloads).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seeds;
use crate::tensor::{Real, Tensor};

/// One layer of a [`Network`]. Parameterized kinds carry their tensors and
/// a frozen flag; frozen layers receive zero parameter updates.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        w: Tensor,
        b: Tensor,
        frozen: bool,
    },
    Conv2d {
        w: Tensor,
        b: Tensor,
        stride: usize,
        padding: usize,
        frozen: bool,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: Real,
        momentum: Real,
        frozen: bool,
    },
    Flatten,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm { .. }
        )
    }

    pub fn is_frozen(&self) -> bool {
        match self {
            Layer::Dense { frozen, .. }
            | Layer::Conv2d { frozen, .. }
            | Layer::BatchNorm { frozen, .. } => *frozen,
            _ => false,
        }
    }

    pub fn set_frozen(&mut self, value: bool) {
        match self {
            Layer::Dense { frozen, .. }
            | Layer::Conv2d { frozen, .. }
            | Layer::BatchNorm { frozen, .. } => *frozen = value,
            _ => {}
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::AvgPool2d { .. } => "avg_pool2d",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape produced from `input`, validating composition.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { w, .. } => {
                let (o, i) = (w.shape()[0], w.shape()[1]);
                if input != [i] {
                    return Err(Error::dimension(format!(
                        "dense expects input [{i}], got {input:?}"
                    )));
                }
                Ok(vec![o])
            }
            Layer::Conv2d { w, stride, padding, .. } => {
                if input.len() != 3 || input[0] != w.shape()[1] {
                    return Err(Error::dimension(format!(
                        "conv2d expects input [{}, H, W], got {input:?}",
                        w.shape()[1]
                    )));
                }
                let (kh, kw) = (w.shape()[2], w.shape()[3]);
                let h = input[1] + 2 * padding;
                let wd = input[2] + 2 * padding;
                if h < kh || wd < kw {
                    return Err(Error::dimension("conv2d kernel larger than padded input"));
                }
                Ok(vec![
                    w.shape()[0],
                    (h - kh) / stride + 1,
                    (wd - kw) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool2d { kernel } => {
                if input.len() < 2 {
                    return Err(Error::dimension("avg_pool2d expects spatial input"));
                }
                let h = input[input.len() - 2];
                let wd = input[input.len() - 1];
                if h % kernel != 0 || wd % kernel != 0 {
                    return Err(Error::dimension(format!(
                        "avg_pool2d kernel {kernel} does not divide {h}x{wd}"
                    )));
                }
                let mut out = input.to_vec();
                let n = out.len();
                out[n - 2] = h / kernel;
                out[n - 1] = wd / kernel;
                Ok(out)
            }
            Layer::BatchNorm { gamma, .. } => {
                let c = gamma.shape()[0];
                let ok = input == [c] || (input.len() == 3 && input[0] == c);
                if !ok {
                    return Err(Error::dimension(format!(
                        "batch_norm over {c} channels got input {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Which tensor of a layer a parameter reference points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Stable handle to one parameter tensor of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub slot: ParamSlot,
}

/// Training/eval switch. Normalization always uses running statistics;
/// training mode additionally records batch-norm inputs in the trace so
/// the trainer can update the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered layer stack with a declared input shape and class count.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

/// Per-layer record of one forward pass: the input node `a^L` and the
/// output node `z^L` of every layer, plus the parameter leaves used.
pub struct ActivationTrace {
    pub layer_inputs: Vec<NodeId>,
    pub layer_outputs: Vec<NodeId>,
    pub params: Vec<(ParamRef, NodeId)>,
    /// (layer index, input node) for every BatchNorm hit in Train mode.
    pub bn_inputs: Vec<(usize, NodeId)>,
}

impl ActivationTrace {
    pub fn param_node(&self, r: ParamRef) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(pr, _)| *pr == r)
            .map(|(_, id)| *id)
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        let net = Network {
            layers,
            input_shape,
            class_count,
        };
        let out = net.validate()?;
        if out != [net.class_count] {
            return Err(Error::dimension(format!(
                "network must end in [{}] logits, got {out:?}",
                net.class_count
            )));
        }
        Ok(net)
    }

    /// Walks the layer stack checking that adjacent shapes compose; returns
    /// the final output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::dimension(format!("layer {i}: {e}")))?;
        }
        Ok(shape)
    }

    /// Parameter references in a stable order (layer-major).
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { .. } | Layer::Conv2d { .. } => {
                    refs.push(ParamRef { layer: i, slot: ParamSlot::Weight });
                    refs.push(ParamRef { layer: i, slot: ParamSlot::Bias });
                }
                Layer::BatchNorm { .. } => {
                    refs.push(ParamRef { layer: i, slot: ParamSlot::Gamma });
                    refs.push(ParamRef { layer: i, slot: ParamSlot::Beta });
                }
                _ => {}
            }
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> &Tensor {
        match (&self.layers[r.layer], r.slot) {
            (Layer::Dense { w, .. }, ParamSlot::Weight) => w,
            (Layer::Dense { b, .. }, ParamSlot::Bias) => b,
            (Layer::Conv2d { w, .. }, ParamSlot::Weight) => w,
            (Layer::Conv2d { b, .. }, ParamSlot::Bias) => b,
            (Layer::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (Layer::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("parameter slot mismatch"),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> &mut Tensor {
        match (&mut self.layers[r.layer], r.slot) {
            (Layer::Dense { w, .. }, ParamSlot::Weight) => w,
            (Layer::Dense { b, .. }, ParamSlot::Bias) => b,
            (Layer::Conv2d { w, .. }, ParamSlot::Weight) => w,
            (Layer::Conv2d { b, .. }, ParamSlot::Bias) => b,
            (Layer::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (Layer::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            _ => panic!("parameter slot mismatch"),
        }
    }

    pub fn freeze_all(&mut self) {
        for layer in &mut self.layers {
            layer.set_frozen(true);
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.layers
            .iter()
            .filter(|l| l.is_parameterized())
            .all(|l| l.is_frozen())
    }

    /// Index of the last parameterized layer.
    pub fn last_param_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.is_parameterized())
    }

    /// Indices of convolutional layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv2d { .. }).then_some(i))
            .collect()
    }

    /// Forward pass through `graph`, recording a full activation trace.
    ///
    /// `params_require_grad` controls whether parameter leaves participate
    /// in differentiation; frozen layers never do.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        x: NodeId,
        mode: Mode,
        params_require_grad: bool,
    ) -> Result<(NodeId, ActivationTrace)> {
        if graph.value(x).shape() != self.input_shape.as_slice() {
            return Err(Error::dimension(format!(
                "input shape {:?} does not match network input {:?}",
                graph.value(x).shape(),
                self.input_shape
            )));
        }
        let mut trace = ActivationTrace {
            layer_inputs: Vec::with_capacity(self.layers.len()),
            layer_outputs: Vec::with_capacity(self.layers.len()),
            params: Vec::new(),
            bn_inputs: Vec::new(),
        };
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            trace.layer_inputs.push(cur);
            let rg = params_require_grad && !layer.is_frozen();
            cur = match layer {
                Layer::Dense { w, b, .. } => {
                    let wid = graph.leaf(w.clone(), rg);
                    let bid = graph.leaf(b.clone(), rg);
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Weight }, wid));
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Bias }, bid));
                    dense_forward(graph, cur, wid, bid)?
                }
                Layer::Conv2d { w, b, stride, padding, .. } => {
                    let wid = graph.leaf(w.clone(), rg);
                    let bid = graph.leaf(b.clone(), rg);
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Weight }, wid));
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Bias }, bid));
                    let conv = graph.conv2d(cur, wid, *stride, *padding)?;
                    let cout = graph.value(wid).shape()[0];
                    let b3 = graph.reshape(bid, &[cout, 1, 1])?;
                    graph.add(conv, b3)?
                }
                Layer::Relu => graph.relu(cur)?,
                Layer::AvgPool2d { kernel } => graph.avg_pool2d(cur, *kernel)?,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    if mode == Mode::Train {
                        trace.bn_inputs.push((i, cur));
                    }
                    let gid = graph.leaf(gamma.clone(), rg);
                    let bid = graph.leaf(beta.clone(), rg);
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Gamma }, gid));
                    trace.params.push((ParamRef { layer: i, slot: ParamSlot::Beta }, bid));
                    let inv_std = running_var.map(|v| 1.0 / (v + eps).sqrt());
                    let mean = graph.constant(channel_shaped(running_mean, graph_rank(graph, cur))?);
                    let istd = graph.constant(channel_shaped(&inv_std, graph_rank(graph, cur))?);
                    let rank = graph_rank(graph, cur);
                    let g3 = reshape_channel_param(graph, gid, rank)?;
                    let b3 = reshape_channel_param(graph, bid, rank)?;
                    let centered = graph.sub(cur, mean)?;
                    let normed = graph.mul(centered, istd)?;
                    let scaled = graph.mul(normed, g3)?;
                    graph.add(scaled, b3)?
                }
                Layer::Flatten => {
                    let n = graph.value(cur).numel();
                    graph.reshape(cur, &[n])?
                }
            };
            trace.layer_outputs.push(cur);
        }
        Ok((cur, trace))
    }

    /// Plain evaluation forward: returns the logits tensor.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let xid = graph.leaf(x.clone(), false);
        let (logits, _) = self.forward_graph(&mut graph, xid, Mode::Eval, false)?;
        Ok(graph.value(logits).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = self.forward_eval(x)?;
        Ok(argmax(logits.data()))
    }

    /// EMA update of one BatchNorm layer's running statistics.
    pub fn update_bn_stats(&mut self, layer: usize, batch_mean: &Tensor, batch_var: &Tensor) -> Result<()> {
        match &mut self.layers[layer] {
            Layer::BatchNorm {
                running_mean,
                running_var,
                momentum,
                ..
            } => {
                if batch_mean.shape() != running_mean.shape() || batch_var.shape() != running_var.shape() {
                    return Err(Error::dimension("batch-norm statistics shape mismatch"));
                }
                let m = *momentum;
                for (r, &b) in running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in running_var.data_mut().iter_mut().zip(batch_var.data()) {
                    *r = (1.0 - m) * *r + m * b;
                }
                Ok(())
            }
            _ => Err(Error::contract(format!("layer {layer} is not batch_norm"))),
        }
    }
}

fn graph_rank(graph: &Graph, id: NodeId) -> usize {
    graph.value(id).rank()
}

fn channel_shaped(t: &Tensor, input_rank: usize) -> Result<Tensor> {
    if input_rank == 3 {
        t.reshaped(&[t.numel(), 1, 1])
    } else {
        Ok(t.clone())
    }
}

fn reshape_channel_param(graph: &mut Graph, id: NodeId, input_rank: usize) -> Result<NodeId> {
    if input_rank == 3 {
        let c = graph.value(id).numel();
        graph.reshape(id, &[c, 1, 1])
    } else {
        Ok(id)
    }
}

fn dense_forward(graph: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let i = graph.value(x).numel();
    let o = graph.value(w).shape()[0];
    let xc = graph.reshape(x, &[i, 1])?;
    let y = graph.matmul(w, xc)?;
    let yf = graph.reshape(y, &[o])?;
    graph.add(yf, b)
}

pub fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---- optimizer -------------------------------------------------------------

/// SGD with momentum and global gradient-norm clipping.
pub struct SgdMomentum {
    pub lr: Real,
    pub momentum: Real,
    pub clip_norm: Real,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(net: &Network, lr: Real, momentum: Real, clip_norm: Real) -> Self {
        let velocity = net
            .param_refs()
            .iter()
            .map(|&r| Tensor::zeros(net.param(r).shape()))
            .collect();
        SgdMomentum {
            lr,
            momentum,
            clip_norm,
            velocity,
        }
    }

    /// Applies one update. `grads` must align with `net.param_refs()`.
    /// If the global gradient L2 norm exceeds `clip_norm` the gradients are
    /// rescaled to that norm first. Non-finite gradients fail the step
    /// without touching parameters or velocity.
    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) -> Result<()> {
        let refs = net.param_refs();
        if grads.len() != refs.len() {
            return Err(Error::dimension(format!(
                "expected {} gradient tensors, got {}",
                refs.len(),
                grads.len()
            )));
        }
        let mut sq_norm = 0.0;
        for (g, &r) in grads.iter().zip(&refs) {
            if g.shape() != net.param(r).shape() {
                return Err(Error::dimension("gradient shape mismatch"));
            }
            if !g.all_finite() {
                return Err(Error::numeric("non-finite gradient, step skipped"));
            }
            if !net.layers[r.layer].is_frozen() {
                sq_norm += g.sq_l2_norm();
            }
        }
        let norm = sq_norm.sqrt();
        let rescale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for ((g, &r), v) in grads.iter().zip(&refs).zip(self.velocity.iter_mut()) {
            if net.layers[r.layer].is_frozen() {
                continue;
            }
            let p = net.param_mut(r);
            for (i, vel) in v.data_mut().iter_mut().enumerate() {
                *vel = self.momentum * *vel + g.data()[i] * rescale;
                p.data_mut()[i] -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// Copies the teacher's last parameterized layer into the student and
/// freezes it. Layer kinds and parameter shapes must match.
pub fn copy_and_freeze_last_layer(teacher: &Network, student: &mut Network) -> Result<()> {
    let ti = teacher
        .last_param_layer()
        .ok_or_else(|| Error::contract("teacher has no parameterized layer"))?;
    let si = student
        .last_param_layer()
        .ok_or_else(|| Error::contract("student has no parameterized layer"))?;
    match (&teacher.layers[ti], &mut student.layers[si]) {
        (
            Layer::Dense { w: tw, b: tb, .. },
            Layer::Dense { w: sw, b: sb, frozen },
        ) => {
            if tw.shape() != sw.shape() || tb.shape() != sb.shape() {
                return Err(Error::dimension(format!(
                    "last-layer shape mismatch: teacher {:?}, student {:?}",
                    tw.shape(),
                    sw.shape()
                )));
            }
            *sw = tw.clone();
            *sb = tb.clone();
            *frozen = true;
            Ok(())
        }
        (
            Layer::Conv2d { w: tw, b: tb, .. },
            Layer::Conv2d { w: sw, b: sb, frozen, .. },
        ) => {
            if tw.shape() != sw.shape() || tb.shape() != sb.shape() {
                return Err(Error::dimension("last-layer shape mismatch"));
            }
            *sw = tw.clone();
            *sb = tb.clone();
            *frozen = true;
            Ok(())
        }
        _ => Err(Error::dimension(
            "teacher and student last layers have different kinds",
        )),
    }
}

/// Eval-mode BatchNorm as (scale, shift) per channel.
pub fn bn_affine(
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: Real,
) -> (Tensor, Tensor) {
    let scale = Tensor::from_fn(gamma.shape(), |i| {
        gamma.data()[i] / (running_var.data()[i] + eps).sqrt()
    });
    let shift = Tensor::from_fn(beta.shape(), |i| {
        beta.data()[i] - running_mean.data()[i] * scale.data()[i]
    });
    (scale, shift)
}

/// Folds an eval-mode BatchNorm into the linear layer feeding it:
/// w'[o, ...] = w[o, ...]·scale[o], b'[o] = b[o]·scale[o] + shift[o].
pub fn fuse_bn_into_linear(
    w: &Tensor,
    b: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let o = w.shape()[0];
    if scale.numel() != o || b.numel() != o {
        return Err(Error::dimension("batch-norm fusion channel mismatch"));
    }
    let row = w.numel() / o;
    let fused_w = Tensor::from_fn(w.shape(), |i| w.data()[i] * scale.data()[i / row]);
    let fused_b = Tensor::from_fn(b.shape(), |i| b.data()[i] * scale.data()[i] + shift.data()[i]);
    Ok((fused_w, fused_b))
}

// ---- construction ----------------------------------------------------------

/// Declarative layer description used by configs and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
    },
    BatchNorm,
    Flatten,
}

fn one() -> usize {
    1
}

/// Builds a randomly initialized network from layer specs.
///
/// Weights use uniform He-style fan-in scaling, U(-√(6/fan_in), +√(6/fan_in));
/// biases start at zero.
pub fn build_network(
    input_shape: &[usize],
    class_count: usize,
    specs: &[LayerSpec],
    seed: u64,
) -> Result<Network> {
    use rand::Rng;
    let mut layers = Vec::with_capacity(specs.len());
    let mut shape = input_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = seeds::rng(seed, "layer-init", i as u64);
        let layer = match *spec {
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                if shape.len() != 3 {
                    return Err(Error::dimension(format!(
                        "conv2d needs [C,H,W] input, got {shape:?} at layer {i}"
                    )));
                }
                let cin = shape[0];
                let fan_in = (cin * kernel * kernel) as Real;
                let limit = (6.0 / fan_in).sqrt();
                let w = Tensor::from_fn(&[out_channels, cin, kernel, kernel], |_| {
                    rng.gen_range(-limit..limit)
                });
                Layer::Conv2d {
                    w,
                    b: Tensor::zeros(&[out_channels]),
                    stride,
                    padding,
                    frozen: false,
                }
            }
            LayerSpec::Dense { out_features } => {
                let fan_in: usize = shape.iter().product();
                let limit = (6.0 / fan_in as Real).sqrt();
                if shape.len() != 1 {
                    return Err(Error::dimension(format!(
                        "dense needs flattened input, got {shape:?} at layer {i}"
                    )));
                }
                let w = Tensor::from_fn(&[out_features, fan_in], |_| rng.gen_range(-limit..limit));
                Layer::Dense {
                    w,
                    b: Tensor::zeros(&[out_features]),
                    frozen: false,
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::AvgPool2d { kernel } => Layer::AvgPool2d { kernel },
            LayerSpec::BatchNorm => {
                let c = shape[0];
                Layer::BatchNorm {
                    gamma: Tensor::full(&[c], 1.0),
                    beta: Tensor::zeros(&[c]),
                    running_mean: Tensor::zeros(&[c]),
                    running_var: Tensor::full(&[c], 1.0),
                    eps: 1e-5,
                    momentum: 0.1,
                    frozen: false,
                }
            }
            LayerSpec::Flatten => Layer::Flatten,
        };
        shape = layer.output_shape(&shape)?;
        layers.push(layer);
    }
    Network::new(layers, input_shape.to_vec(), class_count)
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shapes: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(default)]
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerManifest>,
}

/// Writes a checkpoint directory: `manifest.json` plus one XTSR file per
/// parameter tensor. Round-trips bit-exactly.
pub fn save_checkpoint(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let mut m = LayerManifest {
            kind: layer.kind_name().to_string(),
            shapes: None,
            stride: None,
            padding: None,
            kernel: None,
            eps: None,
            momentum: None,
            frozen: layer.is_frozen(),
        };
        match layer {
            Layer::Dense { w, b, .. } => {
                m.shapes = Some(vec![w.shape().to_vec(), b.shape().to_vec()]);
                w.save_xtsr(dir.join(format!("{i:02}_w.xtsr")))?;
                b.save_xtsr(dir.join(format!("{i:02}_b.xtsr")))?;
            }
            Layer::Conv2d { w, b, stride, padding, .. } => {
                m.shapes = Some(vec![w.shape().to_vec(), b.shape().to_vec()]);
                m.stride = Some(*stride);
                m.padding = Some(*padding);
                w.save_xtsr(dir.join(format!("{i:02}_w.xtsr")))?;
                b.save_xtsr(dir.join(format!("{i:02}_b.xtsr")))?;
            }
            Layer::AvgPool2d { kernel } => m.kernel = Some(*kernel),
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
                ..
            } => {
                m.eps = Some(*eps as f64);
                m.momentum = Some(*momentum as f64);
                gamma.save_xtsr(dir.join(format!("{i:02}_gamma.xtsr")))?;
                beta.save_xtsr(dir.join(format!("{i:02}_beta.xtsr")))?;
                running_mean.save_xtsr(dir.join(format!("{i:02}_running_mean.xtsr")))?;
                running_var.save_xtsr(dir.join(format!("{i:02}_running_var.xtsr")))?;
            }
            Layer::Relu | Layer::Flatten => {}
        }
        layers.push(m);
    }
    let manifest = CheckpointManifest {
        input_shape: net.input_shape.clone(),
        class_count: net.class_count,
        layers,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, m) in manifest.layers.iter().enumerate() {
        let layer = match m.kind.as_str() {
            "dense" => Layer::Dense {
                w: Tensor::load_xtsr(dir.join(format!("{i:02}_w.xtsr")))?,
                b: Tensor::load_xtsr(dir.join(format!("{i:02}_b.xtsr")))?,
                frozen: m.frozen,
            },
            "conv2d" => Layer::Conv2d {
                w: Tensor::load_xtsr(dir.join(format!("{i:02}_w.xtsr")))?,
                b: Tensor::load_xtsr(dir.join(format!("{i:02}_b.xtsr")))?,
                stride: m.stride.unwrap_or(1),
                padding: m.padding.unwrap_or(0),
                frozen: m.frozen,
            },
            "relu" => Layer::Relu,
            "avg_pool2d" => Layer::AvgPool2d {
                kernel: m
                    .kernel
                    .ok_or_else(|| Error::format("avg_pool2d manifest missing kernel"))?,
            },
            "batch_norm" => Layer::BatchNorm {
                gamma: Tensor::load_xtsr(dir.join(format!("{i:02}_gamma.xtsr")))?,
                beta: Tensor::load_xtsr(dir.join(format!("{i:02}_beta.xtsr")))?,
                running_mean: Tensor::load_xtsr(dir.join(format!("{i:02}_running_mean.xtsr")))?,
                running_var: Tensor::load_xtsr(dir.join(format!("{i:02}_running_var.xtsr")))?,
                eps: m.eps.unwrap_or(1e-5) as Real,
                momentum: m.momentum.unwrap_or(0.1) as Real,
                frozen: m.frozen,
            },
            "flatten" => Layer::Flatten,
            other => return Err(Error::format(format!("unknown layer kind '{other}'"))),
        };
        layers.push(layer);
    }
    Network::new(layers, manifest.input_shape, manifest.class_count)
}
