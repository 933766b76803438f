//! Differentiable explanation heatmaps: spatial attention, Grad-CAM,
//! input gradients, Gradient*Input, and LRP-ε.
//!
//! Every method is built as graph nodes, so a loss on a student's heatmap
//! backpropagates into the student parameters. Teacher heatmaps are
//! extracted as plain tensors and re-enter the student graph as constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::net::{Layer, Mode, Network, ParamRef, ParamSlot};
use crate::tensor::{Real, Tensor};

/// Explanation technique tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Attention,
    GradCam,
    InputGradient,
    GradientTimesInput,
    Lrp,
}

/// Fully specified explanation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ExplanationMethod {
    /// Per-pixel sum of squared channel activations at a conv layer
    /// (defaults to the last convolution). Independent of the class.
    Attention { layer: Option<usize> },
    /// ReLU of the channel sum weighted by spatially averaged logit
    /// gradients, at the last convolution by default.
    GradCam { layer: Option<usize> },
    InputGradient,
    GradientTimesInput,
    /// LRP-ε with a fixed stabilizer.
    Lrp { epsilon: Real },
}

impl ExplanationMethod {
    pub fn tag(&self) -> MethodTag {
        match self {
            ExplanationMethod::Attention { .. } => MethodTag::Attention,
            ExplanationMethod::GradCam { .. } => MethodTag::GradCam,
            ExplanationMethod::InputGradient => MethodTag::InputGradient,
            ExplanationMethod::GradientTimesInput => MethodTag::GradientTimesInput,
            ExplanationMethod::Lrp { .. } => MethodTag::Lrp,
        }
    }
}

/// An explanation map with its provenance.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub values: Tensor,
    /// Explained class; `None` for attention, which has no class.
    pub class: Option<usize>,
    pub method: MethodTag,
    /// Per-layer relevance tensors, top to bottom (LRP only).
    pub relevance_trace: Option<Vec<Tensor>>,
}

/// Graph-level result of building an explanation.
pub struct ExplanationBuild {
    pub heatmap: NodeId,
    pub logits: NodeId,
    pub relevance_trace: Option<Vec<NodeId>>,
    /// Parameter leaves of the forward pass, for gradient collection.
    pub params: Vec<(ParamRef, NodeId)>,
}

/// Builds the explanation node for `method` on top of a fresh forward pass.
///
/// `x` must already be a graph leaf; make it require gradients — the
/// gradient-based methods differentiate through it.
pub fn build_explanation(
    graph: &mut Graph,
    net: &Network,
    x: NodeId,
    k: Option<usize>,
    method: &ExplanationMethod,
    params_require_grad: bool,
) -> Result<ExplanationBuild> {
    if let Some(k) = k {
        if k >= net.class_count {
            return Err(Error::contract(format!(
                "class {k} out of range for {} classes",
                net.class_count
            )));
        }
    }
    let (logits, trace) = net.forward_graph(graph, x, Mode::Eval, params_require_grad)?;
    let (heatmap, relevance_trace) = match method {
        ExplanationMethod::Attention { layer } => {
            let l = resolve_conv_layer(net, *layer)?;
            (attention_node(graph, &trace.layer_outputs, l)?, None)
        }
        ExplanationMethod::GradCam { layer } => {
            let l = resolve_conv_layer(net, *layer)?;
            let k = require_class(k)?;
            let y_l = trace.layer_outputs[l];
            (grad_cam_node(graph, logits, y_l, k)?, None)
        }
        ExplanationMethod::InputGradient => {
            let k = require_class(k)?;
            (input_gradient_node(graph, logits, x, k)?, None)
        }
        ExplanationMethod::GradientTimesInput => {
            let k = require_class(k)?;
            let g = input_gradient_node(graph, logits, x, k)?;
            (graph.mul(x, g)?, None)
        }
        ExplanationMethod::Lrp { epsilon } => {
            let k = require_class(k)?;
            let (r, rt) = lrp_node(graph, net, &trace, logits, k, *epsilon)?;
            (r, Some(rt))
        }
    };
    Ok(ExplanationBuild {
        heatmap,
        logits,
        relevance_trace,
        params: trace.params,
    })
}

/// Computes an explanation as plain tensors (teacher side, CLI export).
pub fn explain(
    net: &Network,
    x: &Tensor,
    k: Option<usize>,
    method: &ExplanationMethod,
) -> Result<Heatmap> {
    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone(), true);
    let built = build_explanation(&mut graph, net, xid, k, method, false)?;
    Ok(Heatmap {
        values: graph.value(built.heatmap).clone(),
        class: match method {
            ExplanationMethod::Attention { .. } => None,
            _ => k,
        },
        method: method.tag(),
        relevance_trace: built
            .relevance_trace
            .map(|ids| ids.iter().map(|&id| graph.value(id).clone()).collect()),
    })
}

pub fn attention(net: &Network, x: &Tensor, layer: Option<usize>) -> Result<Heatmap> {
    explain(net, x, None, &ExplanationMethod::Attention { layer })
}

pub fn input_gradient(net: &Network, x: &Tensor, k: usize) -> Result<Heatmap> {
    explain(net, x, Some(k), &ExplanationMethod::InputGradient)
}

pub fn gradient_times_input(net: &Network, x: &Tensor, k: usize) -> Result<Heatmap> {
    explain(net, x, Some(k), &ExplanationMethod::GradientTimesInput)
}

pub fn grad_cam(net: &Network, x: &Tensor, k: usize, layer: Option<usize>) -> Result<Heatmap> {
    explain(net, x, Some(k), &ExplanationMethod::GradCam { layer })
}

pub fn lrp(net: &Network, x: &Tensor, k: usize, epsilon: Real) -> Result<Heatmap> {
    explain(net, x, Some(k), &ExplanationMethod::Lrp { epsilon })
}

fn require_class(k: Option<usize>) -> Result<usize> {
    k.ok_or_else(|| Error::contract("this explanation method needs a class index"))
}

fn resolve_conv_layer(net: &Network, layer: Option<usize>) -> Result<usize> {
    let convs = net.conv_layers();
    match layer {
        Some(l) => {
            if convs.contains(&l) {
                Ok(l)
            } else {
                Err(Error::contract(format!(
                    "layer {l} is not a convolutional layer"
                )))
            }
        }
        None => convs
            .last()
            .copied()
            .ok_or_else(|| Error::contract("network has no convolutional layer")),
    }
}

/// Scalar node for one logit: sum(onehot(k) ⊙ logits).
fn logit_scalar(graph: &mut Graph, logits: NodeId, k: usize) -> Result<NodeId> {
    let c = graph.value(logits).numel();
    let onehot = graph.constant(Tensor::from_fn(&[c], |i| if i == k { 1.0 } else { 0.0 }));
    let picked = graph.mul(logits, onehot)?;
    graph.sum_all(picked)
}

/// a_{L,i,j} = Σ_c y_{L,c,i,j}²
fn attention_node(graph: &mut Graph, layer_outputs: &[NodeId], layer: usize) -> Result<NodeId> {
    let y = layer_outputs[layer];
    let shape = graph.value(y).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "attention needs a C×H×W layer output, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let sq = graph.mul(y, y)?;
    let flat = graph.reshape(sq, &[c, h * w])?;
    let ones = graph.constant(Tensor::full(&[1, c], 1.0));
    let summed = graph.matmul(ones, flat)?;
    graph.reshape(summed, &[h, w])
}

/// h = ∇_x y_{N,k}, itself a graph node.
fn input_gradient_node(graph: &mut Graph, logits: NodeId, x: NodeId, k: usize) -> Result<NodeId> {
    let root = logit_scalar(graph, logits, k)?;
    let grads = graph.backward(root)?;
    match grads.grad_node(x) {
        Some(g) => Ok(g),
        // logit does not depend on x (degenerate net): zero map
        None => {
            let shape = graph.value(x).shape().to_vec();
            Ok(graph.constant(Tensor::zeros(&shape)))
        }
    }
}

/// e_{L,i,j} = ReLU(Σ_c α_c y_{L,c,i,j}), α_c = mean_{i,j} ∂y_{N,k}/∂y_{L,c,i,j}
fn grad_cam_node(graph: &mut Graph, logits: NodeId, y_l: NodeId, k: usize) -> Result<NodeId> {
    let shape = graph.value(y_l).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract("grad_cam needs a C×H×W layer output"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let root = logit_scalar(graph, logits, k)?;
    let grads = graph.backward(root)?;
    let g_yl = match grads.grad_node(y_l) {
        Some(g) => g,
        None => graph.constant(Tensor::zeros(&shape)),
    };
    let summed = graph.sum_trailing(g_yl, 2)?;
    let alpha = graph.scale(summed, 1.0 / (h * w) as Real)?;
    let alpha_row = graph.reshape(alpha, &[1, c])?;
    let flat = graph.reshape(y_l, &[c, h * w])?;
    let weighted = graph.matmul(alpha_row, flat)?;
    let map = graph.reshape(weighted, &[h, w])?;
    graph.relu(map)
}

/// LRP-ε denominator z + sign(z)·ε with sign(0) = +1.
///
/// With ε = 0 a dead unit (z exactly 0) would divide 0/0: relevance
/// reaching such a unit is itself zero (it enters multiplied by the zero
/// activation), so its share is exactly zero and the denominator can be
/// bumped to 1 there without changing any live unit.
fn lrp_denominator(graph: &mut Graph, z: NodeId, epsilon: Real) -> Result<NodeId> {
    let s = graph.sign_pm(z)?;
    let stab = graph.scale(s, epsilon)?;
    let den = graph.add(z, stab)?;
    if epsilon > 0.0 {
        // z + sign(z)·ε never vanishes for ε > 0
        return Ok(den);
    }
    let sz = graph.signum(den)?;
    let asz = graph.abs(sz)?;
    let nasz = graph.neg(asz)?;
    let dead = graph.add_scalar(nasz, 1.0)?;
    graph.add(den, dead)
}

/// Relevance propagation as a forward-composed differentiable graph.
///
/// Relevance starts as onehot(k) ⊙ logits and flows down through each
/// layer: Dense/Conv via the ε-stabilized ratio rule, ReLU and Flatten by
/// identity/reshape, AvgPool as the equivalent fixed-weight linear layer,
/// and BatchNorm by fusing its running-stats affine into the preceding
/// linear layer. Returns the input-level relevance and the per-layer trace.
fn lrp_node(
    graph: &mut Graph,
    net: &Network,
    trace: &crate::net::ActivationTrace,
    logits: NodeId,
    k: usize,
    epsilon: Real,
) -> Result<(NodeId, Vec<NodeId>)> {
    if epsilon < 0.0 {
        return Err(Error::contract("LRP epsilon must be >= 0"));
    }
    let c = net.class_count;
    let onehot = graph.constant(Tensor::from_fn(&[c], |i| if i == k { 1.0 } else { 0.0 }));
    let mut r = graph.mul(logits, onehot)?;
    let mut rtrace = vec![r];

    let mut i = net.layers.len();
    while i > 0 {
        i -= 1;
        match &net.layers[i] {
            Layer::Relu => {
                // relevance of ReLU(z) is the relevance of z
            }
            Layer::Flatten => {
                let in_shape = graph.value(trace.layer_inputs[i]).shape().to_vec();
                r = graph.reshape(r, &in_shape)?;
            }
            Layer::AvgPool2d { kernel } => {
                let z = trace.layer_outputs[i];
                let den = lrp_denominator(graph, z, epsilon)?;
                let s = graph.div(r, den)?;
                let a = trace.layer_inputs[i];
                let ash = graph.value(a).shape();
                let hw = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let spread = graph.avg_unpool2d(s, *kernel, hw)?;
                r = graph.mul(a, spread)?;
            }
            Layer::BatchNorm { running_mean: _, running_var, eps, .. } => {
                if i == 0 {
                    return Err(Error::contract(
                        "LRP requires batch_norm to follow a dense or conv2d layer",
                    ));
                }
                let gamma_node = trace
                    .param_node(ParamRef { layer: i, slot: ParamSlot::Gamma })
                    .expect("traced gamma");
                let inv_std = graph.constant(running_var.map(|v| 1.0 / (v + eps).sqrt()));
                let scale = graph.mul(gamma_node, inv_std)?;
                let z = trace.layer_outputs[i];
                let a = trace.layer_inputs[i - 1];
                match &net.layers[i - 1] {
                    Layer::Dense { .. } => {
                        let w = trace
                            .param_node(ParamRef { layer: i - 1, slot: ParamSlot::Weight })
                            .expect("traced weight");
                        let o = graph.value(w).shape()[0];
                        let s2 = graph.reshape(scale, &[o, 1])?;
                        let fused = graph.mul(w, s2)?;
                        r = dense_relevance(graph, r, fused, a, z, epsilon)?;
                    }
                    Layer::Conv2d { stride, padding, .. } => {
                        let w = trace
                            .param_node(ParamRef { layer: i - 1, slot: ParamSlot::Weight })
                            .expect("traced weight");
                        let o = graph.value(w).shape()[0];
                        let s4 = graph.reshape(scale, &[o, 1, 1, 1])?;
                        let fused = graph.mul(w, s4)?;
                        r = conv_relevance(graph, r, fused, a, z, *stride, *padding, epsilon)?;
                    }
                    _ => {
                        return Err(Error::contract(
                            "LRP requires batch_norm to follow a dense or conv2d layer",
                        ))
                    }
                }
                i -= 1; // the linear layer was consumed by the fusion
            }
            Layer::Dense { .. } => {
                let w = trace
                    .param_node(ParamRef { layer: i, slot: ParamSlot::Weight })
                    .expect("traced weight");
                let a = trace.layer_inputs[i];
                let z = trace.layer_outputs[i];
                r = dense_relevance(graph, r, w, a, z, epsilon)?;
            }
            Layer::Conv2d { stride, padding, .. } => {
                let w = trace
                    .param_node(ParamRef { layer: i, slot: ParamSlot::Weight })
                    .expect("traced weight");
                let a = trace.layer_inputs[i];
                let z = trace.layer_outputs[i];
                r = conv_relevance(graph, r, w, a, z, *stride, *padding, epsilon)?;
            }
        }
        rtrace.push(r);
    }
    Ok((r, rtrace))
}

/// R_j = a_j · Σ_i w_ji · R_i / (z_i + sign(z_i)ε)
fn dense_relevance(
    graph: &mut Graph,
    r: NodeId,
    w: NodeId,
    a: NodeId,
    z: NodeId,
    epsilon: Real,
) -> Result<NodeId> {
    let den = lrp_denominator(graph, z, epsilon)?;
    let s = graph.div(r, den)?;
    let o = graph.value(s).numel();
    let sc = graph.reshape(s, &[o, 1])?;
    let wt = graph.transpose(w)?;
    let back = graph.matmul(wt, sc)?;
    let i = graph.value(back).numel();
    let back = graph.reshape(back, &[i])?;
    graph.mul(a, back)
}

/// Convolution under the same rule, via the conv adjoint.
#[allow(clippy::too_many_arguments)]
fn conv_relevance(
    graph: &mut Graph,
    r: NodeId,
    w: NodeId,
    a: NodeId,
    z: NodeId,
    stride: usize,
    padding: usize,
    epsilon: Real,
) -> Result<NodeId> {
    let den = lrp_denominator(graph, z, epsilon)?;
    let s = graph.div(r, den)?;
    let ash = graph.value(a).shape();
    let hw = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let back = graph.conv_input_grad(s, w, stride, padding, hw)?;
    graph.mul(a, back)
}

// ---- export ----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub min: f64,
    pub max: f64,
    pub method: MethodTag,
    pub class: Option<usize>,
    pub shape: Vec<usize>,
}

fn spatial_view(h: &Heatmap) -> Result<(usize, usize, Vec<Real>)> {
    let shape = h.values.shape();
    match shape.len() {
        2 => Ok((shape[0], shape[1], h.values.data().to_vec())),
        3 => {
            // channel relevance collapses by summation for display
            let (c, hh, ww) = (shape[0], shape[1], shape[2]);
            let mut flat = vec![0.0; hh * ww];
            for ci in 0..c {
                for i in 0..hh * ww {
                    flat[i] += h.values.data()[ci * hh * ww + i];
                }
            }
            Ok((hh, ww, flat))
        }
        _ => Err(Error::dimension(format!(
            "cannot render heatmap of shape {shape:?}"
        ))),
    }
}

fn write_sidecar(h: &Heatmap, flat: &[Real], path: &Path) -> Result<()> {
    let min = flat.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = flat.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let sidecar = HeatmapSidecar {
        min: min as f64,
        max: max as f64,
        method: h.method,
        class: h.class,
        shape: h.values.shape().to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// 8-bit grayscale PGM (P5), linearly mapping [min, max] to [0, 255], with
/// the range recorded in a `.json` sidecar next to the file.
pub fn save_heatmap_pgm(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols, flat) = spatial_view(h)?;
    let min = flat.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = flat.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(flat.iter().map(|&v| (255.0 * (v - min) / span).round() as u8));
    std::fs::write(path, out)?;
    write_sidecar(h, &flat, &path.with_extension("json"))
}

/// Diverging blue–white–red PNG, symmetric around zero, sidecar as above.
pub fn save_heatmap_png(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols, flat) = spatial_view(h)?;
    let mag = flat.iter().fold(0.0 as Real, |m, &v| m.max(v.abs()));
    let mag = if mag > 0.0 { mag } else { 1.0 };
    let mut img = image::RgbImage::new(cols as u32, rows as u32);
    for (i, &v) in flat.iter().enumerate() {
        let t = (v / mag).clamp(-1.0, 1.0);
        let px = if t >= 0.0 {
            let u = (255.0 * (1.0 - t)) as u8;
            image::Rgb([255, u, u])
        } else {
            let u = (255.0 * (1.0 + t)) as u8;
            image::Rgb([u, u, 255])
        };
        img.put_pixel((i % cols) as u32, (i / cols) as u32, px);
    }
    img.save(path)
        .map_err(|e| Error::format(format!("png encode: {e}")))?;
    write_sidecar(h, &flat, &path.with_extension("json"))
}
