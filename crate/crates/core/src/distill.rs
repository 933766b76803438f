//! Explanation-distillation losses and the training step.
//!
//! The dissimilarity is the L1 distance normalized by the geometric mean
//! of the two maps' L1 norms, averaged over an average-pooling pyramid.
//! Per sample the explained class is the teacher's argmax half the time
//! and a uniformly drawn loser otherwise, and LRP's ε is drawn
//! log-uniformly. DL-DL routes the softmax output-distillation loss to the
//! last layer only, leaving every other layer to the explanation loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{self, ExplanationMethod};
use crate::graph::{Graph, NodeId};
use crate::net::{Network, ParamRef, SgdMomentum};
use crate::tensor::{Real, Tensor};

/// Guard added under the square root of the geometric-mean denominator.
/// Keeps the loss finite when one map's norm collapses to zero; exact-zero
/// numerators still yield an exact zero.
const GEO_FLOOR: Real = 1e-12;

/// What gets distilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTechnique {
    Lrp,
    GradientTimesInput,
    InputGradient,
    GradCam,
    Attention,
    /// Softmax output distillation only (baseline, no explanation loss).
    Output,
}

impl DistillTechnique {
    pub fn is_explanation(self) -> bool {
        !matches!(self, DistillTechnique::Output)
    }
}

/// Whether the teacher sees the student's input or the debiased variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherInput {
    #[default]
    Same,
    Debiased,
}

fn default_floor() -> usize {
    8
}
fn default_eps_low() -> Real {
    1e-3
}
fn default_eps_high() -> Real {
    1e-2
}
fn default_p_top() -> Real {
    0.5
}
fn default_temperature() -> Real {
    1.0
}
fn default_lr() -> Real {
    0.01
}
fn default_momentum() -> Real {
    0.9
}
fn default_clip() -> Real {
    1.0
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}

/// All distillation hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub technique: DistillTechnique,
    /// Smallest pyramid scale extent.
    #[serde(default = "default_floor")]
    pub pyramid_floor: usize,
    /// LRP ε sampling interval, log-uniform.
    #[serde(default = "default_eps_low")]
    pub epsilon_low: Real,
    #[serde(default = "default_eps_high")]
    pub epsilon_high: Real,
    /// Probability of explaining the teacher's argmax class.
    #[serde(default = "default_p_top")]
    pub p_top: Real,
    /// Train the last layer with the output loss, everything else with the
    /// explanation loss.
    #[serde(default)]
    pub dldl: bool,
    /// Weight on the DL-DL output loss; `None` calibrates it on the first
    /// step so the weighted loss starts near 1.
    #[serde(default)]
    pub output_loss_weight: Option<Real>,
    #[serde(default = "default_temperature")]
    pub temperature: Real,
    #[serde(default)]
    pub teacher_input: TeacherInput,
    #[serde(default = "default_lr")]
    pub lr: Real,
    #[serde(default = "default_momentum")]
    pub momentum: Real,
    #[serde(default = "default_clip")]
    pub clip_norm: Real,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            technique: DistillTechnique::Lrp,
            pyramid_floor: default_floor(),
            epsilon_low: default_eps_low(),
            epsilon_high: default_eps_high(),
            p_top: default_p_top(),
            dldl: false,
            output_loss_weight: None,
            temperature: default_temperature(),
            teacher_input: TeacherInput::default(),
            lr: default_lr(),
            momentum: default_momentum(),
            clip_norm: default_clip(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_top > 0.0 && self.p_top < 1.0) {
            return Err(Error::config("p_top must lie strictly between 0 and 1"));
        }
        if !(self.epsilon_low > 0.0 && self.epsilon_low <= self.epsilon_high) {
            return Err(Error::config("need 0 < epsilon_low <= epsilon_high"));
        }
        if self.pyramid_floor == 0 || !self.pyramid_floor.is_power_of_two() {
            return Err(Error::config("pyramid_floor must be a power of two >= 1"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

// ---- losses ----------------------------------------------------------------

/// d(gT, gS) = ‖gT − gS‖₁ / √(‖gT‖₁·‖gS‖₁), differentiable in both maps.
///
/// Two all-zero maps are maximally similar: d = 0, with a warning, since
/// that usually signals a dead network.
pub fn dissimilarity(graph: &mut Graph, gt: NodeId, gs: NodeId) -> Result<NodeId> {
    if graph.value(gt).shape() != graph.value(gs).shape() {
        return Err(Error::dimension(format!(
            "dissimilarity shapes differ: {:?} vs {:?}",
            graph.value(gt).shape(),
            graph.value(gs).shape()
        )));
    }
    let nt = graph.value(gt).abs_sum();
    let ns = graph.value(gs).abs_sum();
    if nt == 0.0 && ns == 0.0 {
        log::warn!("dissimilarity of two all-zero heatmaps; defining d = 0");
        return Ok(graph.scalar(0.0));
    }
    let diff = graph.sub(gt, gs)?;
    let adiff = graph.abs(diff)?;
    let num = graph.sum_all(adiff)?;
    let at = graph.abs(gt)?;
    let norm_t = graph.sum_all(at)?;
    let a_s = graph.abs(gs)?;
    let norm_s = graph.sum_all(a_s)?;
    let prod = graph.mul(norm_t, norm_s)?;
    let guarded = graph.add_scalar(prod, GEO_FLOOR)?;
    let den = graph.sqrt(guarded)?;
    graph.div(num, den)
}

/// Number of pyramid scales for a map shape with a given floor: the
/// largest M whose kernel 2^(M−1) divides the spatial extents and leaves
/// at least `floor` pixels. Unscaled maps always count, so M >= 1.
pub fn scale_count(shape: &[usize], floor: usize) -> usize {
    if shape.len() < 2 {
        return 1;
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let mut m = 1;
    loop {
        let kernel = 1usize << m;
        if h % kernel != 0 || w % kernel != 0 || h / kernel < floor || w / kernel < floor {
            return m;
        }
        m += 1;
    }
}

/// Per-scale breakdown of [`pyramidal_loss`].
pub struct PyramidLoss {
    pub total: NodeId,
    pub per_scale: Vec<NodeId>,
}

/// ℒ = (1/M) Σ_m d(AvgPool(gT, 2^m), AvgPool(gS, 2^m)), m = 0..M−1.
pub fn pyramidal_loss(
    graph: &mut Graph,
    gt: NodeId,
    gs: NodeId,
    floor: usize,
) -> Result<PyramidLoss> {
    if graph.value(gt).shape() != graph.value(gs).shape() {
        return Err(Error::dimension("pyramidal_loss shapes differ"));
    }
    let m = scale_count(graph.value(gt).shape(), floor);
    let mut per_scale = Vec::with_capacity(m);
    for level in 0..m {
        let (pt, ps) = if level == 0 {
            (gt, gs)
        } else {
            let kernel = 1usize << level;
            (graph.avg_pool2d(gt, kernel)?, graph.avg_pool2d(gs, kernel)?)
        };
        per_scale.push(dissimilarity(graph, pt, ps)?);
    }
    let mut total = per_scale[0];
    for &d in &per_scale[1..] {
        total = graph.add(total, d)?;
    }
    let total = graph.scale(total, 1.0 / m as Real)?;
    Ok(PyramidLoss { total, per_scale })
}

/// Draws the explained class: the argmax with probability `p_top`
/// (ties go to the lowest index), otherwise uniform over the rest.
pub fn select_class(teacher_logits: &Tensor, p_top: Real, rng: &mut ChaCha8Rng) -> Result<usize> {
    let c = teacher_logits.numel();
    if c < 2 {
        return Err(Error::contract("class selection needs at least 2 classes"));
    }
    let top = crate::net::argmax(teacher_logits.data());
    let u: Real = rng.gen_range(0.0..1.0);
    if u < p_top {
        Ok(top)
    } else {
        let j = rng.gen_range(0..c - 1);
        Ok(if j >= top { j + 1 } else { j })
    }
}

/// ε ~ 10^U(log₁₀ lo, log₁₀ hi).
pub fn sample_epsilon(lo: Real, hi: Real, rng: &mut ChaCha8Rng) -> Real {
    if lo == hi {
        return lo;
    }
    let u: Real = rng.gen_range(lo.log10()..hi.log10());
    (10.0 as Real).powf(u)
}

/// Cross-entropy between teacher and student softmax at `temperature`:
/// CE(softmax(t/T) ‖ softmax(s/T)), differentiable in the student logits.
pub fn output_distillation_loss(
    graph: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: NodeId,
    temperature: Real,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    let c = teacher_logits.numel();
    if graph.value(student_logits).numel() != c {
        return Err(Error::dimension("logit lengths differ"));
    }
    teacher_logits.check_finite("output distillation teacher logits")?;
    let pt = graph.constant(stable_softmax(teacher_logits, temperature));
    let z = graph.scale(student_logits, 1.0 / temperature)?;
    // shift by a detached max; the constant cancels in log-softmax and all
    // its derivatives, it only guards exp overflow
    let zmax = graph.max_all(z)?;
    let shift = graph.detach(zmax);
    let zs = graph.sub(z, shift)?;
    let ez = graph.exp(zs)?;
    let sez = graph.sum_all(ez)?;
    let lse = graph.log(sez)?;
    let logsm = graph.sub(zs, lse)?;
    let picked = graph.mul(pt, logsm)?;
    let s = graph.sum_all(picked)?;
    graph.neg(s)
}

fn stable_softmax(logits: &Tensor, temperature: Real) -> Tensor {
    let scaled: Vec<Real> = logits.data().iter().map(|&v| v / temperature).collect();
    let m = scaled.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let z: Real = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.iter().map(|&e| e / z).collect())
        .expect("softmax shape")
}

// ---- the distillation step ---------------------------------------------

/// One training sample: the student input and what the teacher sees
/// (identical in same-input mode, the debiased image otherwise).
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub x: Tensor,
    pub x_teacher: Tensor,
}

impl DistillSample {
    pub fn same(x: Tensor) -> Self {
        DistillSample {
            x_teacher: x.clone(),
            x,
        }
    }
}

/// One step's loss breakdown, serialized to the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// Mean pyramidal explanation loss over the batch (absent for pure
    /// output distillation).
    pub explanation_loss: Option<f64>,
    /// Per-scale means, unscaled first.
    pub per_scale: Vec<f64>,
    /// Mean softmax distillation loss (DL-DL or output technique).
    pub output_loss: Option<f64>,
    /// Explained class per sample.
    pub classes: Vec<usize>,
    /// Sampled ε per sample (LRP only).
    pub epsilons: Vec<f64>,
}

/// Mutable training state threaded through the steps.
pub struct DistillState {
    pub optimizer: SgdMomentum,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Resolved DL-DL output-loss weight (auto-calibrated on first use).
    pub resolved_output_weight: Option<Real>,
}

impl DistillState {
    pub fn new(student: &Network, cfg: &DistillConfig) -> Self {
        DistillState {
            optimizer: SgdMomentum::new(student, cfg.lr, cfg.momentum, cfg.clip_norm),
            rng: crate::seeds::rng(cfg.seed, "distill-step", 0),
            step: 0,
            resolved_output_weight: cfg.output_loss_weight,
        }
    }
}

fn technique_method(technique: DistillTechnique, epsilon: Real) -> Option<ExplanationMethod> {
    match technique {
        DistillTechnique::Lrp => Some(ExplanationMethod::Lrp { epsilon }),
        DistillTechnique::GradientTimesInput => Some(ExplanationMethod::GradientTimesInput),
        DistillTechnique::InputGradient => Some(ExplanationMethod::InputGradient),
        DistillTechnique::GradCam => Some(ExplanationMethod::GradCam { layer: None }),
        DistillTechnique::Attention => Some(ExplanationMethod::Attention { layer: None }),
        DistillTechnique::Output => None,
    }
}

/// Gradient tensors aligned with `net.param_refs()`, zeros where a loss
/// does not reach a parameter.
fn collect_grads(
    graph: &Graph,
    grads: &crate::graph::Gradients,
    net: &Network,
    params: &[(ParamRef, NodeId)],
) -> Vec<Tensor> {
    net.param_refs()
        .iter()
        .map(|&r| {
            params
                .iter()
                .find(|(pr, _)| *pr == r)
                .and_then(|(_, node)| grads.grad_tensor(graph, *node))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(net.param(r).shape()))
        })
        .collect()
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av += gv;
        }
    }
}

fn scale_grads(acc: &mut [Tensor], factor: Real) {
    for a in acc.iter_mut() {
        for v in a.data_mut() {
            *v *= factor;
        }
    }
}

/// Per-loss, per-parameter batch gradients, already routed for DL-DL.
/// Exposed so the routing invariant is directly assertable.
pub struct RoutedGrads {
    /// Explanation-loss gradients; exactly zero on the last layer under DL-DL.
    pub explanation: Vec<Tensor>,
    /// Weighted output-loss gradients; exactly zero off the last layer.
    pub output: Option<Vec<Tensor>>,
}

/// One distillation step over a batch: draws per-sample classes and ε,
/// builds teacher heatmaps as constants and student heatmaps as
/// differentiable nodes, means the pyramidal loss over the batch, routes
/// DL-DL gradients, and applies one clipped SGD-momentum update.
pub fn distill_step(
    teacher: &Network,
    student: &mut Network,
    batch: &[DistillSample],
    cfg: &DistillConfig,
    state: &mut DistillState,
) -> Result<LossReport> {
    let (report, routed) = distill_step_grads(teacher, student, batch, cfg, state)?;
    let mut combined = routed.explanation;
    if let Some(out) = routed.output {
        add_into(&mut combined, &out);
    }
    state.optimizer.step(student, &combined)?;
    state.step += 1;
    Ok(report)
}

/// The gradient-producing half of [`distill_step`]; does not update the
/// student.
pub fn distill_step_grads(
    teacher: &Network,
    student: &Network,
    batch: &[DistillSample],
    cfg: &DistillConfig,
    state: &mut DistillState,
) -> Result<(LossReport, RoutedGrads)> {
    cfg.validate()?;
    if !teacher.all_frozen() {
        return Err(Error::contract("teacher must be fully frozen"));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let refs = student.param_refs();
    let n = batch.len() as Real;
    let use_output = cfg.dldl || cfg.technique == DistillTechnique::Output;

    // draw classes and epsilons in sample order
    let mut classes = Vec::with_capacity(batch.len());
    let mut epsilons = Vec::with_capacity(batch.len());
    let mut teacher_logits = Vec::with_capacity(batch.len());
    for sample in batch {
        let logits = teacher.forward_eval(&sample.x_teacher)?;
        let k = select_class(&logits, cfg.p_top, &mut state.rng)?;
        classes.push(k);
        if cfg.technique == DistillTechnique::Lrp {
            epsilons.push(sample_epsilon(
                cfg.epsilon_low,
                cfg.epsilon_high,
                &mut state.rng,
            ));
        }
        teacher_logits.push(logits);
    }

    let mut expl_acc: Vec<Tensor> = refs
        .iter()
        .map(|&r| Tensor::zeros(student.param(r).shape()))
        .collect();
    let mut out_acc = expl_acc.clone();
    let mut expl_sum = 0.0;
    let mut out_sum = 0.0;
    let mut per_scale_sums: Vec<Real> = Vec::new();

    for (i, sample) in batch.iter().enumerate() {
        let k = classes[i];
        let eps = epsilons.get(i).copied().unwrap_or(0.0);
        let method = technique_method(cfg.technique, eps);

        // teacher heatmap as a plain tensor; same ε as the student
        let gt_tensor = match &method {
            Some(m) => Some(explain::explain(teacher, &sample.x_teacher, Some(k), m)?.values),
            None => None,
        };

        let mut graph = Graph::new();
        let x = graph.leaf(sample.x.clone(), true);

        if let Some(m) = &method {
            let built = explain::build_explanation(&mut graph, student, x, Some(k), m, true)?;
            let gt = graph.constant(gt_tensor.expect("teacher heatmap"));
            let pyramid = pyramidal_loss(&mut graph, gt, built.heatmap, cfg.pyramid_floor)?;
            let loss_val = graph.value(pyramid.total).item();
            if !loss_val.is_finite() {
                return Err(Error::numeric("non-finite explanation loss, step skipped"));
            }
            expl_sum += loss_val;
            if per_scale_sums.is_empty() {
                per_scale_sums = vec![0.0; pyramid.per_scale.len()];
            }
            for (acc, &node) in per_scale_sums.iter_mut().zip(&pyramid.per_scale) {
                *acc += graph.value(node).item();
            }
            let grads = graph.backward(pyramid.total)?;
            add_into(
                &mut expl_acc,
                &collect_grads(&graph, &grads, student, &built.params),
            );

            if use_output {
                let out_loss = output_distillation_loss(
                    &mut graph,
                    &teacher_logits[i],
                    built.logits,
                    cfg.temperature,
                )?;
                out_sum += graph.value(out_loss).item();
                let ograds = graph.backward(out_loss)?;
                add_into(
                    &mut out_acc,
                    &collect_grads(&graph, &ograds, student, &built.params),
                );
            }
        } else {
            let (logits, trace) =
                student.forward_graph(&mut graph, x, crate::net::Mode::Eval, true)?;
            let out_loss =
                output_distillation_loss(&mut graph, &teacher_logits[i], logits, cfg.temperature)?;
            let v = graph.value(out_loss).item();
            if !v.is_finite() {
                return Err(Error::numeric("non-finite output loss, step skipped"));
            }
            out_sum += v;
            let grads = graph.backward(out_loss)?;
            add_into(
                &mut out_acc,
                &collect_grads(&graph, &grads, student, &trace.params),
            );
        }
    }

    scale_grads(&mut expl_acc, 1.0 / n);
    scale_grads(&mut out_acc, 1.0 / n);
    let expl_mean = expl_sum / n;
    let out_mean = out_sum / n;

    // DL-DL routing: the explanation loss never touches the last layer,
    // the output loss touches nothing else
    let mut output_part = None;
    if cfg.dldl {
        let last = student
            .last_param_layer()
            .ok_or_else(|| Error::contract("student has no parameterized layer"))?;
        for (g, &r) in expl_acc.iter_mut().zip(&refs) {
            if r.layer == last {
                *g = Tensor::zeros(g.shape());
            }
        }
        for (g, &r) in out_acc.iter_mut().zip(&refs) {
            if r.layer != last {
                *g = Tensor::zeros(g.shape());
            }
        }
        let weight = match state.resolved_output_weight {
            Some(w) => w,
            None => {
                let w = if out_mean > 1e-6 { 1.0 / out_mean } else { 1.0 };
                log::info!("DL-DL output loss weight auto-calibrated to {w}");
                state.resolved_output_weight = Some(w);
                w
            }
        };
        scale_grads(&mut out_acc, weight);
        output_part = Some(out_acc);
    } else if cfg.technique == DistillTechnique::Output {
        output_part = Some(out_acc);
    }

    let report = LossReport {
        step: state.step,
        explanation_loss: cfg.technique.is_explanation().then_some(expl_mean as f64),
        per_scale: per_scale_sums.iter().map(|&s| (s / n) as f64).collect(),
        output_loss: use_output.then_some(out_mean as f64),
        classes,
        epsilons: epsilons.iter().map(|&e| e as f64).collect(),
    };
    Ok((
        report,
        RoutedGrads {
            explanation: expl_acc,
            output: output_part,
        },
    ))
}
