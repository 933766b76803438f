//! Experiment orchestration: dataset generation, ERM teacher training,
//! student distillation, three-split evaluation with generalization gaps,
//! and heatmap export. The CLI binary is a thin wrapper over this module.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::biasdata::{
    self, BiasKind, BiasSpec, BiasedDataset, GlyphSource, SampleRecord, Split, SplitCounts,
};
use crate::distill::{
    self, DistillConfig, DistillSample, DistillState, DistillTechnique, TeacherInput,
};
use crate::error::{Error, Result};
use crate::explain::{self, ExplanationMethod};
use crate::graph::{Graph, NodeId};
use crate::net::{self, LayerSpec, Mode, Network, SgdMomentum};
use crate::seeds;
use crate::tensor::{Real, Tensor};

// ---- configuration -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub kind: BiasKind,
    pub class_count: Option<usize>,
    pub confounder_strength: Real,
    pub shift_permutation: Option<Vec<usize>>,
    pub train_per_class: Option<usize>,
    pub val_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Directory holding MNIST IDX files to use as foregrounds
    /// (train-images-idx3-ubyte / train-labels-idx1-ubyte).
    pub mnist_dir: Option<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: BiasKind::ForegroundColor,
            class_count: None,
            confounder_strength: 1.0,
            shift_permutation: None,
            train_per_class: None,
            val_per_class: None,
            test_per_class: None,
            mnist_dir: None,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self, seed: u64) -> BiasSpec {
        let mut spec = match self.kind {
            BiasKind::ForegroundColor => BiasSpec::colored_glyphs(seed),
            BiasKind::BackgroundTexture => BiasSpec::background_texture(seed),
        };
        if let Some(c) = self.class_count {
            spec.class_count = c;
        }
        spec.confounder_strength = self.confounder_strength;
        spec.shift_permutation = self.shift_permutation.clone();
        spec
    }

    pub fn counts(&self) -> SplitCounts {
        let mut counts = match self.kind {
            BiasKind::ForegroundColor => SplitCounts::colored_default(),
            BiasKind::BackgroundTexture => SplitCounts::background_default(),
        };
        if let Some(n) = self.train_per_class {
            counts.train_per_class = n;
        }
        if let Some(n) = self.val_per_class {
            counts.val_per_class = n;
        }
        if let Some(n) = self.test_per_class {
            counts.test_per_class = n;
        }
        counts
    }

    pub fn generate(&self, seed: u64) -> Result<BiasedDataset> {
        let spec = self.spec(seed);
        match self.kind {
            BiasKind::ForegroundColor => match &self.mnist_dir {
                None => biasdata::gen_colored_glyphs(&spec, &self.counts()),
                Some(dir) => {
                    let dir = Path::new(dir);
                    let mnist = biasdata::load_mnist_idx(
                        dir.join("train-images-idx3-ubyte"),
                        dir.join("train-labels-idx1-ubyte"),
                    )?;
                    let pairs = mnist.pairs();
                    biasdata::gen_colored_glyphs_from(
                        &spec,
                        &self.counts(),
                        &GlyphSource::Images(&pairs),
                    )
                }
            },
            BiasKind::BackgroundTexture => biasdata::gen_background_bias(&spec, &self.counts()),
        }
    }
}

/// What the teacher trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherData {
    /// Regenerate the corpus at a different confounder strength
    /// (default 0: colors/textures uncorrelated with labels).
    Unbiased,
    /// The same corpus with backgrounds replaced by noise.
    Debiased,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub arch: Option<Vec<LayerSpec>>,
    pub lr: Real,
    pub momentum: Real,
    pub clip_norm: Real,
    pub weight_decay: Real,
    pub epochs: usize,
    pub batch_size: usize,
    pub data: Option<TeacherData>,
    /// Strength used when regenerating the unbiased teacher corpus.
    pub unbiased_strength: Real,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            arch: None,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: 1.0,
            weight_decay: 1e-3,
            epochs: 40,
            batch_size: 32,
            data: None,
            unbiased_strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StudentSection {
    pub arch: Option<Vec<LayerSpec>>,
    /// ERM baseline epochs (used by the acceptance harness).
    pub erm_epochs: Option<usize>,
}

/// One declarative document driving the whole pipeline; every field has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub teacher: TrainSection,
    pub student: StudentSection,
    pub distill: DistillConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn teacher_data(&self) -> TeacherData {
        self.teacher.data.unwrap_or(match self.dataset.kind {
            BiasKind::ForegroundColor => TeacherData::Unbiased,
            BiasKind::BackgroundTexture => TeacherData::Debiased,
        })
    }
}

/// Stock teacher/student conv stacks for a given input size. Both end in
/// the same dense(64) -> dense(C) pair, so the frozen-last-layer copy
/// always lines up.
pub fn preset_arch(role: &str, input_shape: &[usize], class_count: usize) -> Result<Vec<LayerSpec>> {
    if input_shape.len() != 3 {
        return Err(Error::config("preset architectures need [C,H,W] inputs"));
    }
    let big = input_shape[1] > 32;
    let widths: &[usize] = match (role, big) {
        ("teacher", false) => &[16, 32],
        ("student", false) => &[8, 16],
        ("teacher", true) => &[12, 24, 32],
        ("student", true) => &[8, 16, 24],
        _ => return Err(Error::config(format!("unknown architecture role '{role}'"))),
    };
    let mut layers = Vec::new();
    for &w in widths {
        layers.push(LayerSpec::Conv2d {
            out_channels: w,
            kernel: 3,
            stride: 2,
            padding: 1,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { out_features: 64 });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense {
        out_features: class_count,
    });
    Ok(layers)
}

pub fn build_from_section(
    arch: &Option<Vec<LayerSpec>>,
    role: &str,
    ds: &BiasedDataset,
    seed: u64,
) -> Result<Network> {
    let specs = match arch {
        Some(layers) => layers.clone(),
        None => preset_arch(role, &ds.image_shape, ds.class_count)?,
    };
    net::build_network(&ds.image_shape, ds.class_count, &specs, seed)
}

// ---- ERM training --------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochStats>,
    pub skipped_steps: usize,
}

fn record_input(r: &SampleRecord, debiased: bool) -> Result<&Tensor> {
    if debiased {
        r.x_debiased
            .as_ref()
            .ok_or_else(|| Error::contract("dataset has no debiased images"))
    } else {
        Ok(&r.x)
    }
}

/// −log softmax(logits)[label]
fn cross_entropy(graph: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let c = graph.value(logits).numel();
    if label >= c {
        return Err(Error::contract(format!("label {label} out of range {c}")));
    }
    let zmax = graph.max_all(logits)?;
    let shift = graph.detach(zmax);
    let zs = graph.sub(logits, shift)?;
    let ez = graph.exp(zs)?;
    let sez = graph.sum_all(ez)?;
    let lse = graph.log(sez)?;
    let logsm = graph.sub(zs, lse)?;
    let onehot = graph.constant(Tensor::from_fn(&[c], |i| if i == label { 1.0 } else { 0.0 }));
    let picked = graph.mul(logsm, onehot)?;
    let s = graph.sum_all(picked)?;
    graph.neg(s)
}

/// Plain supervised training (the shortcut-prone baseline) with
/// SGD+momentum, gradient clipping, optional weight decay, and best-model
/// selection on hold-out accuracy. With `debiased` both training and
/// validation read the noise-background twins.
pub fn train_erm(
    network: &mut Network,
    ds: &BiasedDataset,
    cfg: &TrainSection,
    seed: u64,
    debiased: bool,
) -> Result<TrainReport> {
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if train.is_empty() {
        return Err(Error::contract("empty training split"));
    }
    let refs = network.param_refs();
    let mut optimizer = SgdMomentum::new(network, cfg.lr, cfg.momentum, cfg.clip_norm);
    let mut best: Option<(usize, f64, Network)> = None;
    let mut history = Vec::new();
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(seed, "erm-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = refs
                .iter()
                .map(|&r| Tensor::zeros(network.param(r).shape()))
                .collect();
            let mut batch_loss = 0.0;
            let mut failed = false;
            for &idx in chunk {
                let sample = &train[idx];
                let x = record_input(sample, debiased)?;
                let mut graph = Graph::new();
                let xid = graph.leaf(x.clone(), false);
                let (logits, trace) = network.forward_graph(&mut graph, xid, Mode::Train, true)?;
                let loss = match cross_entropy(&mut graph, logits, sample.label) {
                    Ok(l) => l,
                    Err(Error::NumericFault(_)) => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += graph.value(loss).item();
                let grads = graph.backward(loss)?;
                for (slot, (_, node)) in acc.iter_mut().zip(&trace.params) {
                    if let Some(g) = grads.grad_tensor(&graph, *node) {
                        for (a, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
            }
            if failed || !batch_loss.is_finite() {
                skipped += 1;
                continue;
            }
            let inv = 1.0 / chunk.len() as Real;
            for (g, &r) in acc.iter_mut().zip(&refs) {
                let p = network.param(r);
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    *v = *v * inv + cfg.weight_decay * p.data()[i];
                }
            }
            match optimizer.step(network, &acc) {
                Ok(()) => {
                    loss_sum += batch_loss * inv as f64;
                    loss_count += 1;
                }
                Err(Error::NumericFault(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }

        let mean_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        if loss_count > 0 && !mean_loss.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at epoch {epoch}: loss {mean_loss}"
            )));
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            accuracy_with(network, val, debiased)?
        };
        history.push(EpochStats {
            epoch,
            mean_loss,
            val_accuracy: val_acc,
        });
        if best.as_ref().map(|(_, b, _)| val_acc > *b).unwrap_or(true) {
            best = Some((epoch, val_acc, network.clone()));
        }
    }

    let (best_epoch, best_val) = match best {
        Some((e, v, model)) => {
            *network = model;
            (Some(e), v)
        }
        None => (None, 0.0),
    };
    Ok(TrainReport {
        epochs_run: cfg.epochs,
        best_epoch,
        best_val_accuracy: best_val,
        history,
        skipped_steps: skipped,
    })
}

// ---- distillation loop -----------------------------------------------------------

/// Runs explanation (or output) distillation over the training split with
/// hold-out selection on IID validation accuracy. Appends one JSON
/// LossReport per step to `log_path` when given.
///
/// Without DL-DL, explanation techniques copy and freeze the teacher's
/// last layer into the student first.
pub fn distill_run(
    teacher: &Network,
    student: &mut Network,
    ds: &BiasedDataset,
    cfg: &DistillConfig,
    log_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut teacher = teacher.clone();
    teacher.freeze_all();
    if cfg.technique.is_explanation() && !cfg.dldl {
        net::copy_and_freeze_last_layer(&teacher, student)?;
    }
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    if train.is_empty() {
        return Err(Error::contract("empty training split"));
    }
    let debiased_teacher = cfg.teacher_input == TeacherInput::Debiased;
    if debiased_teacher && train.iter().any(|r| r.x_debiased.is_none()) {
        return Err(Error::contract(
            "debiased teacher input requested but dataset has no debiased images",
        ));
    }

    let mut log_file = match log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::io::BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            ))
        }
        None => None,
    };

    let mut state = DistillState::new(student, cfg);
    let mut best: Option<(usize, f64, Network)> = None;
    let mut history = Vec::new();
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, "distill-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DistillSample> = chunk
                .iter()
                .map(|&i| {
                    let r = &train[i];
                    DistillSample {
                        x: r.x.clone(),
                        x_teacher: if debiased_teacher {
                            r.x_debiased.clone().expect("checked above")
                        } else {
                            r.x.clone()
                        },
                    }
                })
                .collect();
            match distill::distill_step(&teacher, student, &batch, cfg, &mut state) {
                Ok(report) => {
                    let step_loss = report
                        .explanation_loss
                        .or(report.output_loss)
                        .unwrap_or(0.0);
                    loss_sum += step_loss;
                    loss_count += 1;
                    if let Some(f) = log_file.as_mut() {
                        serde_json::to_writer(&mut *f, &report)?;
                        f.write_all(b"\n")?;
                    }
                }
                Err(Error::NumericFault(msg)) => {
                    log::warn!("step skipped: {msg}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }

        let mean_loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        };
        let val_acc = if val.is_empty() {
            0.0
        } else {
            accuracy_with(student, val, false)?
        };
        history.push(EpochStats {
            epoch,
            mean_loss,
            val_accuracy: val_acc,
        });
        if best.as_ref().map(|(_, b, _)| val_acc > *b).unwrap_or(true) {
            best = Some((epoch, val_acc, student.clone()));
        }
    }

    let (best_epoch, best_val) = match best {
        Some((e, v, model)) => {
            *student = model;
            (Some(e), v)
        }
        None => (None, 0.0),
    };
    Ok(TrainReport {
        epochs_run: cfg.epochs,
        best_epoch,
        best_val_accuracy: best_val,
        history,
        skipped_steps: skipped,
    })
}

// ---- evaluation ------------------------------------------------------------------

/// Per-split accuracies and generalization gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent correct per split.
    pub iid: f64,
    pub ood: f64,
    pub shift: f64,
    pub gap_iid_ood: f64,
    pub gap_iid_shift: f64,
    pub val: Option<f64>,
    pub loss_log: Option<String>,
    pub selected_checkpoint: Option<String>,
}

fn accuracy_with(net: &Network, records: &[SampleRecord], debiased: bool) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for r in records {
        let x = record_input(r, debiased)?;
        if net.predict(x)? == r.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Argmax accuracy on one split, in percent.
pub fn split_accuracy(net: &Network, ds: &BiasedDataset, split: Split) -> Result<f64> {
    accuracy_with(net, ds.split(split), false)
}

/// Accuracy over the three test splits plus exact gap differences.
pub fn evaluate(net: &Network, ds: &BiasedDataset) -> Result<MetricsReport> {
    if net.class_count != ds.class_count {
        return Err(Error::contract(format!(
            "model has {} classes, dataset {}",
            net.class_count, ds.class_count
        )));
    }
    let iid = split_accuracy(net, ds, Split::TestIid)?;
    let ood = split_accuracy(net, ds, Split::TestOod)?;
    let shift = split_accuracy(net, ds, Split::TestShift)?;
    Ok(MetricsReport {
        iid,
        ood,
        shift,
        gap_iid_ood: iid - ood,
        gap_iid_shift: iid - shift,
        val: None,
        loss_log: None,
        selected_checkpoint: None,
    })
}

pub fn write_metrics(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("accuracy_iid,{}\n", report.iid));
    csv.push_str(&format!("accuracy_ood,{}\n", report.ood));
    csv.push_str(&format!("accuracy_shift,{}\n", report.shift));
    csv.push_str(&format!("gap_iid_ood,{}\n", report.gap_iid_ood));
    csv.push_str(&format!("gap_iid_shift,{}\n", report.gap_iid_shift));
    if let Some(v) = report.val {
        csv.push_str(&format!("accuracy_val,{v}\n"));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    Ok(())
}

// ---- command-level operations ------------------------------------------------------

/// `gen-data`: materializes the configured corpus under `out`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = cfg.dataset.generate(cfg.seed)?;
    biasdata::save_dataset(&ds, cfg.dataset.kind, out)
}

/// `train-teacher`: ERM on unbiased or debiased data, best checkpoint by
/// hold-out accuracy, checkpoint + metrics under `out`.
pub fn cmd_train_teacher(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
    out: &Path,
) -> Result<TrainReport> {
    let (ds, debiased) = teacher_dataset(cfg, data_dir)?;
    let mut teacher = build_from_section(
        &cfg.teacher.arch,
        "teacher",
        &ds,
        seeds::derive(cfg.seed, "teacher-init", 0),
    )?;
    let report = train_erm(&mut teacher, &ds, &cfg.teacher, cfg.seed, debiased)?;
    net::save_checkpoint(&teacher, out.join("checkpoint"))?;
    let mut metrics = evaluate(&teacher, &ds)?;
    metrics.val = Some(report.best_val_accuracy);
    metrics.selected_checkpoint = report.best_epoch.map(|e| format!("epoch-{e}"));
    write_metrics(&metrics, out)?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// The corpus the teacher trains on: regenerated at the unbiased strength
/// for foreground bias, the debiased twin of the student corpus otherwise.
pub fn teacher_dataset(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
) -> Result<(BiasedDataset, bool)> {
    match cfg.teacher_data() {
        TeacherData::Unbiased => {
            let mut section = cfg.dataset.clone();
            section.confounder_strength = cfg.teacher.unbiased_strength;
            Ok((section.generate(cfg.seed)?, false))
        }
        TeacherData::Debiased => {
            let ds = student_dataset(cfg, data_dir)?;
            Ok((ds, true))
        }
    }
}

pub fn student_dataset(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<BiasedDataset> {
    match data_dir {
        Some(dir) => biasdata::load_dataset(dir),
        None => cfg.dataset.generate(cfg.seed),
    }
}

/// `distill`: trains the student against a teacher checkpoint, logging
/// LossReports as JSON lines and writing the selected checkpoint + metrics.
pub fn cmd_distill(
    cfg: &ExperimentConfig,
    teacher_dir: &Path,
    data_dir: Option<&Path>,
    out: &Path,
) -> Result<TrainReport> {
    let ds = student_dataset(cfg, data_dir)?;
    let teacher = net::load_checkpoint(teacher_dir.join("checkpoint"))?;
    let mut student = build_from_section(
        &cfg.student.arch,
        "student",
        &ds,
        seeds::derive(cfg.seed, "student-init", 0),
    )?;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("loss_log.jsonl");
    let report = distill_run(&teacher, &mut student, &ds, &cfg.distill, Some(&log_path))?;
    net::save_checkpoint(&student, out.join("checkpoint"))?;
    let mut metrics = evaluate(&student, &ds)?;
    metrics.val = Some(report.best_val_accuracy);
    metrics.loss_log = Some("loss_log.jsonl".into());
    metrics.selected_checkpoint = report.best_epoch.map(|e| format!("epoch-{e}"));
    write_metrics(&metrics, out)?;
    std::fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// `eval`: three-split metrics for a checkpoint, written as JSON and CSV.
pub fn cmd_eval(model_dir: &Path, data_dir: &Path, out: &Path) -> Result<MetricsReport> {
    let net = net::load_checkpoint(model_dir.join("checkpoint"))?;
    let ds = biasdata::load_dataset(data_dir)?;
    let metrics = evaluate(&net, &ds)?;
    write_metrics(&metrics, out)?;
    Ok(metrics)
}

/// `explain`: renders heatmaps for chosen samples as PNG + PGM with JSON
/// sidecars and a raw XTSR export.
pub fn cmd_explain(
    model_dir: &Path,
    data_dir: &Path,
    split: Split,
    indices: &[usize],
    method: &ExplanationMethod,
    class: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let net = net::load_checkpoint(model_dir.join("checkpoint"))?;
    let ds = biasdata::load_dataset(data_dir)?;
    let records = ds.split(split);
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for &idx in indices {
        let record = records
            .get(idx)
            .ok_or_else(|| Error::contract(format!("index {idx} out of range")))?;
        let k = match method {
            ExplanationMethod::Attention { .. } => None,
            _ => Some(match class {
                Some(k) => k,
                None => net.predict(&record.x)?,
            }),
        };
        let heatmap = explain::explain(&net, &record.x, k, method)?;
        let stem = format!(
            "{}-{:04}-{}",
            split.dir_name(),
            idx,
            method_slug(method)
        );
        let png = out.join(format!("{stem}.png"));
        let pgm = out.join(format!("{stem}.pgm"));
        let xtsr = out.join(format!("{stem}.xtsr"));
        explain::save_heatmap_png(&heatmap, &png)?;
        explain::save_heatmap_pgm(&heatmap, &pgm)?;
        heatmap.values.save_xtsr(&xtsr)?;
        written.push(png);
        written.push(pgm);
        written.push(xtsr);
    }
    Ok(written)
}

pub fn method_slug(method: &ExplanationMethod) -> &'static str {
    match method {
        ExplanationMethod::Attention { .. } => "attention",
        ExplanationMethod::GradCam { .. } => "gradcam",
        ExplanationMethod::InputGradient => "inputgrad",
        ExplanationMethod::GradientTimesInput => "gradxinput",
        ExplanationMethod::Lrp { .. } => "lrp",
    }
}

/// Maps a CLI method name to a distillation technique.
pub fn technique_from_name(name: &str) -> Result<DistillTechnique> {
    Ok(match name {
        "lrp" => DistillTechnique::Lrp,
        "gradxinput" => DistillTechnique::GradientTimesInput,
        "inputgrad" => DistillTechnique::InputGradient,
        "gradcam" => DistillTechnique::GradCam,
        "attention" => DistillTechnique::Attention,
        "output" => DistillTechnique::Output,
        other => {
            return Err(Error::config(format!(
                "unknown method '{other}' (lrp|gradxinput|inputgrad|gradcam|attention|output)"
            )))
        }
    })
}

/// Maps a CLI method name to an explanation method for `explain`.
pub fn explanation_from_name(name: &str) -> Result<ExplanationMethod> {
    Ok(match name {
        "lrp" => ExplanationMethod::Lrp { epsilon: 0.01 },
        "gradxinput" => ExplanationMethod::GradientTimesInput,
        "inputgrad" => ExplanationMethod::InputGradient,
        "gradcam" => ExplanationMethod::GradCam { layer: None },
        "attention" => ExplanationMethod::Attention { layer: None },
        other => {
            return Err(Error::config(format!(
                "unknown explanation method '{other}'"
            )))
        }
    })
}

/// Per-epoch BatchNorm running-statistics refresh from a batch of traced
/// inputs; a helper for architectures that opt into BatchNorm.
pub fn update_bn_from_batch(
    net: &mut Network,
    layer: usize,
    inputs: &[Tensor],
) -> Result<()> {
    if inputs.is_empty() {
        return Ok(());
    }
    let shape = inputs[0].shape().to_vec();
    let channels = shape[0];
    let per_channel: usize = shape.iter().skip(1).product::<usize>().max(1);
    let n = (inputs.len() * per_channel) as Real;
    let mut mean = vec![0.0 as Real; channels];
    for t in inputs {
        for c in 0..channels {
            for i in 0..per_channel {
                mean[c] += t.data()[c * per_channel + i];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0 as Real; channels];
    for t in inputs {
        for c in 0..channels {
            for i in 0..per_channel {
                let d = t.data()[c * per_channel + i] - mean[c];
                var[c] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    net.update_bn_stats(
        layer,
        &Tensor::new(vec![channels], mean)?,
        &Tensor::new(vec![channels], var)?,
    )
}

/// Re-evaluates stored gaps from the accuracies; used by tests to assert
/// the report's internal consistency.
pub fn gaps_consistent(m: &MetricsReport) -> bool {
    m.gap_iid_ood == m.iid - m.ood && m.gap_iid_shift == m.iid - m.shift
}

/// Collects every metric of a pipeline run into one comparable value,
/// for bitwise reproducibility checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub teacher: MetricsReport,
    pub student: MetricsReport,
}

/// gen → teacher → distill → eval, entirely in memory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineMetrics> {
    let ds = cfg.dataset.generate(cfg.seed)?;
    let (teacher_ds, teacher_debiased) = teacher_dataset(cfg, None)?;
    let mut teacher = build_from_section(
        &cfg.teacher.arch,
        "teacher",
        &teacher_ds,
        seeds::derive(cfg.seed, "teacher-init", 0),
    )?;
    let t_report = train_erm(&mut teacher, &teacher_ds, &cfg.teacher, cfg.seed, teacher_debiased)?;
    let mut teacher_metrics = evaluate(&teacher, &teacher_ds)?;
    teacher_metrics.val = Some(t_report.best_val_accuracy);

    let mut student = build_from_section(
        &cfg.student.arch,
        "student",
        &ds,
        seeds::derive(cfg.seed, "student-init", 0),
    )?;
    let s_report = distill_run(&teacher, &mut student, &ds, &cfg.distill, None)?;
    let mut student_metrics = evaluate(&student, &ds)?;
    student_metrics.val = Some(s_report.best_val_accuracy);
    Ok(PipelineMetrics {
        teacher: teacher_metrics,
        student: student_metrics,
    })
}
