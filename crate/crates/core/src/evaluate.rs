//! Measurement: identity and pathology classifiers trained on original
//! images, accuracy / F1 / replacement / leakage metrics on privatized sets,
//! Deep Taylor relevance maps and the results table.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffcore::checkpoint;
use crate::diffcore::{
    backward_with, forward, step, BackwardOptions, Layer, NetworkSpec, OptimizerConfig,
    OptimizerState, ParameterSet, Tensor,
};
use crate::error::{Error, Result};
use crate::imaging::{write_pgm, GrayImage};
use crate::pprlvgan::argmax;
use crate::privatize::PrivatizedImage;
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Identity,
    Pathology,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Identity => "identity",
            Target::Pathology => "pathology",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Target::Identity),
            "pathology" => Some(Target::Pathology),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Bias-free networks conserve Deep Taylor relevance exactly.
    pub bias: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            epochs: 15,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-3, 0.9, 0.999),
            bias: true,
        }
    }
}

/// Three stride-2 relu convolutions and a dense softmax head.
pub fn classifier_spec(resolution: usize, base_channels: usize, classes: usize, bias: bool) -> NetworkSpec {
    let b = base_channels;
    let side = resolution / 8;
    NetworkSpec::new(vec![1, resolution, resolution])
        .conv2d("conv1", 1, b, 4, 2, 1, bias)
        .relu()
        .conv2d("conv2", b, 2 * b, 4, 2, 1, bias)
        .relu()
        .conv2d("conv3", 2 * b, 4 * b, 4, 2, 1, bias)
        .relu()
        .flatten()
        .dense("head", 4 * b * side * side, classes, bias)
        .softmax()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub target: Target,
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    /// Class labels; position is the output index.
    pub label_space: Vec<u32>,
}

impl ClassifierState {
    pub fn new(target: Target, spec: NetworkSpec, params: ParameterSet, label_space: Vec<u32>) -> Result<Self> {
        spec.check_params(&params)?;
        let width = spec.output_shape()?;
        if width != [label_space.len()] {
            return Err(Error::invalid(format!(
                "classifier output {:?} does not match {} labels",
                width,
                label_space.len()
            )));
        }
        Ok(Self {
            target,
            spec,
            params,
            label_space,
        })
    }

    fn input_hw(&self) -> (usize, usize) {
        (self.spec.input_shape[1], self.spec.input_shape[2])
    }

    /// Class probabilities per image.
    pub fn probabilities(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>> {
        let hw = self.input_hw();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = stack_images(chunk, hw)?;
            let y = forward(&self.spec, &self.params, &x, None)?.into_output();
            out.extend(y.data().chunks(self.label_space.len()).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Predicted labels (argmax, lowest index on ties).
    pub fn predict(&self, images: &[&GrayImage]) -> Result<Vec<u32>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| self.label_space[argmax(p)])
            .collect())
    }
}

fn stack_images(images: &[&GrayImage], (h, w): (usize, usize)) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(
                "input",
                format!(
                    "image is {}x{}, classifier expects {h}x{w}",
                    img.height(),
                    img.width()
                ),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

fn label_of(target: Target, identity: u32, pathology: u8) -> u32 {
    match target {
        Target::Identity => identity,
        Target::Pathology => pathology as u32,
    }
}

/// Mean cross-entropy and its gradient with respect to the softmax output.
fn cross_entropy(probs: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let n = targets.len();
    let k = probs.item_len();
    let mut grad = Tensor::zeros(probs.shape().to_vec());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = probs.data()[i * k + t].max(1e-30);
        loss -= (p as f64).ln();
        grad.data_mut()[i * k + t] = -1.0 / (n as f32 * p);
    }
    (loss / n as f64, grad)
}

/// Cross-entropy training on `train`; returns the parameters of the epoch
/// with the best validation accuracy (the initial state counts as epoch 0).
pub fn train_classifier(
    train: &Dataset,
    val: &Dataset,
    target: Target,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierState> {
    cfg.optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let label_space: Vec<u32> = match target {
        Target::Identity => train.identities(),
        Target::Pathology => {
            let counts = train.class_counts();
            if counts[0] == 0 || counts[1] == 0 {
                return Err(Error::invalid(
                    "pathology classifier needs both classes in the training set",
                ));
            }
            vec![0, 1]
        }
    };
    if target == Target::Identity {
        if let Some(id) = val.identities().into_iter().find(|id| !label_space.contains(id)) {
            return Err(Error::invalid(format!(
                "validation identity {id} does not appear in the training set"
            )));
        }
    }
    let resolution = train.samples()[0].pixels.height();
    if resolution % 8 != 0 {
        return Err(Error::invalid(format!(
            "resolution must be a multiple of 8, got {resolution}"
        )));
    }
    let spec = classifier_spec(resolution, cfg.base_channels, label_space.len(), cfg.bias);
    let params = spec.init_params(derive_seed(seed, 1))?;
    let mut model = ClassifierState::new(target, spec, params, label_space)?;
    let index: BTreeMap<u32, usize> = model
        .label_space
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();

    let val_acc = |m: &ClassifierState| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let imgs: Vec<&GrayImage> = val.samples().iter().map(|s| &s.pixels).collect();
        let labels: Vec<u32> = val
            .samples()
            .iter()
            .map(|s| label_of(target, s.identity, s.pathology))
            .collect();
        accuracy(m, &imgs, &labels)
    };
    let mut best = (val_acc(&model)?, model.params.clone());
    let mut opt = OptimizerState::new();
    let mut rng = stream_rng(seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &train.samples()[i].pixels).collect();
            let targets: Vec<usize> = chunk
                .iter()
                .map(|&i| {
                    let s = &train.samples()[i];
                    index[&label_of(target, s.identity, s.pathology)]
                })
                .collect();
            let x = stack_images(&imgs, (resolution, resolution))?;
            let trace = forward(&model.spec, &model.params, &x, None)?;
            let (loss, grad) = cross_entropy(trace.output(), &targets);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite classifier loss {loss}")));
            }
            let grads = backward_with(
                &model.spec,
                &model.params,
                &trace,
                &grad,
                BackwardOptions {
                    param_grads: true,
                    input_grad: false,
                },
            )?;
            step(&mut model.params, &grads.params, &cfg.optimizer, &mut opt)?;
        }
        let acc = val_acc(&model)?;
        if acc > best.0 || val.is_empty() {
            best = (acc, model.params.clone());
        }
    }
    model.params = best.1;
    Ok(model)
}

// ----------------------------------------------------------------- metrics

/// Fraction of equal entries.
pub fn accuracy_of<L: PartialEq>(predictions: &[L], labels: &[L]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &ClassifierState, images: &[&GrayImage], labels: &[u32]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    accuracy_of(&model.predict(images)?, labels)
}

/// F1 of the positive class (pathology present); 0 when precision and
/// recall are both 0.
pub fn f1(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("f1 of an empty set"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    // 2PR / (P + R) reduces to a single division, which rounds once.
    if tp == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

fn require_identity_model(model: &ClassifierState) -> Result<()> {
    if model.target != Target::Identity {
        return Err(Error::invalid("identity metrics need an identity classifier"));
    }
    Ok(())
}

fn privatized_pixels(items: &[PrivatizedImage]) -> Vec<&GrayImage> {
    items.iter().map(|p| &p.pixels).collect()
}

/// Fraction of privatized images recognized as their replacement identity.
pub fn replacement_identity_accuracy(model: &ClassifierState, items: &[PrivatizedImage]) -> Result<f64> {
    require_identity_model(model)?;
    let targets = items
        .iter()
        .map(|p| {
            p.replacement_identity.ok_or_else(|| {
                Error::invalid(format!("{} has no replacement identity", p.original_sample_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    accuracy(model, &privatized_pixels(items), &targets)
}

/// Fraction of privatized images attributed to any identity that
/// contributed to them.
pub fn source_leakage_accuracy(model: &ClassifierState, items: &[PrivatizedImage]) -> Result<f64> {
    require_identity_model(model)?;
    if items.is_empty() {
        return Err(Error::invalid("leakage of an empty set"));
    }
    for p in items {
        if p.source_identities.is_empty() {
            return Err(Error::Provenance(format!(
                "{} carries no source identities",
                p.original_sample_id
            )));
        }
    }
    let preds = model.predict(&privatized_pixels(items))?;
    let hits = preds
        .iter()
        .zip(items)
        .filter(|(pred, p)| p.source_identities.contains(pred) || p.replacement_identity == Some(**pred))
        .count();
    Ok(hits as f64 / items.len() as f64)
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRow {
    pub experiment: String,
    pub dataset: String,
    pub identity_acc: f64,
    pub replacement_acc: Option<f64>,
    pub source_leakage_acc: Option<f64>,
    pub task_acc: f64,
    pub task_f1: f64,
}

fn task_metrics(task: &ClassifierState, images: &[&GrayImage], pathology: &[u8]) -> Result<(f64, f64)> {
    if task.target != Target::Pathology {
        return Err(Error::invalid("task metrics need a pathology classifier"));
    }
    let preds = task.predict(images)?;
    let labels: Vec<u32> = pathology.iter().map(|&p| p as u32).collect();
    let acc = accuracy_of(&preds, &labels)?;
    let pb: Vec<bool> = preds.iter().map(|&p| p == 1).collect();
    let lb: Vec<bool> = pathology.iter().map(|&p| p == 1).collect();
    Ok((acc, f1(&pb, &lb)?))
}

/// Row for an unmodified dataset.
pub fn evaluate_original(
    identity: &ClassifierState,
    task: &ClassifierState,
    experiment: &str,
    dataset_name: &str,
    data: &Dataset,
) -> Result<EvaluationRow> {
    require_identity_model(identity)?;
    let imgs: Vec<&GrayImage> = data.samples().iter().map(|s| &s.pixels).collect();
    let ids: Vec<u32> = data.samples().iter().map(|s| s.identity).collect();
    let path: Vec<u8> = data.samples().iter().map(|s| s.pathology).collect();
    let (task_acc, task_f1) = task_metrics(task, &imgs, &path)?;
    Ok(EvaluationRow {
        experiment: experiment.to_string(),
        dataset: dataset_name.to_string(),
        identity_acc: accuracy(identity, &imgs, &ids)?,
        replacement_acc: None,
        source_leakage_acc: None,
        task_acc,
        task_f1,
    })
}

/// Row for a privatized set. Replacement accuracy is reported when every
/// item carries a replacement identity.
pub fn evaluate_privatized(
    identity: &ClassifierState,
    task: &ClassifierState,
    experiment: &str,
    dataset_name: &str,
    items: &[PrivatizedImage],
) -> Result<EvaluationRow> {
    require_identity_model(identity)?;
    let imgs = privatized_pixels(items);
    let ids: Vec<u32> = items.iter().map(|p| p.original_identity).collect();
    let path: Vec<u8> = items.iter().map(|p| p.original_pathology).collect();
    let (task_acc, task_f1) = task_metrics(task, &imgs, &path)?;
    let replacement_acc = if items.iter().all(|p| p.replacement_identity.is_some()) {
        Some(replacement_identity_accuracy(identity, items)?)
    } else {
        None
    };
    Ok(EvaluationRow {
        experiment: experiment.to_string(),
        dataset: dataset_name.to_string(),
        identity_acc: accuracy(identity, &imgs, &ids)?,
        replacement_acc,
        source_leakage_acc: Some(source_leakage_accuracy(identity, items)?),
        task_acc,
        task_f1,
    })
}

pub const REPORT_HEADER: [&str; 7] = [
    "experiment",
    "dataset",
    "identity_acc",
    "replacement_acc",
    "source_leakage_acc",
    "task_acc",
    "task_f1",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<EvaluationRow>,
    pub csv: String,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Emits rows in order as CSV with 4-decimal floats and empty optionals.
pub fn build_report(rows: Vec<EvaluationRow>) -> EvaluationReport {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in &rows {
        w.write_record([
            r.experiment.clone(),
            r.dataset.clone(),
            fmt4(r.identity_acc),
            r.replacement_acc.map(fmt4).unwrap_or_default(),
            r.source_leakage_acc.map(fmt4).unwrap_or_default(),
            fmt4(r.task_acc),
            fmt4(r.task_f1),
        ])
        .expect("in-memory write");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    EvaluationReport { rows, csv }
}

pub fn parse_report(text: &str) -> Result<Vec<EvaluationRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::invalid(e.to_string()))?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::invalid(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid(format!("report row {}: {e}", i + 1)))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| Error::invalid(format!("report row {}: bad {} `{}`", i + 1, REPORT_HEADER[j], &rec[j])))
        };
        let opt = |j: usize| -> Result<Option<f64>> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                num(j).map(Some)
            }
        };
        rows.push(EvaluationRow {
            experiment: rec[0].to_string(),
            dataset: rec[1].to_string(),
            identity_acc: num(2)?,
            replacement_acc: opt(3)?,
            source_leakage_acc: opt(4)?,
            task_acc: num(5)?,
            task_f1: num(6)?,
        });
    }
    Ok(rows)
}

// ------------------------------------------------------------ Deep Taylor

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub values: GrayImage,
    pub predicted_class: usize,
    /// Pre-softmax score of the explained class.
    pub output_score: f64,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.values.data().iter().map(|&v| v as f64).sum()
    }

    /// Mean relevance inside and outside `mask`.
    pub fn region_means(&self, mask: &[bool]) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.data().iter().zip(mask) {
            if m {
                si += v as f64;
                ni += 1;
            } else {
                so += v as f64;
                no += 1;
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }
}

const DT_STABILIZER: f32 = 1e-9;

/// Single-layer network over `layer` with transformed weights and bias.
fn single_layer(
    input_shape: &[usize],
    layer: &Layer,
    params: &ParameterSet,
    weight_map: impl Fn(f32) -> f32,
    bias_map: impl Fn(f32) -> f32,
) -> Result<(NetworkSpec, ParameterSet)> {
    let spec = NetworkSpec::new(input_shape.to_vec()).layer(layer.clone());
    let mut p = ParameterSet::new();
    for (name, _) in layer.parameter_shapes() {
        let t = params
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        let f: &dyn Fn(f32) -> f32 = if name.ends_with(".bias") { &bias_map } else { &weight_map };
        p.insert(name, t.map(f))?;
    }
    Ok((spec, p))
}

/// `Wᵀ s` for the layer's weights after `weight_map`.
fn transpose_apply(
    input_shape: &[usize],
    layer: &Layer,
    params: &ParameterSet,
    weight_map: impl Fn(f32) -> f32,
    probe: &Tensor,
    s: &Tensor,
) -> Result<Tensor> {
    let (spec, p) = single_layer(input_shape, layer, params, weight_map, |_| 0.0)?;
    let trace = forward(&spec, &p, probe, None)?;
    let g = backward_with(
        &spec,
        &p,
        &trace,
        s,
        BackwardOptions {
            param_grads: false,
            input_grad: true,
        },
    )?;
    Ok(g.input.expect("requested"))
}

/// Deep Taylor decomposition of the score of `class_index` (default: the
/// predicted class). Hidden dense/conv layers use the z⁺ rule; the first
/// layer uses the z^B rule with pixel bounds `[0, 1]` (padding is not a
/// pixel and receives no relevance). Biases enter denominators only.
pub fn deep_taylor(model: &ClassifierState, image: &GrayImage, class_index: Option<usize>) -> Result<RelevanceMap> {
    let spec = &model.spec;
    let mut layers: &[Layer] = &spec.layers;
    if matches!(layers.last(), Some(Layer::Softmax)) {
        layers = &layers[..layers.len() - 1];
    }
    for l in layers {
        if !matches!(l, Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::Relu | Layer::Flatten) {
            return Err(Error::invalid(format!(
                "deep taylor does not support `{}` layers",
                l.kind()
            )));
        }
    }
    if !image.in_unit_range() {
        return Err(Error::invalid("deep taylor inputs must lie in [0, 1]"));
    }
    let (h, w) = model.input_hw();
    let x = stack_images(&[image], (h, w))?;
    let trace = forward(spec, &model.params, &x, None)?;
    let shapes = spec.shapes()?;
    let scores = match spec.layers.last() {
        Some(Layer::Softmax) => trace.layer_input(spec.layers.len() - 1).expect("softmax input").clone(),
        _ => trace.output().clone(),
    };
    let predicted = argmax(scores.data());
    let class = class_index.unwrap_or(predicted);
    if class >= scores.len() {
        return Err(Error::invalid(format!("class index {class} out of range")));
    }
    let output_score = scores.data()[class] as f64;
    let mut r = Tensor::zeros(scores.shape().to_vec());
    r.data_mut()[class] = output_score.max(0.0) as f32;

    let first_param = layers
        .iter()
        .position(|l| !l.parameter_shapes().is_empty())
        .ok_or_else(|| Error::invalid("network has no weighted layers"))?;
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let a = trace.layer_input(i).expect("layer input");
        let mut in_shape = vec![1];
        in_shape.extend_from_slice(&shapes[i]);
        r = match layer {
            Layer::Relu => r,
            Layer::Flatten => r.reshape(in_shape)?,
            Layer::Dense { .. } | Layer::Conv2d { .. } if i > first_param => {
                let (sp, p) = single_layer(&shapes[i], layer, &model.params, |w| w.max(0.0), |b| b.max(0.0))?;
                let z = forward(&sp, &p, a, None)?.into_output();
                let s = Tensor::new(
                    z.shape().to_vec(),
                    r.data().iter().zip(z.data()).map(|(&rk, &zk)| rk / (zk + DT_STABILIZER)).collect(),
                )?;
                let c = transpose_apply(&shapes[i], layer, &model.params, |w| w.max(0.0), a, &s)?;
                Tensor::new(c.shape().to_vec(), a.data().iter().zip(c.data()).map(|(&aj, &cj)| aj * cj).collect())?
            }
            Layer::Dense { .. } | Layer::Conv2d { .. } => {
                // z^B with l = 0, h = 1: z = W x - W⁻ 1 (+ b⁺)
                let (sp, p) = single_layer(&shapes[i], layer, &model.params, |w| w, |b| b.max(0.0))?;
                let zx = forward(&sp, &p, a, None)?.into_output();
                let ones = Tensor::full(a.shape().to_vec(), 1.0f32);
                let (spn, pn) = single_layer(&shapes[i], layer, &model.params, |w| w.min(0.0), |_| 0.0)?;
                let zh = forward(&spn, &pn, &ones, None)?.into_output();
                let s = Tensor::new(
                    zx.shape().to_vec(),
                    r.data()
                        .iter()
                        .zip(zx.data().iter().zip(zh.data()))
                        .map(|(&rk, (&zxk, &zhk))| rk / (zxk - zhk + DT_STABILIZER))
                        .collect(),
                )?;
                let c = transpose_apply(&shapes[i], layer, &model.params, |w| w, a, &s)?;
                let cn = transpose_apply(&shapes[i], layer, &model.params, |w| w.min(0.0), &ones, &s)?;
                Tensor::new(
                    c.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(c.data().iter().zip(cn.data()))
                        .map(|(&xi, (&ci, &cni))| (xi * ci - cni).max(0.0))
                        .collect(),
                )?
            }
            _ => unreachable!("checked above"),
        };
    }
    Ok(RelevanceMap {
        values: GrayImage::new(h, w, r.into_data())?,
        predicted_class: predicted,
        output_score,
    })
}

/// Writes a max-normalized PGM and the raw values as a one-tensor
/// checkpoint at `<path>.psck`.
pub fn save_relevance(map: &RelevanceMap, pgm: &Path) -> Result<()> {
    let max = map.values.data().iter().copied().fold(0.0f32, f32::max);
    let scaled = if max > 0.0 {
        GrayImage::new(
            map.values.height(),
            map.values.width(),
            map.values.data().iter().map(|v| v / max).collect(),
        )?
    } else {
        map.values.clone()
    };
    write_pgm(pgm, &scaled)?;
    let mut raw = ParameterSet::new();
    raw.insert(
        "relevance",
        Tensor::new(
            vec![map.values.height(), map.values.width()],
            map.values.data().to_vec(),
        )?,
    )?;
    checkpoint::save(&pgm.with_extension("psck"), &raw)
}

pub fn save_classifier(path: &Path, model: &ClassifierState) -> Result<()> {
    checkpoint::save(path, &model.params)?;
    let mut meta = BTreeMap::new();
    meta.insert("target".to_string(), model.target.as_str().to_string());
    meta.insert("resolution".to_string(), model.input_hw().0.to_string());
    let base = match &model.spec.layers[0] {
        Layer::Conv2d { out_channels, bias, .. } => {
            meta.insert("bias".to_string(), bias.to_string());
            *out_channels
        }
        _ => return Err(Error::invalid("not a classifier spec")),
    };
    meta.insert("base_channels".to_string(), base.to_string());
    meta.insert(
        "labels".to_string(),
        model.label_space.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
    );
    checkpoint::save_metadata(&crate::pprlvgan::metadata_path(path), &meta)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierState> {
    let params = checkpoint::load(path)?;
    let meta = checkpoint::load_metadata(&crate::pprlvgan::metadata_path(path))?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
    };
    let target = Target::parse(&get("target")?).ok_or_else(|| Error::Checkpoint("bad target".into()))?;
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
    };
    let bias = get("bias")? == "true";
    let labels = get("labels")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<Vec<u32>, _>>()
        .map_err(|_| Error::Checkpoint("bad label list".into()))?;
    let spec = classifier_spec(int("resolution")?, int("base_channels")?, labels.len(), bias);
    ClassifierState::new(target, spec, params, labels)
}
