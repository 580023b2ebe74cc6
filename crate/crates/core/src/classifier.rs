//! Location classifiers: a SeLU multilayer perceptron trained with
//! mini-batch SGD and momentum, and a brute-force KNN baseline.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::evs::{FeatureKind, FeatureVector};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
/// Probability floor applied before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

/// Cross-entropy of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// The target probability was below [`PROB_FLOOR`] and got clamped.
    pub clamped: bool,
}

pub fn loss(probs: &[f64], label: usize) -> Result<Loss> {
    let p = *probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok(Loss {
        value: -p.max(PROB_FLOOR).ln(),
        clamped: p < PROB_FLOOR,
    })
}

/// Fully connected network: SeLU on every hidden layer, softmax output.
/// `weights[l]` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Parameter gradients, laid out like [`MlpModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flat view in the same order as [`MlpModel::param`].
    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if i < w.len() {
                return w.as_slice().expect("standard layout")[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range")
    }
}

struct Trace {
    /// Layer inputs, `activations[0]` is the batch itself.
    activations: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl MlpModel {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer dimensions {layer_dims:?}")));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims.windows(2).map(|d| Array2::zeros((d[1], d[0]))).collect(),
            biases: layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect(),
        })
    }

    /// Normal weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut m = MlpModel::zeros(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut m.weights {
            let normal = Normal::new(0.0, 1.0 / (w.ncols() as f64).sqrt()).expect("positive std");
            w.mapv_inplace(|_| normal.sample(&mut rng));
        }
        Ok(m)
    }

    pub fn inputs(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn param_slot(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return &mut w.as_slice_mut().expect("standard layout")[i];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {index} out of range")
    }

    /// Flat parameter access: layer by layer, row-major weights then biases.
    pub fn param(&self, index: usize) -> f64 {
        let mut m = self.clone();
        *m.param_slot(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.param_slot(index) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn trace(&self, x: ArrayView2<f64>) -> Trace {
        let last = self.weights.len() - 1;
        let mut activations = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = activations[l].dot(&w.t()) + b;
            if l < last {
                activations.push(z.mapv(selu));
            }
            pre.push(z);
        }
        let probs = softmax_rows(pre[last].clone());
        Trace { activations, pre, probs }
    }

    /// Class probabilities for one row per sample.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return Err(dim_mismatch("input width", self.inputs(), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input"));
        }
        Ok(self.trace(x).probs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(row)?.row(0).to_vec())
    }

    /// Summed cross-entropy over the batch and its exact gradient.
    pub fn batch_gradients(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss_sum, _, grads) = self.batch_step(x, labels)?;
        Ok((loss_sum, grads))
    }

    fn batch_step(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, usize, Gradients)> {
        if x.ncols() != self.inputs() {
            return Err(dim_mismatch("input width", self.inputs(), x.ncols()));
        }
        if x.nrows() != labels.len() {
            return Err(dim_mismatch("labels", x.nrows(), labels.len()));
        }
        let classes = self.classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let trace = self.trace(x);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut delta = trace.probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            let row = trace.probs.row(i);
            loss_sum += -row[label].max(PROB_FLOOR).ln();
            if argmax(row) == label {
                correct += 1;
            }
            delta[[i, label]] -= 1.0;
        }
        let layers = self.weights.len();
        let mut gw = Vec::with_capacity(layers);
        let mut gb = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            gw.push(delta.t().dot(&trace.activations[l]));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let back = delta.dot(&self.weights[l]);
                delta = back * &trace.pre[l - 1].mapv(selu_derivative);
            }
        }
        gw.reverse();
        gb.reverse();
        Ok((loss_sum, correct, Gradients { weights: gw, biases: gb }))
    }

    /// Gradient of the loss of a single sample.
    pub fn backward(&self, x: &[f64], label: usize) -> Result<Gradients> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.batch_gradients(row, &[label])?.1)
    }

    /// Summed cross-entropy of a batch without gradients.
    pub fn batch_loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let probs = self.forward_batch(x)?;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[[i, l]].max(PROB_FLOOR).ln())
            .sum())
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
        let std = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-300 { s } else { 1.0 }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, mut x: Array2<f64>) -> Array2<f64> {
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Number of output classes; `None` uses the largest label plus one.
    pub classes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![128, 64],
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Network plus everything needed to apply it to raw feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub kind: FeatureKind,
    pub scaler: Standardizer,
    pub mlp: MlpModel,
}

fn check_features(features: &[FeatureVector], what: &'static str) -> Result<(FeatureKind, usize)> {
    let first = features.first().ok_or(Error::EmptyDataset(what))?;
    let dim = first.values.len();
    for f in features {
        if f.kind != first.kind {
            return Err(Error::KindMismatch {
                expected: first.kind.to_string(),
                got: f.kind.to_string(),
            });
        }
        if f.values.len() != dim {
            return Err(dim_mismatch("feature length", dim, f.values.len()));
        }
    }
    Ok((first.kind, dim))
}

pub fn feature_matrix(features: &[FeatureVector]) -> Array2<f64> {
    let dim = features.first().map_or(0, |f| f.values.len());
    Array2::from_shape_fn((features.len(), dim), |(i, j)| features[i].values[j])
}

fn labels_of(features: &[FeatureVector]) -> Vec<usize> {
    features.iter().map(|f| f.label as usize).collect()
}

/// Deterministically move a `frac` share of the samples into a validation set.
pub fn split_validation(features: &[FeatureVector], frac: f64, seed: u64) -> (Vec<FeatureVector>, Vec<FeatureVector>) {
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let n_val = ((features.len() as f64) * frac.clamp(0.0, 1.0)).round() as usize;
    let n_val = n_val.min(features.len().saturating_sub(1));
    let mut val_mask = vec![false; features.len()];
    for &i in &idx[..n_val] {
        val_mask[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (f, is_val) in features.iter().zip(val_mask) {
        if is_val { val.push(f.clone()) } else { train.push(f.clone()) }
    }
    (train, val)
}

/// Mini-batch SGD with momentum on the mean batch loss. With a non-empty
/// validation set, training stops after `patience` epochs without a
/// validation-loss improvement and the best parameters are returned.
pub fn train(
    train_set: &[FeatureVector],
    val_set: &[FeatureVector],
    config: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochStats>)> {
    let (kind, dim) = check_features(train_set, "training set")?;
    if !val_set.is_empty() {
        let (vk, vd) = check_features(val_set, "validation set")?;
        if vk != kind {
            return Err(Error::KindMismatch { expected: kind.to_string(), got: vk.to_string() });
        }
        if vd != dim {
            return Err(dim_mismatch("validation feature length", dim, vd));
        }
    }
    if config.batch_size == 0 || config.batch_size > train_set.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} must be in 1..={}",
            config.batch_size,
            train_set.len()
        )));
    }
    if !(config.learning_rate >= 0.0 && config.momentum >= 0.0) {
        return Err(Error::InvalidConfig("learning rate and momentum must be non-negative".into()));
    }
    let labels = labels_of(train_set);
    let classes = config
        .classes
        .unwrap_or_else(|| labels.iter().chain(&labels_of(val_set)).max().map_or(1, |m| m + 1));

    let raw = feature_matrix(train_set);
    let scaler = Standardizer::fit(raw.view());
    let x = scaler.apply(raw);
    let val_x = scaler.apply(feature_matrix(val_set));
    let val_labels = labels_of(val_set);

    let mut dims = vec![dim];
    dims.extend(&config.hidden);
    dims.push(classes);
    let mut mlp = MlpModel::init(&dims, config.seed)?;
    let mut velocity = MlpModel::zeros(&dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_0f_5eed));

    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, mlp.clone());
    let mut stale = 0;
    let mut batch_x = Array2::zeros((config.batch_size, dim));
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let bx = if chunk.len() == config.batch_size {
                &mut batch_x
            } else {
                &mut Array2::zeros((chunk.len(), dim))
            };
            for (r, &i) in chunk.iter().enumerate() {
                bx.row_mut(r).assign(&x.row(i));
            }
            let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (l, c, g) = mlp.batch_step(bx.view(), &bl)?;
            loss_sum += l;
            correct += c;
            let scale = config.learning_rate / chunk.len() as f64;
            for l in 0..mlp.weights.len() {
                velocity.weights[l].zip_mut_with(&g.weights[l], |v, g| *v = config.momentum * *v - scale * g);
                velocity.biases[l].zip_mut_with(&g.biases[l], |v, g| *v = config.momentum * *v - scale * g);
                mlp.weights[l] += &velocity.weights[l];
                mlp.biases[l] += &velocity.biases[l];
            }
        }
        if !mlp.is_finite() {
            return Err(Error::NonFinite("network parameters (learning rate too large?)"));
        }
        let n = x.nrows() as f64;
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let probs = mlp.forward_batch(val_x.view())?;
            let vl = val_labels
                .iter()
                .enumerate()
                .map(|(i, &l)| -probs[[i, l]].max(PROB_FLOOR).ln())
                .sum::<f64>()
                / val_set.len() as f64;
            let hits = val_labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| argmax(probs.row(*i)) == l)
                .count();
            (Some(vl), Some(hits as f64 / val_set.len() as f64))
        };
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
        if let Some(vl) = val_loss {
            if vl < best.0 {
                best = (vl, mlp.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    if !val_set.is_empty() {
        mlp = best.1;
    }
    Ok((TrainedModel { kind, scaler, mlp }, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u16>,
    /// Fraction of correct predictions against the labels carried by the features.
    pub accuracy: f64,
}

impl TrainedModel {
    pub fn predict(&self, features: &[FeatureVector]) -> Result<Prediction> {
        if let Some(f) = features.iter().find(|f| f.kind != self.kind) {
            return Err(Error::KindMismatch {
                expected: self.kind.to_string(),
                got: f.kind.to_string(),
            });
        }
        if features.is_empty() {
            return Ok(Prediction { labels: vec![], accuracy: 0.0 });
        }
        let x = self.scaler.apply(feature_matrix(features));
        let probs = self.mlp.forward_batch(x.view())?;
        let labels: Vec<u16> = probs.rows().into_iter().map(|r| argmax(r) as u16).collect();
        Ok(Prediction {
            accuracy: accuracy(&labels, features),
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainedModel::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            kind: self.kind,
            layer_dims: self.mlp.layer_dims.clone(),
            activation: Activation {
                hidden: "selu".into(),
                lambda: SELU_LAMBDA,
                alpha: SELU_ALPHA,
                output: "softmax".into(),
            },
            input_mean: self.scaler.mean.clone(),
            input_std: self.scaler.std.clone(),
            weights: self.mlp.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.mlp.biases.iter().map(|b| b.to_vec()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { what: "model file", offset: 0, msg };
        let f: ModelFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if f.format != MODEL_FORMAT {
            return Err(bad(format!("unknown format tag {:?}", f.format)));
        }
        if f.activation.hidden != "selu" || f.activation.output != "softmax" {
            return Err(bad("only selu hidden layers with softmax output are supported".into()));
        }
        let mut mlp = MlpModel::zeros(&f.layer_dims)?;
        if f.weights.len() != mlp.weights.len() || f.biases.len() != mlp.biases.len() {
            return Err(bad("layer count does not match layer_dims".into()));
        }
        for (l, (w, b)) in f.weights.into_iter().zip(f.biases).enumerate() {
            let shape = mlp.weights[l].dim();
            mlp.weights[l] = Array2::from_shape_vec(shape, w).map_err(|e| bad(format!("layer {l} weights: {e}")))?;
            if b.len() != mlp.biases[l].len() {
                return Err(bad(format!("layer {l} bias length {}", b.len())));
            }
            mlp.biases[l] = Array1::from(b);
        }
        if f.input_mean.len() != mlp.inputs() || f.input_std.len() != mlp.inputs() {
            return Err(bad("input normalization does not match the input width".into()));
        }
        Ok(TrainedModel {
            kind: f.kind,
            scaler: Standardizer { mean: f.input_mean, std: f.input_std },
            mlp,
        })
    }
}

const MODEL_FORMAT: &str = "evloc-mlp/1";

#[derive(Serialize, Deserialize)]
struct Activation {
    hidden: String,
    lambda: f64,
    alpha: f64,
    output: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    kind: FeatureKind,
    layer_dims: Vec<usize>,
    activation: Activation,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    /// Row-major `out x in` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub fn accuracy(predicted: &[u16], truth: &[FeatureVector]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| **p == t.label).count() as f64 / truth.len() as f64
}

/// Brute-force k-nearest-neighbour vote under Euclidean distance. Equal
/// distances prefer the earlier training sample, tied votes the smaller label.
pub fn knn_predict(train_set: &[FeatureVector], test_set: &[FeatureVector], k: usize) -> Result<Vec<u16>> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("KNN training set"));
    }
    if k == 0 || k > train_set.len() {
        return Err(Error::InvalidConfig(format!("k = {k} must be in 1..={}", train_set.len())));
    }
    let dim = train_set[0].values.len();
    if let Some(f) = train_set.iter().chain(test_set).find(|f| f.values.len() != dim) {
        return Err(dim_mismatch("feature length", dim, f.values.len()));
    }
    let classes = train_set.iter().map(|f| f.label as usize).max().unwrap_or(0) + 1;
    Ok(test_set
        .par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train_set
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let d2 = t.values.iter().zip(&q.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    (d2, i)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
            }
            let mut votes = vec![0usize; classes];
            for &(_, i) in &d[..k] {
                votes[train_set[i].label as usize] += 1;
            }
            let mut best = 0;
            for (l, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = l;
                }
            }
            best as u16
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fv(label: u16, values: Vec<f64>) -> FeatureVector {
        FeatureVector { kind: FeatureKind::EvsAmp, label, values }
    }

    #[test]
    fn selu_values() {
        assert_eq!(selu(0.0), 0.0);
        assert_eq!(selu(1.0), SELU_LAMBDA);
        assert!((selu(-50.0) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(&[5, 4, 3, 26]).unwrap();
        let p = m.forward(&[0.3, -1.0, 2.0, 0.0, 9.0]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 26.0).abs() < 1e-15));
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = MlpModel::zeros(&[2, 2]).unwrap();
        assert!(matches!(m.forward(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.0, 1.0], 1).unwrap().value, 0.0);
        let u = vec![1.0 / 26.0; 26];
        assert!((loss(&u, 3).unwrap().value - 26f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.5, 0.5], 0).unwrap().value - 2f64.ln()).abs() < 1e-12);
        let l = loss(&[1.0, 0.0], 1).unwrap();
        assert!(l.clamped);
        assert!((l.value - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let m = MlpModel::init(&[3, 5, 4], 2).unwrap();
        let x = [0.1, -0.7, 1.3];
        let single = m.backward(&x, 2).unwrap();
        let both = Array2::from_shape_vec((2, 3), [x, x].concat()).unwrap();
        let (_, double) = m.batch_gradients(both.view(), &[2, 2]).unwrap();
        for i in 0..m.param_count() {
            assert!((double.get(i) - 2.0 * single.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let m = MlpModel::init(&[4, 6, 3], 9).unwrap();
        let g = m.backward(&[0.0; 4], 1).unwrap();
        assert!(g.weights[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpModel::init(&[5, 7, 6, 4], 11).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g = m.backward(&x, 3).unwrap();
        let row = ArrayView2::from_shape((1, 5), &x).unwrap();
        let mut bad = 0;
        for i in 0..m.param_count() {
            let h = 1e-5;
            let mut p = m.clone();
            p.set_param(i, m.param(i) + h);
            let up = p.batch_loss(row, &[3]).unwrap();
            p.set_param(i, m.param(i) - h);
            let down = p.batch_loss(row, &[3]).unwrap();
            let fd = (up - down) / (2.0 * h);
            let a = g.get(i);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel >= 1e-4 && (a - fd).abs() > 1e-10 {
                bad += 1;
            }
        }
        assert!(bad * 100 <= m.param_count(), "{bad} of {}", m.param_count());
    }

    fn toy(n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u16;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                fv(label, vec![sign, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            hidden: vec![8, 8],
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 20,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let data = toy(200, 1);
        let (model, hist) = train(&data, &[], &toy_config()).unwrap();
        assert_eq!(hist.len(), 20);
        assert_eq!(model.predict(&data).unwrap().accuracy, 1.0);
        for w in hist.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss * 1.05, "{:?}", w);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(100, 2);
        let (val_train, val) = split_validation(&data, 0.1, 3);
        let a = train(&val_train, &val, &toy_config()).unwrap();
        let b = train(&val_train, &val, &toy_config()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = toy(64, 2);
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 3, ..toy_config() };
        let (model, _) = train(&data, &[], &cfg).unwrap();
        let init = MlpModel::init(&[3, 8, 8, 2], cfg.seed).unwrap();
        assert_eq!(model.mlp, init);
    }

    #[test]
    fn training_rejects_bad_input() {
        assert!(matches!(train(&[], &[], &toy_config()), Err(Error::EmptyDataset(_))));
        let mut data = toy(20, 0);
        data[3].values.push(1.0);
        assert!(train(&data, &[], &toy_config()).is_err());
    }

    #[test]
    fn uniform_model_predicts_class_zero() {
        let model = TrainedModel {
            kind: FeatureKind::EvsAmp,
            scaler: Standardizer::identity(3),
            mlp: MlpModel::zeros(&[3, 4, 5]).unwrap(),
        };
        let data = vec![fv(2, vec![1.0, 2.0, 3.0]), fv(0, vec![0.0, 0.0, 0.0])];
        let p = model.predict(&data).unwrap();
        assert_eq!(p.labels, vec![0, 0]);
        assert_eq!(p.accuracy, 0.5);
        let wrong = vec![FeatureVector { kind: FeatureKind::CsiAmp, ..data[0].clone() }];
        assert!(matches!(model.predict(&wrong), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let data = toy(64, 5);
        let (model, _) = train(&data, &[], &TrainConfig { max_epochs: 2, ..toy_config() }).unwrap();
        let back = TrainedModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.predict(&data).unwrap(), model.predict(&data).unwrap());
    }

    #[test]
    fn knn_examples() {
        let train_set = vec![fv(0, vec![0.0, 0.0]), fv(1, vec![1.0, 0.0]), fv(2, vec![0.0, 5.0]), fv(1, vec![1.0, 1.0])];
        assert_eq!(knn_predict(&train_set, &[fv(9, vec![0.0, 5.0])], 1).unwrap(), vec![2]);
        let balanced = vec![fv(0, vec![0.0]), fv(1, vec![1.0]), fv(2, vec![2.0])];
        assert_eq!(knn_predict(&balanced, &[fv(0, vec![1.9])], 3).unwrap(), vec![0]);
        assert!(knn_predict(&[], &balanced, 1).is_err());
        assert!(knn_predict(&balanced, &balanced, 4).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pt = |l: u16| fv(l, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let train_set: Vec<_> = (0..300).map(|i| pt((i % 5) as u16)).collect();
        let queries: Vec<_> = (0..100).map(|_| pt(0)).collect();
        let k = 7;
        let got = knn_predict(&train_set, &queries, k).unwrap();
        for (q, g) in queries.iter().zip(got) {
            let mut all: Vec<(f64, usize)> = train_set
                .iter()
                .enumerate()
                .map(|(i, t)| (t.values.iter().zip(&q.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut votes = [0; 5];
            for &(_, i) in &all[..k] {
                votes[train_set[i].label as usize] += 1;
            }
            let max = *votes.iter().max().unwrap();
            let want = votes.iter().position(|&v| v == max).unwrap() as u16;
            assert_eq!(g, want);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let z = Array2::from_shape_vec((1, 4), vec![0.5, -2.0, 3.0, 1.0]).unwrap();
        let a = softmax_rows(z.clone());
        let b = softmax_rows(z + 1234.5);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_guessing_is_near_chance() {
        // Untrained net on 26 balanced classes with random inputs: accuracy
        // within 3 binomial standard deviations of 1/26.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 2600;
        let data: Vec<_> = (0..n)
            .map(|i| fv((i % 26) as u16, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let model = TrainedModel {
            kind: FeatureKind::EvsAmp,
            scaler: Standardizer::identity(8),
            mlp: MlpModel::init(&[8, 16, 26], 5).unwrap(),
        };
        let acc = model.predict(&data).unwrap().accuracy;
        let p = 1.0 / 26.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sd, "{acc}");
    }

    #[test]
    fn argmax_prefers_smaller_index_on_ties() {
        let v = Array1::from(vec![0.2, 0.4, 0.4]);
        assert_eq!(argmax(v.view()), 1);
    }
}
