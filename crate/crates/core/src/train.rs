//! SGD training loop and evaluation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, ChannelMode, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamKind;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::tensor::{Scalar, Tensor};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub precision: Precision,
    pub resolution: usize,
    pub channel_mode: ChannelMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            precision: Precision::F32,
            resolution: 64,
            channel_mode: ChannelMode::Gray1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be finite and ≥ 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be finite and ≥ 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.resolution < crate::data::MIN_CHIP_SIZE {
            return fail(format!("resolution {} is below 32", self.resolution));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Sample-weighted mean loss per epoch.
    pub loss: Vec<f64>,
    /// Fraction of training samples classified correctly during the epoch.
    pub train_accuracy: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_accuracy\n");
        for (i, (l, a)) in self.loss.iter().zip(&self.train_accuracy).enumerate() {
            out.push_str(&format!("{},{l:.9e},{a:.6}\n", i + 1));
        }
        out
    }
}

/// Preprocessed inputs kept in memory for the whole run.
pub struct PreparedSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> PreparedSet<T> {
    pub fn new(samples: &[Sample], resolution: usize, mode: ChannelMode) -> Result<Self> {
        let inputs = samples
            .iter()
            .map(|s| preprocess(s, resolution, mode))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = inputs.iter().position(|t| !t.is_finite()) {
            return Err(Error::Dataset(format!(
                "{} has non-finite pixels",
                samples[bad].source_id
            )));
        }
        Ok(PreparedSet {
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.inputs[indices[0]].dims().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.inputs[indices[0]].numel());
        for &i in indices {
            data.extend_from_slice(self.inputs[i].data());
        }
        let dims = [indices.len(), per[0], per[1], per[2]];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(&dims, data)?, labels))
    }
}

/// Split `0..n` into batches. A trailing batch of one is folded into the
/// previous batch because batch norm cannot normalize a single value.
fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(n)))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, end) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = end;
    }
    out
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Train in place with SGD + momentum. Weight decay is decoupled and only
/// applied to convolution and dense weights.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    check_labels(&samples.iter().map(|s| s.label).collect::<Vec<_>>(), model.num_classes())?;
    let data = PreparedSet::new(samples, config.resolution, config.channel_mode)?;
    train_prepared(model, &data, config)
}

pub fn train_prepared<T: Scalar>(
    model: &mut Model<T>,
    data: &PreparedSet<T>,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.len() < 2 {
        return Err(Error::Dataset(
            "training needs at least 2 samples for batch statistics".into(),
        ));
    }
    if config.batch_size == 1 {
        return Err(Error::Config(
            "batch size 1 cannot be used for training: batch norm needs two values".into(),
        ));
    }
    check_labels(&data.labels, model.num_classes())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let bounds = batch_bounds(data.len(), config.batch_size);
    let total_steps = bounds.len() * config.epochs;
    let mut sgd = Sgd::new(model, config);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, &(start, end)) in bounds.iter().enumerate() {
            let (x, labels) = data.batch(&order[start..end])?;
            model.zero_grad();
            let diverged = || Error::Diverged {
                epoch: epoch + 1,
                batch: b + 1,
            };
            // non-finite activations only arise from blown-up weights here,
            // since inputs were checked when the set was prepared
            let logits = match model.forward(&x, Mode::Train) {
                Err(Error::NonFinite { .. }) => return Err(diverged()),
                other => other?,
            };
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(diverged());
            }
            loss_sum += loss * labels.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            model.backward(&grad)?;
            sgd.step(model, config.lr_at(step, total_steps));
            step += 1;
        }
        history.loss.push(loss_sum / data.len() as f64);
        history.train_accuracy.push(correct as f64 / data.len() as f64);
    }
    Ok(history)
}

/// SGD with heavy-ball momentum and decoupled weight decay. Holds one
/// velocity buffer per trainable tensor, in [`Model::params`] order.
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
    momentum: f64,
    weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &mut Model<T>, config: &TrainConfig) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| {
                if p.kind.trainable() {
                    vec![T::zero(); p.tensor.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Sgd {
            velocity,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        }
    }

    /// `w ← w − lr·wd·w` (weights only), `v ← μv + g`, `w ← w − lr·v`.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        let lr_t = T::lit(lr);
        let mu = T::lit(self.momentum);
        let decay = T::lit(lr * self.weight_decay);
        for (p, v) in model.params().into_iter().zip(self.velocity.iter_mut()) {
            if !p.kind.trainable() {
                continue;
            }
            let apply_decay = p.kind == ParamKind::Weight && self.weight_decay > 0.0;
            let (w, g) = p.tensor.data_and_grad_mut();
            for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                if apply_decay {
                    *w = *w - decay * *w;
                }
                *v = mu * *v + g;
                *w = *w - lr_t * *v;
            }
        }
    }
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_accuracy: Vec<f64>,
    /// Unweighted mean over classes that have at least one sample.
    pub average_accuracy: f64,
}

impl Metrics {
    pub fn from_predictions(
        class_names: Vec<String>,
        labels: &[usize],
        predictions: &[usize],
    ) -> Result<Self> {
        let k = class_names.len();
        if labels.len() != predictions.len() {
            return Err(Error::Config(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        check_labels(labels, k)?;
        check_labels(predictions, k)?;
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        let per_class_accuracy: Vec<f64> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    f64::NAN
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        let present: Vec<f64> = per_class_accuracy.iter().copied().filter(|a| !a.is_nan()).collect();
        let average_accuracy = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Metrics {
            class_names,
            confusion,
            per_class_accuracy,
            average_accuracy,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

impl fmt::Display for Metrics {
    /// One row per class plus an `Average` row, percentages with two
    /// decimals, followed by the confusion matrix.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.class_names.iter().map(|c| c.len()).max().unwrap_or(0).max(7);
        writeln!(f, "{:<width$}  Accuracy", "Class")?;
        for (name, acc) in self.class_names.iter().zip(&self.per_class_accuracy) {
            writeln!(f, "{name:<width$}  {:>7.2}%", acc * 100.0)?;
        }
        writeln!(f, "{:<width$}  {:>7.2}%", "Average", self.average_accuracy * 100.0)?;
        writeln!(f)?;
        writeln!(f, "confusion (rows = true, columns = predicted)")?;
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            writeln!(f, "{name:<width$} {}", cells.join(""))?;
        }
        Ok(())
    }
}

/// Eval-mode predictions, processed in fixed chunks.
pub fn predict<T: Scalar>(model: &mut Model<T>, data: &PreparedSet<T>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        let logits = model.forward(&x, Mode::Eval)?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    class_names: &[String],
    resolution: usize,
    mode: ChannelMode,
) -> Result<Metrics> {
    let data = PreparedSet::new(samples, resolution, mode)?;
    evaluate_prepared(model, &data, class_names)
}

pub fn evaluate_prepared<T: Scalar>(
    model: &mut Model<T>,
    data: &PreparedSet<T>,
    class_names: &[String],
) -> Result<Metrics> {
    if class_names.len() != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            class_names.len(),
            model.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let predictions = predict(model, data)?;
    Metrics::from_predictions(class_names.to_vec(), &data.labels, &predictions)
}
