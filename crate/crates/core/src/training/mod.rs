//! Optimizers and training loops.

pub(crate) mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{balanced_batches, select, train_val_split, BubbleImage, Label};
use crate::error::{Error, Result};
use crate::models::{image_leaf, Classifier, Denoiser, LinearSvm};
use crate::precision::PrecisionMode;
use crate::seed::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use optim::{Adam, OptimizerState, SgdMomentum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Hinge,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Overrides the architecture's dropout rate when set.
    pub dropout_rate: Option<f64>,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub momentum: f64,
    /// Share of each class held out for validation; 0 disables it.
    pub validation_fraction: f64,
    pub precision: PrecisionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            dropout_rate: None,
            epochs: 10,
            weight_decay: 0.0,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::CrossEntropy,
            momentum: 0.9,
            validation_fraction: 0.2,
            precision: PrecisionMode::FULL64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// SimpleCNN recipe for the grayscale bubble data.
    pub fn simple_cnn_gray_b() -> Self {
        Self {
            learning_rate: 0.01,
            dropout_rate: Some(0.9),
            epochs: 20,
            weight_decay: 0.0,
            batch_size: 512,
            ..Self::default()
        }
    }

    /// Full-batch hinge training for the linear SVM.
    pub fn svm() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            weight_decay: 1e-8,
            loss: LossKind::Hinge,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            ..Self::default()
        }
    }

    pub fn denoiser() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            loss: LossKind::Mse,
            validation_fraction: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::Validation(
                "weight decay must be >= 0 and momentum in [0, 1)".into(),
            ));
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Validation(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Validation(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    /// NaN when no validation split is used.
    pub val_acc: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
}

impl TrainReport {
    /// `epoch,train_acc,val_acc,loss`; NaN fields are left empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        let mut out = String::from("epoch,train_acc,val_acc,loss\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.epoch,
                cell(m.train_acc),
                cell(m.val_acc),
                cell(m.loss)
            ));
        }
        out
    }
}

/// Samples per deterministic partial sum; the reduction tree does not
/// depend on the thread count.
const CHUNK: usize = 8;

fn split_for_training(
    dataset: &[BubbleImage],
    config: &TrainConfig,
) -> Result<(Vec<BubbleImage>, Vec<BubbleImage>)> {
    if config.validation_fraction == 0.0 {
        return Ok((dataset.to_vec(), Vec::new()));
    }
    let (train, val) = train_val_split(dataset, 1.0 - config.validation_fraction, config.seed)?;
    Ok((select(dataset, &train), select(dataset, &val)))
}

fn accuracy_or_nan<M: Classifier + ?Sized>(model: &M, images: &[BubbleImage]) -> Result<f64> {
    if images.is_empty() {
        Ok(f64::NAN)
    } else {
        model.accuracy(images, PrecisionMode::FULL64)
    }
}

fn check_classes(dataset: &[BubbleImage]) -> Result<()> {
    let marks = dataset.iter().filter(|i| i.label == Label::Mark).count();
    if marks == 0 || marks == dataset.len() {
        return Err(Error::Validation(
            "training needs both Mark and NonMark samples".into(),
        ));
    }
    Ok(())
}

/// Loss and parameter gradient of one sample under softmax cross-entropy.
fn sample_gradient<M: Classifier + ?Sized>(
    model: &M,
    image: &BubbleImage,
    mode: PrecisionMode,
    dropout_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new(mode);
    let x = image_leaf(&mut tape, image.pixels(), false)?;
    let params = model.params().bind(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let z = model.forward(&mut tape, x, &params, Some(&mut rng))?;
    let y = tape.softmax_stable(z)?;
    let loss = tape.cross_entropy(y, &image.label.onehot())?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], model.params().gather(&grads, &params)))
}

/// Sums per-sample (loss, gradient) pairs in a fixed order.
fn batch_gradient<F>(n: usize, dim: usize, per_sample: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize) -> Result<(f64, Vec<f64>)> + Sync,
{
    let partials: Result<Vec<(f64, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; dim];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let (l, g) = per_sample(i)?;
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in partials? {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Minibatch cross-entropy training on class-balanced batches.
///
/// Returns one metrics row per epoch. Parameters are updated in place.
pub fn train_classifier<M: Classifier + ?Sized>(
    model: &mut M,
    dataset: &[BubbleImage],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    check_classes(dataset)?;
    if let Some(rate) = config.dropout_rate {
        model.set_dropout(rate)?;
    }
    let (train, val) = split_for_training(dataset, config)?;
    let dim = model.params().len();
    let mut opt = OptimizerState::new(config, dim);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let batches = balanced_batches(&train, config.batch_size, derive_seed(config.seed, &[epoch as u64]))?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let m: &M = model;
            let (loss, mut grad) = batch_gradient(batch.len(), dim, |i| {
                let seed = derive_seed(config.seed, &[epoch as u64, b as u64, i as u64]);
                sample_gradient(m, &train[batch[i]], config.precision, seed)
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let n = batch.len() as f64;
            let params = model.params().data();
            for (g, &p) in grad.iter_mut().zip(params) {
                *g = *g / n + config.weight_decay * p;
            }
            opt.step(model.params_mut().data_mut(), &grad);
            epoch_loss += loss;
            seen += batch.len();
        }
        report.metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_acc: accuracy_or_nan(model, &train)?,
            val_acc: accuracy_or_nan(model, &val)?,
            loss: epoch_loss / seen.max(1) as f64,
        });
    }
    Ok(report)
}

/// Class-balanced hinge objective of the SVM with L2 penalty
/// `weight_decay / 2 * |w|^2`.
///
/// The margin is taken on `f = 2p - 1` (targets +1 NonMark, -1 Mark), so
/// the hinge boundary coincides with the wrapper's decision `p = 1/2`.
pub fn svm_objective(model: &LinearSvm, images: &[BubbleImage], weight_decay: f64) -> f64 {
    let (weights, n) = class_weights(images);
    let w = model.weights();
    let b = model.bias();
    let hinge: f64 = images
        .iter()
        .map(|img| {
            let (t, c) = target_and_weight(img.label, weights);
            let p = dot(w, img.pixels()) + b;
            c * (1.0 - t * (2.0 * p - 1.0)).max(0.0)
        })
        .sum();
    hinge / n + 0.5 * weight_decay * dot(w, w)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn class_weights(images: &[BubbleImage]) -> ([f64; 2], f64) {
    let n = images.len() as f64;
    let marks = images.iter().filter(|i| i.label == Label::Mark).count() as f64;
    ([n / (2.0 * marks), n / (2.0 * (n - marks))], n)
}

fn target_and_weight(label: Label, weights: [f64; 2]) -> (f64, f64) {
    match label {
        Label::Mark => (-1.0, weights[0]),
        Label::NonMark => (1.0, weights[1]),
    }
}

/// Full-batch subgradient descent on [`svm_objective`]; `epochs` is the
/// number of steps. Starts from the model's current parameters.
///
/// Internally the score is parametrized as `w.(x - mean) + c`, which keeps
/// the intercept from crawling when every pixel is positive; the stored
/// model is always the equivalent `w.x + b`.
pub fn train_svm(
    model: &mut LinearSvm,
    dataset: &[BubbleImage],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    check_classes(dataset)?;
    let (train, val) = split_for_training(dataset, config)?;
    check_classes(&train)?;
    let (weights, n) = class_weights(&train);
    let dim = model.params().len();
    let pixels = dim - 1;
    let mut mean = vec![0.0; pixels];
    for img in &train {
        for (m, &x) in mean.iter_mut().zip(img.pixels()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut theta = model.params().data().to_vec();
    theta[pixels] += dot(&theta[..pixels], &mean);
    let mut opt = OptimizerState::new(config, dim);
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let (w, c) = (&theta[..pixels], theta[pixels]);
        let (_, mut grad) = batch_gradient(train.len(), dim, |i| {
            let img = &train[i];
            let (t, cw) = target_and_weight(img.label, weights);
            let mut g = vec![0.0; dim];
            let centered: Vec<f64> = img.pixels().iter().zip(&mean).map(|(x, m)| x - m).collect();
            let p = dot(w, &centered) + c;
            if 1.0 - t * (2.0 * p - 1.0) > 0.0 {
                let s = -2.0 * t * cw;
                for (gi, &x) in g.iter_mut().zip(&centered) {
                    *gi = s * x;
                }
                g[pixels] = s;
            }
            Ok((0.0, g))
        })?;
        for (gi, &wi) in grad.iter_mut().zip(w) {
            *gi = *gi / n + config.weight_decay * wi;
        }
        grad[pixels] /= n;
        opt.step(&mut theta, &grad);

        let bias = theta[pixels] - dot(&theta[..pixels], &mean);
        let data = model.params_mut().data_mut();
        data[..pixels].copy_from_slice(&theta[..pixels]);
        data[pixels] = bias;
        let objective = svm_objective(model, &train, config.weight_decay);
        if !objective.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: objective,
            });
        }
        report.metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_acc: svm_accuracy(model, &train),
            val_acc: svm_accuracy(model, &val),
            loss: objective,
        });
    }
    Ok(report)
}

/// Full64 accuracy from the raw score, without building tapes.
fn svm_accuracy(model: &LinearSvm, images: &[BubbleImage]) -> f64 {
    if images.is_empty() {
        return f64::NAN;
    }
    let correct = images
        .iter()
        .filter(|img| {
            let p = dot(model.weights(), img.pixels()) + model.bias();
            let pred = crate::models::argmax_label([1.0 - p, p]);
            pred == img.label
        })
        .count();
    correct as f64 / images.len() as f64
}

/// One (degraded input, clean target) training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisePair {
    pub input: BubbleImage,
    pub target: BubbleImage,
}

/// Minibatch MSE training of the denoiser over shuffled pairs.
pub fn train_denoiser(
    model: &mut Denoiser,
    pairs: &[DenoisePair],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("no denoiser training pairs".into()));
    }
    let dim = model.params().len();
    let mut opt = OptimizerState::new(config, dim);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let m: &Denoiser = model;
            let (loss, mut grad) = batch_gradient(batch.len(), dim, |i| {
                let pair = &pairs[batch[i]];
                let mut tape = Tape::new(config.precision);
                let x = image_leaf(&mut tape, pair.input.pixels(), false)?;
                let params = m.params().bind(&mut tape, true);
                let y = m.forward(&mut tape, x, &params)?;
                let target = Tensor::new(tape.value(y).shape(), pair.target.pixels().to_vec())?;
                let loss = tape.mse(y, &target)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], m.params().gather(&grads, &params)))
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let n = batch.len() as f64;
            let params = model.params().data();
            for (g, &p) in grad.iter_mut().zip(params) {
                *g = *g / n + config.weight_decay * p;
            }
            opt.step(model.params_mut().data_mut(), &grad);
            epoch_loss += loss;
        }
        report.metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_acc: f64::NAN,
            val_acc: f64::NAN,
            loss: epoch_loss / pairs.len() as f64,
        });
    }
    Ok(report)
}

/// Mean per-pixel squared error of the clipped, quantized denoiser output.
pub fn denoiser_mse(model: &Denoiser, pairs: &[DenoisePair]) -> Result<f64> {
    let errs: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|p| {
            let out = model.denoise(&p.input, PrecisionMode::FULL64)?;
            Ok(out
                .pixels()
                .iter()
                .zip(p.target.pixels())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / out.pixels().len() as f64)
        })
        .collect();
    let errs = errs?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy restricted to [Mark, NonMark] samples (NaN if absent).
    pub per_class_accuracy: [f64; 2],
    /// `confusion[truth][predicted]`, class 0 = Mark.
    pub confusion: [[usize; 2]; 2],
}

/// Accuracy and confusion counts; with a denoiser the inputs pass through
/// it before classification.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    dataset: &[BubbleImage],
    denoiser: Option<&Denoiser>,
    mode: PrecisionMode,
) -> Result<Evaluation> {
    let preds: Result<Vec<(usize, usize)>> = dataset
        .par_iter()
        .map(|img| {
            let pred = match denoiser {
                Some(d) => model.predict(d.denoise(img, mode)?.pixels(), mode)?,
                None => model.predict(img.pixels(), mode)?,
            };
            Ok((img.label.index(), pred.index()))
        })
        .collect();
    let mut confusion = [[0usize; 2]; 2];
    for (t, p) in preds? {
        confusion[t][p] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct = confusion[0][0] + confusion[1][1];
    let class_acc = |c: usize| {
        let n = confusion[c][0] + confusion[c][1];
        if n == 0 {
            f64::NAN
        } else {
            confusion[c][c] as f64 / n as f64
        }
    };
    Ok(Evaluation {
        accuracy: if total == 0 {
            f64::NAN
        } else {
            correct as f64 / total as f64
        },
        per_class_accuracy: [class_acc(0), class_acc(1)],
        confusion,
    })
}
