use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BubbleImage, DatasetSpec, Label};
use crate::error::{Error, Result};
use crate::models::{Classifier, SimpleCnn, FEATURES};
use crate::precision::PrecisionMode;
use crate::training::{optim::Adam, train_classifier, TrainConfig};

/// Recipe for a SimpleCNN whose softmax saturates under binary32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationConfig {
    /// Bubbles (half filled) used for training and head fitting.
    pub images: usize,
    pub epochs: usize,
    /// Target interval for the logit gap `z_label - z_other`.
    pub band: [f64; 2],
    pub head_steps: usize,
    pub head_learning_rate: f64,
    pub seed: u64,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            images: 400,
            epochs: 1,
            band: [115.0, 160.0],
            head_steps: 2000,
            head_learning_rate: 0.01,
            seed: 7,
        }
    }
}

/// Refits the 384 -> 2 head so every sample's logit gap lands in `band`,
/// with antisymmetric logits `z = (d/2, -d/2)` for a Mark. The convolutional
/// trunk is left untouched.
///
/// Gaps above 104 push the smaller binary32 softmax output below the
/// smallest subnormal, so the confidence rounds to exactly `[1, 0]`; the
/// upper end keeps `e^(d/2)` finite in binary32.
pub fn saturate_head(
    model: &SimpleCnn,
    images: &[BubbleImage],
    band: [f64; 2],
    steps: usize,
    learning_rate: f64,
) -> Result<SimpleCnn> {
    let [lo, hi] = band;
    if !(0.0 < lo && lo < hi) {
        return Err(Error::Validation(format!("band [{lo}, {hi}] is empty")));
    }
    if images.is_empty() {
        return Err(Error::Validation("no images to fit the head on".into()));
    }
    let feats: Result<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|img| model.feature_vector(img.pixels(), PrecisionMode::FULL64))
        .collect();
    let feats = feats?;
    let signs: Vec<f64> = images
        .iter()
        .map(|img| if img.label == Label::Mark { 1.0 } else { -1.0 })
        .collect();

    // theta = [v; c] with z0 - z1 = v.h + c
    let w = model.params().slice(6);
    let b = model.params().slice(7);
    let mut theta: Vec<f64> = (0..FEATURES).map(|i| w[i] - w[FEATURES + i]).collect();
    theta.push(b[0] - b[1]);
    let gaps = |theta: &[f64]| -> Vec<f64> {
        feats
            .iter()
            .zip(&signs)
            .map(|(h, s)| {
                let z: f64 = theta[..FEATURES].iter().zip(h).map(|(a, b)| a * b).sum();
                s * (z + theta[FEATURES])
            })
            .collect()
    };
    // warm start: scale so the median gap sits mid-band
    let mut g = gaps(&theta);
    g.sort_by(f64::total_cmp);
    let median = g[g.len() / 2];
    if median > 0.0 {
        let k = 0.5 * (lo + hi) / median;
        theta.iter_mut().for_each(|t| *t *= k);
    }

    let mut opt = Adam::new(learning_rate, theta.len());
    let n = images.len() as f64;
    for _ in 0..steps {
        let d = gaps(&theta);
        if d.iter().all(|&v| v >= lo && v <= hi) {
            break;
        }
        let mut grad = vec![0.0; theta.len()];
        for ((h, s), &dv) in feats.iter().zip(&signs).zip(&d) {
            let dl = if dv < lo {
                -1.0
            } else if dv > hi {
                1.0
            } else {
                continue;
            };
            let coef = dl * s / n;
            for (g, x) in grad[..FEATURES].iter_mut().zip(h) {
                *g += coef * x;
            }
            grad[FEATURES] += coef;
        }
        opt.step(&mut theta, &grad);
    }

    let mut out = model.clone();
    let p = out.params_mut();
    let w = p.slice_mut(6);
    for i in 0..FEATURES {
        w[i] = theta[i] / 2.0;
        w[FEATURES + i] = -theta[i] / 2.0;
    }
    let c = theta[FEATURES];
    p.slice_mut(7).copy_from_slice(&[c / 2.0, -c / 2.0]);
    Ok(out)
}

/// Trains a SimpleCNN on easy bubbles and saturates its head. Returns the
/// model and the images it was fitted on.
pub fn saturated_cnn(cfg: &SaturationConfig) -> Result<(SimpleCnn, Vec<BubbleImage>)> {
    use rand::SeedableRng;
    let data = DatasetSpec {
        bubbles: cfg.images,
        swatches: 0,
        ..DatasetSpec::default()
    }
    .generate(cfg.seed)?;
    let mut model = SimpleCnn::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
    train_classifier(
        &mut model,
        &data,
        &TrainConfig {
            epochs: cfg.epochs,
            batch_size: 32,
            validation_fraction: 0.0,
            seed: cfg.seed,
            ..TrainConfig::default()
        },
    )?;
    let model = saturate_head(&model, &data, cfg.band, cfg.head_steps, cfg.head_learning_rate)?;
    Ok((model, data))
}
