use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attack, AttackConfig, Direction};
use crate::data::BubbleImage;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::seed::derive_seed;

/// Budgets in units of 1/255.
pub const DEFAULT_EPSILONS_255: [u32; 6] = [4, 8, 16, 32, 64, 255];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRow {
    pub direction: Direction,
    pub epsilon: f64,
    /// Attacked samples.
    pub n: usize,
    pub robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustTable {
    pub model: String,
    pub dataset: String,
    pub loss: String,
    pub method: String,
    pub rows: Vec<RobustRow>,
}

impl RobustTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "dataset", "loss", "direction", "epsilon", "robust_acc"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                self.model.as_str(),
                self.dataset.as_str(),
                self.loss.as_str(),
                r.direction.name(),
                &r.epsilon.to_string(),
                &r.robust_acc.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// One line per direction with the budgets as columns.
    pub fn to_text(&self) -> String {
        let mut eps: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !eps.contains(&r.epsilon) {
                eps.push(r.epsilon);
            }
        }
        let mut out = format!("{:<12} {:<10} {:<5} {:<6}", "model", "dataset", "loss", "dir");
        for e in &eps {
            out += &format!(" {:>7}", format!("{:.0}/255", e * 255.0));
        }
        out.push('\n');
        for dir in [Direction::Over, Direction::Under] {
            let rows: Vec<&RobustRow> = self.rows.iter().filter(|r| r.direction == dir).collect();
            if rows.is_empty() {
                continue;
            }
            out += &format!(
                "{:<12} {:<10} {:<5} {:<6}",
                self.model,
                self.dataset,
                self.loss,
                dir.name()
            );
            for r in rows {
                out += &format!(" {:>7.3}", r.robust_acc);
            }
            out.push('\n');
        }
        out
    }
}

/// Samples the model already classifies correctly.
pub fn correctly_classified<'a, M: Classifier + ?Sized>(
    model: &M,
    samples: &'a [BubbleImage],
    mode: crate::precision::PrecisionMode,
) -> Result<Vec<&'a BubbleImage>> {
    let keep: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| Ok(model.predict(s.pixels(), mode)? == s.label))
        .collect();
    Ok(samples
        .iter()
        .zip(keep?)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}

/// Fraction of correctly classified samples that survive the attack, per
/// budget and direction. Each sample uses its own seed derived from
/// `config.seed` and its position, so results do not depend on threading.
pub fn robust_accuracy<M: Classifier + ?Sized>(
    model: &M,
    samples: &[BubbleImage],
    config: &AttackConfig,
    epsilons: &[f64],
    dataset: &str,
) -> Result<RobustTable> {
    config.validate()?;
    let pool = correctly_classified(model, samples, config.precision)?;
    if pool.is_empty() {
        return Err(Error::Validation(
            "no correctly classified samples to attack".into(),
        ));
    }
    let directions = match config.direction {
        Some(d) => vec![d],
        None => vec![Direction::Over, Direction::Under],
    };
    let mut rows = Vec::new();
    for dir in directions {
        let subset: Vec<&BubbleImage> = pool
            .iter()
            .copied()
            .filter(|s| s.label == dir.source_label())
            .collect();
        if subset.is_empty() {
            continue;
        }
        for &epsilon in epsilons {
            let survived: Result<Vec<bool>> = subset
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let cfg = AttackConfig {
                        epsilon,
                        seed: derive_seed(config.seed, &[i as u64]),
                        ..config.clone()
                    };
                    Ok(!attack(model, s.pixels(), s.label, &cfg)?.success)
                })
                .collect();
            let survived = survived?.iter().filter(|&&s| s).count();
            rows.push(RobustRow {
                direction: dir,
                epsilon,
                n: subset.len(),
                robust_acc: survived as f64 / subset.len() as f64,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation(
            "no correctly classified samples in the requested direction".into(),
        ));
    }
    Ok(RobustTable {
        model: model.architecture().tag().to_string(),
        dataset: dataset.to_string(),
        loss: config.loss.name().to_string(),
        method: config.method.name().to_string(),
        rows,
    })
}
