//! Gradient diagnostics: zero-gradient probing, the last-layer oracle,
//! softmax absorption checks, masking flags on robustness tables, and
//! precision sweeps.

mod masking;
mod oracle;
mod saturate;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{correctly_classified, pgd, AttackConfig, AttackMethod};
use crate::data::{BubbleImage, Label};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::precision::PrecisionMode;

pub use masking::{masking_flags, masking_report, MaskingFinding};
pub use oracle::{absorption_check, last_layer_oracle, AbsorptionReport};
pub use saturate::{saturate_head, saturated_cnn, SaturationConfig};

/// Zero-gradient statistics for the samples of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassZeroGrad {
    pub label: Label,
    pub samples: usize,
    /// Samples whose very first gradient is exactly zero.
    pub first_step_zero: usize,
    /// Mean number of zero-gradient steps per sample over the probe.
    pub mean_zero_steps: f64,
    /// Confidence at the clean input, averaged over samples.
    pub mean_confidence_first: [f64; 2],
    /// Confidence averaged over every probed step of every sample.
    pub mean_confidence_steps: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroGradReport {
    pub model: String,
    pub precision: String,
    pub steps: usize,
    pub classes: Vec<ClassZeroGrad>,
}

impl ZeroGradReport {
    pub fn class(&self, label: Label) -> Option<&ClassZeroGrad> {
        self.classes.iter().find(|c| c.label == label)
    }

    /// Zero-gradient steps summed over all classes.
    pub fn total_zero_steps(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| c.mean_zero_steps * c.samples as f64)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        format_reports(std::slice::from_ref(self))
    }
}

/// Aligned text table with one row per (report, class).
pub fn format_reports(reports: &[ZeroGradReport]) -> String {
    let mut out = format!(
        "{:<12} {:<9} {:<8} {:>7} {:>10} {:>10}  {:<22} {:<22}\n",
        "model", "precision", "class", "samples", "zero@1", "avg-zero", "conf(first)", "conf(all steps)"
    );
    for r in reports {
        for c in &r.classes {
            out += &format!(
                "{:<12} {:<9} {:<8} {:>7} {:>10} {:>10.2}  {:<22} {:<22}\n",
                r.model,
                r.precision,
                c.label.name(),
                c.samples,
                c.first_step_zero,
                c.mean_zero_steps,
                pair(c.mean_confidence_first),
                pair(c.mean_confidence_steps),
            );
        }
    }
    out
}

fn pair(p: [f64; 2]) -> String {
    format!("[{:.4}, {:.4}]", p[0], p[1])
}

/// Runs `config.steps` PGD steps (never stopping early) on every correctly
/// classified sample and records where `max |dL/dx|` is exactly zero.
pub fn zero_grad_probe<M: Classifier + ?Sized>(
    model: &M,
    samples: &[BubbleImage],
    config: &AttackConfig,
) -> Result<ZeroGradReport> {
    let cfg = AttackConfig {
        method: AttackMethod::Pgd,
        stop_on_success: false,
        ..config.clone()
    };
    cfg.validate()?;
    let pool = correctly_classified(model, samples, cfg.precision)?;
    let traces: Result<Vec<(Label, Vec<crate::attacks::StepTrace>)>> = pool
        .par_iter()
        .map(|s| {
            let r = pgd(model, s.pixels(), s.label, &cfg)?;
            let mut t = r.trace;
            t.truncate(cfg.steps);
            Ok((s.label, t))
        })
        .collect();
    let traces = traces?;
    let mut classes = Vec::new();
    for label in [Label::Mark, Label::NonMark] {
        let mine: Vec<_> = traces.iter().filter(|(l, _)| *l == label).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let mut first_zero = 0;
        let mut zero_steps = 0usize;
        let mut conf_first = [0.0; 2];
        let mut conf_steps = [0.0; 2];
        let mut step_count = 0usize;
        for (_, t) in &mine {
            first_zero += usize::from(t[0].max_abs_grad == 0.0);
            zero_steps += t.iter().filter(|s| s.max_abs_grad == 0.0).count();
            for k in 0..2 {
                conf_first[k] += t[0].confidence[k];
                conf_steps[k] += t.iter().map(|s| s.confidence[k]).sum::<f64>();
            }
            step_count += t.len();
        }
        classes.push(ClassZeroGrad {
            label,
            samples: mine.len(),
            first_step_zero: first_zero,
            mean_zero_steps: zero_steps as f64 / n,
            mean_confidence_first: conf_first.map(|c| c / n),
            mean_confidence_steps: conf_steps.map(|c| c / step_count as f64),
        });
    }
    Ok(ZeroGradReport {
        model: model.architecture().tag().to_string(),
        precision: cfg.precision.label().to_string(),
        steps: cfg.steps,
        classes,
    })
}

/// The same probe under each precision mode, side by side.
pub fn precision_sweep<M: Classifier + ?Sized>(
    model: &M,
    samples: &[BubbleImage],
    config: &AttackConfig,
    modes: &[PrecisionMode],
) -> Result<Vec<ZeroGradReport>> {
    if modes.is_empty() {
        return Err(Error::Validation("precision sweep needs at least one mode".into()));
    }
    modes
        .iter()
        .map(|&precision| {
            zero_grad_probe(
                model,
                samples,
                &AttackConfig {
                    precision,
                    ..config.clone()
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests;
