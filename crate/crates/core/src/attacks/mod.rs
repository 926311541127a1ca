//! l-infinity white-box attacks on the two-logit classifiers.
//!
//! All attacks maximize a loss of the classifier's logits for the true
//! label (cross-entropy through the unstabilized softmax, or the binary
//! difference of logits) and keep every iterate inside the epsilon ball
//! around the input and inside [0, 1].

mod methods;
mod robust;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::models::{argmax_label, image_leaf, Classifier};
use crate::precision::PrecisionMode;
use crate::tape::{softmax_terms, Tape};
use crate::tensor::Tensor;

pub use methods::{apgd, apgd_checkpoints, attack, fgsm, mim, pgd};
pub use robust::{
    correctly_classified, robust_accuracy, RobustRow, RobustTable, DEFAULT_EPSILONS_255,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Mim,
    Apgd,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mim => "mim",
            AttackMethod::Apgd => "apgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    CrossEntropy,
    BinaryDlr,
}

impl AttackLoss {
    pub fn name(self) -> &'static str {
        match self {
            AttackLoss::CrossEntropy => "ce",
            AttackLoss::BinaryDlr => "dlr",
        }
    }
}

/// Over flips NonMark to Mark, Under flips Mark to NonMark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Over,
    Under,
}

impl Direction {
    /// The true label of samples attacked in this direction.
    pub fn source_label(self) -> Label {
        match self {
            Direction::Over => Label::NonMark,
            Direction::Under => Label::Mark,
        }
    }

    pub fn of_label(label: Label) -> Self {
        match label {
            Label::NonMark => Direction::Over,
            Label::Mark => Direction::Under,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Over => "over",
            Direction::Under => "under",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Decay of the accumulated gradient (MIM).
    pub momentum_decay: f64,
    /// Weight of the new direction in the APGD update.
    pub apgd_alpha: f64,
    /// Fraction of successful steps below which APGD halves its step.
    pub apgd_rho: f64,
    pub loss: AttackLoss,
    pub random_start: bool,
    /// Confidence margin of the margin loss. Kept for completeness; the
    /// binary reduction used here has no margin term.
    pub kappa: f64,
    /// Restrict batch evaluations to one direction; `None` runs both.
    pub direction: Option<Direction>,
    /// Return as soon as an iterate is misclassified.
    pub stop_on_success: bool,
    pub precision: PrecisionMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon: 0.031,
            steps: 20,
            step_size: 0.00155,
            momentum_decay: 1.0,
            apgd_alpha: 0.75,
            apgd_rho: 0.75,
            loss: AttackLoss::CrossEntropy,
            random_start: false,
            kappa: 0.0,
            direction: None,
            stop_on_success: true,
            precision: PrecisionMode::FULL64,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// The reference probe: 20 PGD steps of 0.00155 inside epsilon 0.031.
    pub fn pgd_reference() -> Self {
        Self::default()
    }

    /// APGD with its own default of 50 iterations.
    pub fn apgd(loss: AttackLoss, epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Apgd,
            epsilon,
            steps: 50,
            loss,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Validation(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Validation("step size must be positive".into()));
        }
        if self.momentum_decay < 0.0 {
            return Err(Error::Validation("momentum decay must be >= 0".into()));
        }
        let min_steps = match self.method {
            AttackMethod::Fgsm => 0,
            AttackMethod::Pgd | AttackMethod::Mim => 1,
            AttackMethod::Apgd => 2,
        };
        if self.steps < min_steps {
            return Err(Error::Validation(format!(
                "{} needs at least {min_steps} steps",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// One gradient evaluation of an attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub loss: f64,
    /// `max_i |dL/dx_i|`; exactly 0.0 under the zero-gradient condition.
    pub max_abs_grad: f64,
    pub confidence: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Vec<f64>,
    /// The returned image is classified differently from the true label.
    pub success: bool,
    /// One entry per evaluated iterate, in order.
    pub trace: Vec<StepTrace>,
    pub linf: f64,
    /// Loss at the returned image.
    pub loss: f64,
}

impl AttackResult {
    /// Trace as JSON lines, one object per step.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|s| serde_json::to_string(s).expect("trace serializes") + "\n")
            .collect()
    }
}

/// Loss, input gradient and logits of one image.
#[derive(Clone, Debug)]
pub(crate) struct Probe {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub logits: [f64; 2],
    pub confidence: [f64; 2],
}

impl Probe {
    pub fn max_abs_grad(&self) -> f64 {
        Tensor::from_vec(self.grad.clone()).max_abs()
    }

    pub fn misclassified(&self, label: Label) -> bool {
        argmax_label(self.logits) != label
    }
}

pub(crate) fn probe<M: Classifier + ?Sized>(
    model: &M,
    x: &[f64],
    label: Label,
    loss: AttackLoss,
    mode: PrecisionMode,
) -> Result<Probe> {
    let mut tape = Tape::new(mode);
    let xv = image_leaf(&mut tape, x, true)?;
    let params = model.params().bind(&mut tape, false);
    let z = model.forward(&mut tape, xv, &params, None)?;
    let (l, confidence) = match loss {
        AttackLoss::CrossEntropy => {
            let y = tape.softmax(z)?;
            let c = tape.value(y).data();
            let conf = [c[0], c[1]];
            (tape.cross_entropy(y, &label.onehot())?, conf)
        }
        AttackLoss::BinaryDlr => {
            let zd = tape.value(z).data();
            let t = softmax_terms(zd, mode, false);
            let conf = [t.probs[0], t.probs[1]];
            (tape.binary_dlr(z, label.index())?, conf)
        }
    };
    let grads = tape.backward(l)?;
    let zd = tape.value(z).data();
    Ok(Probe {
        loss: tape.value(l).data()[0],
        grad: grads.get_or_zeros(xv),
        logits: [zd[0], zd[1]],
        confidence,
    })
}

/// `sign` with `sign(0) = sign(NaN) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects onto the epsilon ball around `origin` and the unit box.
pub(crate) fn project(x: &mut [f64], origin: &[f64], epsilon: f64) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

pub(crate) fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn start_point(x: &[f64], config: &AttackConfig) -> Vec<f64> {
    let mut start = x.to_vec();
    if config.random_start && config.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for v in &mut start {
            *v += rng.random_range(-config.epsilon..=config.epsilon);
        }
        project(&mut start, x, config.epsilon);
    }
    start
}

/// Untargeted binary reduction of the margin loss: `-(z_y - z_{1-y})`.
pub fn binary_dlr_loss(logits: [f64; 2], label: Label) -> f64 {
    let y = label.index();
    -(logits[y] - logits[1 - y])
}

#[cfg(test)]
mod tests;
