use rand::RngCore;

use super::{Architecture, Classifier, ParamSpec, Params};
use crate::data::PIXELS;
use crate::error::Result;
use crate::precision::PrecisionMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed weights of the two-logit wrapper, one row per output.
pub const WRAPPER_WEIGHTS: [f64; 2] = [-1.0, 1.0];
pub const WRAPPER_BIAS: [f64; 2] = [1.0, 0.0];

/// Linear SVM on the flattened image. The raw score `p = w.x + b` goes
/// through a fixed linear layer giving logits `[1 - p, p]`, so `p > 0.5`
/// means NonMark.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    params: Params,
}

impl Default for LinearSvm {
    fn default() -> Self {
        Self::new()
    }
}

impl LinearSvm {
    pub fn layout() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("weight", &[1, PIXELS]),
            ParamSpec::new("bias", &[1]),
        ]
    }

    /// Zero-initialized model.
    pub fn new() -> Self {
        Self {
            params: Params::zeros(Self::layout()),
        }
    }

    pub fn from_params(params: Params) -> Result<Self> {
        let params = Params::from_data(Self::layout(), params.data)?;
        Ok(Self { params })
    }

    pub fn weights(&self) -> &[f64] {
        self.params.slice(0)
    }

    pub fn bias(&self) -> f64 {
        self.params.slice(1)[0]
    }

    /// Raw score `p` evaluated under `mode`.
    pub fn score(&self, pixels: &[f64], mode: PrecisionMode) -> Result<f64> {
        let mut tape = Tape::new(mode);
        let x = super::image_leaf(&mut tape, pixels, false)?;
        let p = self.params.bind(&mut tape, false);
        let s = self.raw_score(&mut tape, x, &p)?;
        Ok(tape.value(s).data()[0])
    }

    fn raw_score(&self, tape: &mut Tape, image: Var, params: &[Var]) -> Result<Var> {
        let flat = tape.flatten(image)?;
        tape.linear(flat, params[0], Some(params[1]))
    }

    /// Maps a score node `[1]` to the logits `[1 - p, p]`.
    pub fn wrap(tape: &mut Tape, score: Var) -> Result<Var> {
        let w = tape.leaf(Tensor::new(&[2, 1], WRAPPER_WEIGHTS.to_vec())?, false);
        let b = tape.leaf(Tensor::from_vec(WRAPPER_BIAS.to_vec()), false);
        tape.linear(score, w, Some(b))
    }
}

impl Classifier for LinearSvm {
    fn architecture(&self) -> Architecture {
        Architecture::SvmLinear
    }

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn forward(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &[Var],
        _dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.raw_score(tape, image, params)?;
        Self::wrap(tape, p)
    }
}
