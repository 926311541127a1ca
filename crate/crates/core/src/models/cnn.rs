use rand::{Rng, RngCore};

use super::{Architecture, Classifier, ParamSpec, Params};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::tape::{Tape, Var};

/// Features entering the fully-connected head: 32 channels of 3x4 after
/// three conv/pool stages on a 40x50 input.
pub const FEATURES: usize = 32 * 3 * 4;

/// Three conv(3x3)+relu+maxpool stages, dropout, then a 384 -> 2 head.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleCnn {
    params: Params,
    dropout: f64,
}

impl SimpleCnn {
    pub const DEFAULT_DROPOUT: f64 = 0.5;

    pub fn layout() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("conv1.weight", &[32, 1, 3, 3]),
            ParamSpec::new("conv1.bias", &[32]),
            ParamSpec::new("conv2.weight", &[48, 32, 3, 3]),
            ParamSpec::new("conv2.bias", &[48]),
            ParamSpec::new("conv3.weight", &[32, 48, 3, 3]),
            ParamSpec::new("conv3.bias", &[32]),
            ParamSpec::new("fc.weight", &[2, FEATURES]),
            ParamSpec::new("fc.bias", &[2]),
        ]
    }

    /// All-zero parameters.
    pub fn zeros() -> Self {
        Self {
            params: Params::zeros(Self::layout()),
            dropout: Self::DEFAULT_DROPOUT,
        }
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut m = Self::zeros();
        m.params
            .kaiming_uniform(&[9, 0, 32 * 9, 0, 48 * 9, 0, FEATURES, 0], rng);
        m
    }

    pub fn from_params(params: Params) -> Result<Self> {
        Ok(Self {
            params: Params::from_data(Self::layout(), params.data)?,
            dropout: Self::DEFAULT_DROPOUT,
        })
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout = rate;
        Ok(self)
    }

    /// Flattened 384-element output of the convolutional trunk.
    pub fn features(&self, tape: &mut Tape, image: Var, params: &[Var]) -> Result<Var> {
        let mut x = image;
        for stage in 0..3 {
            let c = tape.conv2d(x, params[2 * stage], Some(params[2 * stage + 1]))?;
            let r = tape.relu(c);
            x = tape.maxpool2(r)?;
        }
        tape.flatten(x)
    }

    /// Fully-connected head on a feature node.
    pub fn head(
        &self,
        tape: &mut Tape,
        features: Var,
        params: &[Var],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let f = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => tape.dropout(features, self.dropout, rng)?,
            _ => features,
        };
        tape.linear(f, params[6], Some(params[7]))
    }

    /// Evaluation-mode trunk output for one image.
    pub fn feature_vector(&self, pixels: &[f64], mode: PrecisionMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new(mode);
        let x = super::image_leaf(&mut tape, pixels, false)?;
        let p = self.params.bind(&mut tape, false);
        let f = self.features(&mut tape, x, &p)?;
        Ok(tape.value(f).data().to_vec())
    }
}

impl Classifier for SimpleCnn {
    fn architecture(&self) -> Architecture {
        Architecture::SimpleCnn
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
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let f = self.features(tape, image, params)?;
        self.head(tape, f, params, dropout_rng)
    }

    fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout = rate;
        Ok(())
    }
}
