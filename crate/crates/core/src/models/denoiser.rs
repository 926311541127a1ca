use rand::Rng;

use super::{image_leaf, Architecture, ParamSpec, Params};
use crate::data::{quantize, BubbleImage, HEIGHT};
use crate::error::Result;
use crate::precision::PrecisionMode;
use crate::tape::{Tape, Var};

/// Rows produced by the decoder before the first and last are removed.
pub const RAW_HEIGHT: usize = HEIGHT + 2;

/// Convolutional autoencoder mapping a degraded bubble back to a clean one.
///
/// Encoder: conv 1->32, 32->16, 16->8 (3x3, relu, 2x2 maxpool each), giving
/// 8x3x4. Decoder: transposed convs 8->8 (3x3, stride 3, output padding
/// one row), 8->16 and 16->32 (2x2, stride 2), all relu, then 32->1 (3x3,
/// stride 1) for a 42x50 map that is trimmed to 40x50.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    params: Params,
}

const FIRST_UP_STRIDE: usize = 3;
const FIRST_UP_PADDING: (usize, usize) = (1, 0);

impl Denoiser {
    pub fn layout() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("enc1.weight", &[32, 1, 3, 3]),
            ParamSpec::new("enc1.bias", &[32]),
            ParamSpec::new("enc2.weight", &[16, 32, 3, 3]),
            ParamSpec::new("enc2.bias", &[16]),
            ParamSpec::new("enc3.weight", &[8, 16, 3, 3]),
            ParamSpec::new("enc3.bias", &[8]),
            ParamSpec::new("dec1.weight", &[8, 8, 3, 3]),
            ParamSpec::new("dec1.bias", &[8]),
            ParamSpec::new("dec2.weight", &[8, 16, 2, 2]),
            ParamSpec::new("dec2.bias", &[16]),
            ParamSpec::new("dec3.weight", &[16, 32, 2, 2]),
            ParamSpec::new("dec3.bias", &[32]),
            ParamSpec::new("dec4.weight", &[32, 1, 3, 3]),
            ParamSpec::new("dec4.bias", &[1]),
        ]
    }

    pub fn zeros() -> Self {
        Self {
            params: Params::zeros(Self::layout()),
        }
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut m = Self::zeros();
        m.params.kaiming_uniform(
            &[9, 0, 32 * 9, 0, 16 * 9, 0, 8 * 9, 0, 8 * 4, 0, 16 * 4, 0, 32 * 9, 0],
            rng,
        );
        m
    }

    pub fn from_params(params: Params) -> Result<Self> {
        Ok(Self {
            params: Params::from_data(Self::layout(), params.data)?,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::Denoiser
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Decoder output before trimming, `[1, 42, 50]`.
    pub fn raw(&self, tape: &mut Tape, image: Var, params: &[Var]) -> Result<Var> {
        let mut x = image;
        for stage in 0..3 {
            let c = tape.conv2d(x, params[2 * stage], Some(params[2 * stage + 1]))?;
            let r = tape.relu(c);
            x = tape.maxpool2(r)?;
        }
        let u = tape.conv_transpose2d(x, params[6], Some(params[7]), FIRST_UP_STRIDE, FIRST_UP_PADDING)?;
        let mut x = tape.relu(u);
        for stage in [4, 5] {
            let u = tape.conv_transpose2d(x, params[2 * stage], Some(params[2 * stage + 1]), 2, (0, 0))?;
            x = tape.relu(u);
        }
        tape.conv_transpose2d(x, params[12], Some(params[13]), 1, (0, 0))
    }

    /// Trimmed `[1, 40, 50]` output, unclipped (used for training).
    pub fn forward(&self, tape: &mut Tape, image: Var, params: &[Var]) -> Result<Var> {
        let raw = self.raw(tape, image, params)?;
        tape.crop_rows(raw, 1, HEIGHT)
    }

    /// Restores one image: trimmed output clipped to [0, 1] and stored at
    /// 8-bit precision. Label and provenance are carried over.
    pub fn denoise(&self, image: &BubbleImage, mode: PrecisionMode) -> Result<BubbleImage> {
        let mut tape = Tape::new(mode);
        let x = image_leaf(&mut tape, image.pixels(), false)?;
        let p = self.params.bind(&mut tape, false);
        let y = self.forward(&mut tape, x, &p)?;
        let pixels = tape
            .value(y)
            .data()
            .iter()
            .map(|&v| f64::from(quantize(v)) / 255.0)
            .collect();
        BubbleImage::new(pixels, image.label, image.provenance)
    }
}
