//! Classifiers, the denoiser, and checkpoint persistence.
//!
//! Parameters live in one flat `f64` blob per model. A forward pass binds the
//! blob onto a tape (rounding it to the tape's precision) and records the
//! layers on top, so training, attacks and diagnostics all share the same
//! graph.

mod checkpoint;
mod cnn;
mod denoiser;
mod svm;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{BubbleImage, Label, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::tape::{softmax_terms, Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use cnn::{SimpleCnn, FEATURES};
pub use denoiser::{Denoiser, RAW_HEIGHT};
pub use svm::{LinearSvm, WRAPPER_BIAS, WRAPPER_WEIGHTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    SvmLinear,
    SimpleCnn,
    Denoiser,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::SvmLinear => "svm-linear",
            Architecture::SimpleCnn => "simple-cnn",
            Architecture::Denoiser => "denoiser",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "svm-linear" => Some(Architecture::SvmLinear),
            "simple-cnn" => Some(Architecture::SimpleCnn),
            "denoiser" => Some(Architecture::Denoiser),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: &'static str, shape: &[usize]) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter blob with a named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl Params {
    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let n = specs.iter().map(ParamSpec::len).sum();
        Self {
            specs,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self> {
        let n: usize = specs.iter().map(ParamSpec::len).sum();
        if n != data.len() {
            return Err(Error::dim(
                "params",
                format!("layout needs {n} values, blob has {}", data.len()),
            ));
        }
        Ok(Self { specs, data })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, index: usize) -> usize {
        self.specs[..index].iter().map(ParamSpec::len).sum()
    }

    pub fn slice(&self, index: usize) -> &[f64] {
        let start = self.offset(index);
        &self.data[start..start + self.specs[index].len()]
    }

    pub fn slice_mut(&mut self, index: usize) -> &mut [f64] {
        let start = self.offset(index);
        let len = self.specs[index].len();
        &mut self.data[start..start + len]
    }

    /// Records every parameter as a leaf, cast to the tape's precision.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        let mut offset = 0;
        self.specs
            .iter()
            .map(|spec| {
                let n = spec.len();
                let t = Tensor::new(&spec.shape, self.data[offset..offset + n].to_vec())
                    .expect("layout matches blob");
                offset += n;
                tape.leaf_cast(t, requires_grad)
            })
            .collect()
    }

    /// Concatenates per-parameter gradients into one blob-shaped vector.
    pub fn gather(&self, grads: &crate::tape::Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for &v in vars {
            out.extend(grads.get_or_zeros(v));
        }
        out
    }

    /// Kaiming-uniform fill: weights in `±sqrt(6 / fan_in)`, biases zero.
    pub(crate) fn kaiming_uniform<R: Rng + ?Sized>(&mut self, fan_in: &[usize], rng: &mut R) {
        for (i, &fan) in fan_in.iter().enumerate() {
            let bound = if fan == 0 { 0.0 } else { (6.0 / fan as f64).sqrt() };
            for v in self.slice_mut(i) {
                *v = if bound == 0.0 {
                    0.0
                } else {
                    rng.random_range(-bound..bound)
                };
            }
        }
    }
}

/// Records an image as a `[1, 40, 50]` leaf.
pub fn image_leaf(tape: &mut Tape, pixels: &[f64], requires_grad: bool) -> Result<Var> {
    if pixels.len() != HEIGHT * WIDTH {
        return Err(Error::dim(
            "image",
            format!("expected 1x{HEIGHT}x{WIDTH} input, got {} values", pixels.len()),
        ));
    }
    Ok(tape.leaf_cast(
        Tensor::new(&[1, HEIGHT, WIDTH], pixels.to_vec())?,
        requires_grad,
    ))
}

/// A two-class model differentiable from image to logits.
pub trait Classifier: Send + Sync {
    fn architecture(&self) -> Architecture;

    fn params(&self) -> &Params;

    fn params_mut(&mut self) -> &mut Params;

    /// Records the forward pass from a bound image to the two logits.
    /// Dropout (if any) is active only when `dropout_rng` is given.
    fn forward(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &[Var],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var>;

    /// Overrides the architecture's dropout rate; a no-op for models
    /// without dropout.
    fn set_dropout(&mut self, _rate: f64) -> Result<()> {
        Ok(())
    }

    fn logits(&self, pixels: &[f64], mode: PrecisionMode) -> Result<[f64; 2]> {
        let mut tape = Tape::new(mode);
        let x = image_leaf(&mut tape, pixels, false)?;
        let p = self.params().bind(&mut tape, false);
        let z = self.forward(&mut tape, x, &p, None)?;
        let d = tape.value(z).data();
        Ok([d[0], d[1]])
    }

    /// Softmax of the logits, evaluated without max-shifting.
    fn confidence(&self, pixels: &[f64], mode: PrecisionMode) -> Result<[f64; 2]> {
        let z = self.logits(pixels, mode)?;
        let t = softmax_terms(&z, mode, false);
        Ok([t.probs[0], t.probs[1]])
    }

    fn predict(&self, pixels: &[f64], mode: PrecisionMode) -> Result<Label> {
        Ok(argmax_label(self.logits(pixels, mode)?))
    }

    fn accuracy(&self, images: &[BubbleImage], mode: PrecisionMode) -> Result<f64> {
        use rayon::prelude::*;
        if images.is_empty() {
            return Err(Error::Validation("accuracy of an empty set".into()));
        }
        let correct: Result<Vec<bool>> = images
            .par_iter()
            .map(|img| Ok(self.predict(img.pixels(), mode)? == img.label))
            .collect();
        Ok(correct?.iter().filter(|&&c| c).count() as f64 / images.len() as f64)
    }
}

/// Class with the larger logit; ties (and NaN) go to `Mark`.
pub fn argmax_label(z: [f64; 2]) -> Label {
    if z[1] > z[0] {
        Label::NonMark
    } else {
        Label::Mark
    }
}

/// A loaded classifier of either architecture.
#[derive(Clone, Debug)]
pub enum AnyClassifier {
    Svm(LinearSvm),
    Cnn(SimpleCnn),
}

impl AnyClassifier {
    pub fn inner(&self) -> &dyn Classifier {
        match self {
            AnyClassifier::Svm(m) => m,
            AnyClassifier::Cnn(m) => m,
        }
    }

    pub fn inner_mut(&mut self) -> &mut dyn Classifier {
        match self {
            AnyClassifier::Svm(m) => m,
            AnyClassifier::Cnn(m) => m,
        }
    }
}

impl Classifier for AnyClassifier {
    fn architecture(&self) -> Architecture {
        self.inner().architecture()
    }

    fn params(&self) -> &Params {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut Params {
        self.inner_mut().params_mut()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        image: Var,
        params: &[Var],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.inner().forward(tape, image, params, dropout_rng)
    }

    fn set_dropout(&mut self, rate: f64) -> Result<()> {
        self.inner_mut().set_dropout(rate)
    }
}
