//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order and only ever reference earlier
//! nodes, so walking the tape backwards visits every node after all of its
//! consumers. Each forward and backward result is rounded by the tape's
//! [`PrecisionMode`], which is what lets a vanishing confidence turn into an
//! exactly-zero input gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::precision::PrecisionMode;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    CropRows {
        input: Var,
        top: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        input: Var,
        label: usize,
    },
    BinaryDlr {
        input: Var,
        label: usize,
    },
    Mse {
        input: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Reshape(a) | Op::Softmax(a) => {
                vec![*a]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                ..
            } => std::iter::once(*input)
                .chain(std::iter::once(*kernel))
                .chain(*bias)
                .collect(),
            Op::Linear {
                input,
                weight,
                bias,
            } => std::iter::once(*input)
                .chain(std::iter::once(*weight))
                .chain(*bias)
                .collect(),
            Op::MaxPool2 { input, .. }
            | Op::CropRows { input, .. }
            | Op::Dropout { input, .. }
            | Op::CrossEntropy { input, .. }
            | Op::BinaryDlr { input, .. }
            | Op::Mse { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Intermediate terms of a softmax evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxTerms {
    /// `e^{z_i}` (or `e^{z_i - max z}` when stabilized).
    pub exps: Vec<f64>,
    pub sum: f64,
    pub probs: Vec<f64>,
}

/// Evaluates softmax term by term under `mode`, optionally subtracting the
/// maximum logit first.
pub fn softmax_terms(z: &[f64], mode: PrecisionMode, stabilized: bool) -> SoftmaxTerms {
    let shift = if stabilized {
        z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        0.0
    };
    let exps: Vec<f64> = z
        .iter()
        .map(|&v| {
            let arg = if stabilized { mode.round(v - shift) } else { v };
            mode.round(arg.exp())
        })
        .collect();
    let sum = exps.iter().fold(0.0, |acc, &e| mode.round(acc + e));
    let probs = exps.iter().map(|&e| mode.round(e / sum)).collect();
    SoftmaxTerms { exps, sum, probs }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads.get(var.0)?.as_ref().map(|g| {
            Tensor::new(&self.shapes[var.0], g.clone()).expect("gradient shape matches node")
        })
    }

    /// Gradient data, or zeros when the loss does not depend on `var`.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.0].iter().product()],
        }
    }
}

/// Single-owner recording of one forward evaluation.
#[derive(Debug)]
pub struct Tape {
    mode: PrecisionMode,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(mode: PrecisionMode) -> Self {
        Self {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf exactly as given.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf after converting it to the tape's storage format, the
    /// way parameters and images are cast before a 32-bit forward pass.
    pub fn leaf_cast(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mode = self.mode;
        let cast = value.map(|v| mode.round(v));
        self.leaf(cast, requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mode = self.mode;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| mode.round(f(x, y)))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mode = self.mode;
        let t = self.value(a).map(|v| mode.round(v * factor));
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mode = self.mode;
        let s = self.data(a).iter().fold(0.0, |acc, &v| mode.round(acc + v));
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Valid cross-correlation with stride 1: `[C,H,W] * [F,C,kh,kw] -> [F,H-kh+1,W-kw+1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 3 || ks.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {is:?} must be [C,H,W], kernel {ks:?} must be [F,C,kh,kw]"),
            ));
        }
        if ks[1] != is[0] {
            return Err(Error::dim(
                "conv2d",
                format!("channel axis: input has {}, kernel expects {}", is[0], ks[1]),
            ));
        }
        if is[1] < ks[2] || is[2] < ks[3] {
            return Err(Error::dim(
                "conv2d",
                format!("spatial axes {:?} smaller than kernel {:?}", &is[1..], &ks[2..]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} does not match {} filters", self.shape(b), ks[0]),
                ));
            }
        }
        let dims = ConvDims {
            channels: is[0],
            height: is[1],
            width: is[2],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride: 1,
            out_h: is[1] - ks[2] + 1,
            out_w: is[2] - ks[3] + 1,
        };
        let mut out = kernels::contract(
            self.mode,
            self.data(input),
            self.data(kernel),
            |x, k| kernels::conv2d_forward(x, k, dims),
            |x, k| kernels::conv2d_forward(x, k, dims),
        );
        if let Some(b) = bias {
            self.add_channel_bias(&mut out, b, dims.out_h * dims.out_w);
        }
        let t = Tensor::new(&[dims.filters, dims.out_h, dims.out_w], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
        ))
    }

    /// Transposed convolution, no padding: `[C,H,W]` with kernel `[C,F,kh,kw]`
    /// gives `[F,(H-1)s+kh+ph,(W-1)s+kw+pw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 3 || ks.len() != 4 || ks[0] != is[0] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {is:?} and kernel {ks:?} disagree on the channel axis"),
            ));
        }
        if stride == 0 || output_padding.0 >= stride || output_padding.1 >= stride {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("stride {stride} with output padding {output_padding:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[1]] {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("bias {:?} does not match {} filters", self.shape(b), ks[1]),
                ));
            }
        }
        let dims = ConvDims {
            channels: is[0],
            height: is[1],
            width: is[2],
            filters: ks[1],
            kh: ks[2],
            kw: ks[3],
            stride,
            out_h: (is[1] - 1) * stride + ks[2] + output_padding.0,
            out_w: (is[2] - 1) * stride + ks[3] + output_padding.1,
        };
        let mut out = kernels::contract(
            self.mode,
            self.data(input),
            self.data(kernel),
            |x, k| kernels::conv_transpose_forward(x, k, dims),
            |x, k| kernels::conv_transpose_forward(x, k, dims),
        );
        if let Some(b) = bias {
            self.add_channel_bias(&mut out, b, dims.out_h * dims.out_w);
        }
        let t = Tensor::new(&[dims.filters, dims.out_h, dims.out_w], out)?;
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                dims,
            },
        ))
    }

    fn add_channel_bias(&self, out: &mut [f64], bias: Var, plane: usize) {
        let mode = self.mode;
        for (chunk, &b) in out.chunks_mut(plane).zip(self.data(bias)) {
            for v in chunk {
                *v = mode.round(*v + b);
            }
        }
    }

    /// 2x2 max pooling with stride 2. A trailing odd row or column is
    /// dropped; ties go to the first cell in row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dim(
                "maxpool2",
                format!("input {s:?} must be [C,H,W] with H,W >= 2"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w;
                    let cells = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = cells[0];
                    for &idx in &cells[1..] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2 { input, argmax }))
    }

    /// Affine map `W x + b` with `W: [M,N]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let n = self.value(input).len();
        if ws.len() != 2 || ws[1] != n || self.shape(input).len() != 1 {
            return Err(Error::dim(
                "linear",
                format!("weights {ws:?} cannot multiply input {:?}", self.shape(input)),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs {} outputs", self.shape(b), ws[0]),
                ));
            }
        }
        let (rows, cols) = (ws[0], ws[1]);
        let mut out = kernels::contract(
            self.mode,
            self.data(weight),
            self.data(input),
            |w, x| kernels::matvec(w, x, rows, cols),
            |w, x| kernels::matvec(w, x, rows, cols),
        );
        if let Some(b) = bias {
            let mode = self.mode;
            for (o, &bv) in out.iter_mut().zip(self.data(b)) {
                *o = mode.round(*o + bv);
            }
        }
        let t = Tensor::from_vec(out);
        Ok(self.push(
            t,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Keeps `keep` rows starting at `top` from a `[C,H,W]` tensor.
    pub fn crop_rows(&mut self, input: Var, top: usize, keep: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || top + keep > s[1] {
            return Err(Error::dim(
                "crop_rows",
                format!("cannot keep rows {top}..{} of {s:?}", top + keep),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.data(input);
        let mut out = Vec::with_capacity(c * keep * w);
        for ch in 0..c {
            out.extend_from_slice(&x[ch * h * w + top * w..ch * h * w + (top + keep) * w]);
        }
        let t = Tensor::new(&[c, keep, w], out)?;
        Ok(self.push(t, Op::CropRows { input, top }))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mode = self.mode;
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| mode.round(v * m))
            .collect();
        let t = Tensor::new(self.shape(input), data)?;
        Ok(self.push(t, Op::Dropout { input, mask }))
    }

    /// `e^z / sum(e^z)` evaluated as written, without shifting by the
    /// maximum. Large logits therefore saturate exactly as the storage
    /// format dictates.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        self.softmax_impl(z, false)
    }

    /// Max-shifted softmax for paths that must stay finite (training).
    pub fn softmax_stable(&mut self, z: Var) -> Result<Var> {
        self.softmax_impl(z, true)
    }

    fn softmax_impl(&mut self, z: Var, stabilized: bool) -> Result<Var> {
        if self.shape(z).len() != 1 || self.value(z).len() < 2 {
            return Err(Error::dim(
                "softmax",
                format!("expects a vector of at least 2 logits, got {:?}", self.shape(z)),
            ));
        }
        let terms = softmax_terms(self.data(z), self.mode, stabilized);
        Ok(self.push(Tensor::from_vec(terms.probs), Op::Softmax(z)))
    }

    /// `-sum_i y_i log(conf_i)` for a one-hot `y`.
    ///
    /// When `confidence` comes straight from a softmax node the backward
    /// pass sends `conf - y` to the logits, which is the factor that
    /// vanishes when the confidence saturates.
    pub fn cross_entropy(&mut self, confidence: Var, onehot: &[f64]) -> Result<Var> {
        if onehot.len() != self.value(confidence).len() {
            return Err(Error::dim(
                "cross_entropy",
                format!(
                    "label has {} entries, confidence has {}",
                    onehot.len(),
                    self.value(confidence).len()
                ),
            ));
        }
        let label = one_hot_index(onehot)?;
        let p = self.data(confidence)[label];
        let loss = self.mode.round(-p.ln()) + 0.0;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                input: confidence,
                label,
            },
        ))
    }

    /// Binary reduction of the difference-of-logits loss:
    /// `-(z_y - z_{1-y})`. Positive exactly when the label is lost.
    pub fn binary_dlr(&mut self, logits: Var, label: usize) -> Result<Var> {
        if self.shape(logits) != [2] || label > 1 {
            return Err(Error::dim(
                "binary_dlr",
                format!("needs two logits and label 0/1, got {:?}", self.shape(logits)),
            ));
        }
        let z = self.data(logits);
        let loss = self.mode.round(z[1 - label] - z[label]);
        Ok(self.push(Tensor::scalar(loss), Op::BinaryDlr { input: logits, label }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        if self.shape(input) != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("{:?} vs target {:?}", self.shape(input), target.shape()),
            ));
        }
        let mode = self.mode;
        let n = target.len() as f64;
        let acc = self
            .data(input)
            .iter()
            .zip(target.data())
            .fold(0.0, |acc, (&a, &t)| {
                let d = mode.round(a - t);
                mode.round(acc + mode.round(d * d))
            });
        let loss = mode.round(acc / n);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                input,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(Error::Internal(format!(
                        "tape cycle: node {idx} depends on node {}",
                        p.0
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let mode = self.mode;
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = mode.round(*e + c);
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mode = self.mode;
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let c = g.iter().zip(xb).map(|(&gv, &y)| mode.round(gv * y)).collect();
                    self.accumulate(grads, *a, c);
                }
                if self.wants(*b) {
                    let c = g.iter().zip(xa).map(|(&gv, &x)| mode.round(gv * x)).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, factor) => {
                let c = g.iter().map(|&gv| mode.round(gv * factor)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let d = *dims;
                if self.wants(*input) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*kernel),
                        |g, k| kernels::conv2d_backward_input(g, k, d),
                        |g, k| kernels::conv2d_backward_input(g, k, d),
                    );
                    self.accumulate(grads, *input, c);
                }
                if self.wants(*kernel) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*input),
                        |g, x| kernels::conv2d_backward_kernel(g, x, d),
                        |g, x| kernels::conv2d_backward_kernel(g, x, d),
                    );
                    self.accumulate(grads, *kernel, c);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, plane_sums(g, d.out_h * d.out_w, mode));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let d = *dims;
                if self.wants(*input) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*kernel),
                        |g, k| kernels::conv_transpose_backward_input(g, k, d),
                        |g, k| kernels::conv_transpose_backward_input(g, k, d),
                    );
                    self.accumulate(grads, *input, c);
                }
                if self.wants(*kernel) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*input),
                        |g, x| kernels::conv_transpose_backward_kernel(g, x, d),
                        |g, x| kernels::conv_transpose_backward_kernel(g, x, d),
                    );
                    self.accumulate(grads, *kernel, c);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, plane_sums(g, d.out_h * d.out_w, mode));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut c = vec![0.0; self.value(*input).len()];
                for (&gv, &src) in g.iter().zip(argmax) {
                    c[src] = mode.round(c[src] + gv);
                }
                self.accumulate(grads, *input, c);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = self.shape(*weight);
                let (rows, cols) = (ws[0], ws[1]);
                if self.wants(*input) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*weight),
                        |g, w| kernels::vecmat(g, w, rows, cols),
                        |g, w| kernels::vecmat(g, w, rows, cols),
                    );
                    self.accumulate(grads, *input, c);
                }
                if self.wants(*weight) {
                    let c = kernels::contract(
                        mode,
                        g,
                        self.data(*input),
                        kernels::outer,
                        kernels::outer,
                    );
                    self.accumulate(grads, *weight, c);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::CropRows { input, top } => {
                let s = self.shape(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let keep = node.value.shape()[1];
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    out[ch * h * w + top * w..ch * h * w + (top + keep) * w]
                        .copy_from_slice(&g[ch * keep * w..(ch + 1) * keep * w]);
                }
                self.accumulate(grads, *input, out);
            }
            Op::Dropout { input, mask } => {
                let c = g.iter().zip(mask).map(|(&gv, &m)| mode.round(gv * m)).collect();
                self.accumulate(grads, *input, c);
            }
            Op::Softmax(z) => {
                let y = node.value.data();
                let dot = g
                    .iter()
                    .zip(y)
                    .fold(0.0, |acc, (&gv, &yv)| mode.round(acc + mode.round(gv * yv)));
                let c = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| mode.round(yv * mode.round(gv - dot)))
                    .collect();
                self.accumulate(grads, *z, c);
            }
            Op::CrossEntropy { input, label } => {
                let conf = self.data(*input);
                match &self.nodes[input.0].op {
                    Op::Softmax(z) => {
                        let c = conf
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| {
                                let target = if i == *label { 1.0 } else { 0.0 };
                                mode.round(mode.round(p - target) * g[0])
                            })
                            .collect();
                        self.accumulate(grads, *z, c);
                    }
                    _ => {
                        let mut c = vec![0.0; conf.len()];
                        c[*label] = mode.round(-g[0] / conf[*label]);
                        self.accumulate(grads, *input, c);
                    }
                }
            }
            Op::BinaryDlr { input, label } => {
                let mut c = vec![0.0; 2];
                c[*label] = -g[0];
                c[1 - *label] = g[0];
                self.accumulate(grads, *input, c);
            }
            Op::Mse { input, target } => {
                let n = target.len() as f64;
                let c = self
                    .data(*input)
                    .iter()
                    .zip(target)
                    .map(|(&a, &t)| {
                        let d = mode.round(a - t);
                        mode.round(mode.round(2.0 * d / n) * g[0])
                    })
                    .collect();
                self.accumulate(grads, *input, c);
            }
        }
        Ok(())
    }
}

fn plane_sums(g: &[f64], plane: usize, mode: PrecisionMode) -> Vec<f64> {
    g.chunks(plane)
        .map(|chunk| chunk.iter().fold(0.0, |acc, &v| mode.round(acc + v)))
        .collect()
}

/// Index of the hot entry of a one-hot vector.
pub fn one_hot_index(onehot: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in onehot.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Validation(format!("label {onehot:?} has several hot entries")));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Validation(format!("label {onehot:?} is not one-hot")));
        }
    }
    hot.ok_or_else(|| Error::Validation(format!("label {onehot:?} has no hot entry")))
}

#[cfg(test)]
mod tests;
