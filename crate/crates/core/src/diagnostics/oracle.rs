use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::precision::{round_reduced, PrecisionKind, PrecisionMode};
use crate::tape::softmax_terms;

/// `dL/dh` for `L = CE(softmax(W h + b), y)`, written out by hand in the
/// arithmetic of `mode`: `(y~ - y) W`.
///
/// `w` is `[2, N]` row-major. Inputs are first rounded to the mode, the
/// affine map accumulates left to right, the softmax is not max-shifted,
/// and the final product accumulates over the two rows in order. This
/// mirrors the tape's evaluation order without using the tape.
pub fn last_layer_oracle(
    w: &[f64],
    b: &[f64],
    h: &[f64],
    label: Label,
    mode: PrecisionMode,
) -> Result<Vec<f64>> {
    let n = h.len();
    if b.len() != 2 || w.len() != 2 * n {
        return Err(Error::dim(
            "last_layer_oracle",
            format!("W has {} values, b {}, h {n}; expected 2x{n}, 2, {n}", w.len(), b.len()),
        ));
    }
    let y = label.onehot();
    match mode.kind {
        PrecisionKind::Full64 => {
            let z: Vec<f64> = (0..2)
                .map(|r| w[r * n..(r + 1) * n].iter().zip(h).fold(0.0, |a, (x, v)| a + x * v) + b[r])
                .collect();
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s = e[0] + e[1];
            let d: Vec<f64> = (0..2).map(|r| e[r] / s - y[r]).collect();
            Ok((0..n).map(|i| 0.0 + d[0] * w[i] + d[1] * w[n + i]).collect())
        }
        _ => {
            let ftz = |x: f32| {
                if mode.flush_to_zero && x.is_subnormal() {
                    0.0f32.copysign(x)
                } else {
                    x
                }
            };
            let store = |x: f64| ftz(x as f32);
            let operand = |x: f32| match mode.kind {
                PrecisionKind::Reduced32 => round_reduced(x as f64) as f32,
                _ => x,
            };
            let w32: Vec<f32> = w.iter().map(|&v| store(v)).collect();
            let b32: Vec<f32> = b.iter().map(|&v| store(v)).collect();
            let h32: Vec<f32> = h.iter().map(|&v| store(v)).collect();
            let z: Vec<f32> = (0..2)
                .map(|r| {
                    let mut acc = 0.0f32;
                    for (x, v) in w32[r * n..(r + 1) * n].iter().zip(&h32) {
                        acc += operand(*x) * operand(*v);
                    }
                    ftz(ftz(acc) + b32[r])
                })
                .collect();
            let e: Vec<f32> = z.iter().map(|&v| store((v as f64).exp())).collect();
            let s = ftz(ftz(0.0 + e[0]) + e[1]);
            let d: Vec<f32> = (0..2).map(|r| ftz(ftz(e[r] / s) - y[r] as f32)).collect();
            Ok((0..n)
                .map(|i| {
                    let mut acc = 0.0f32;
                    for r in 0..2 {
                        acc += operand(d[r]) * operand(w32[r * n + i]);
                    }
                    ftz(acc) as f64
                })
                .collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    /// `e^{z_max} + e^{z_min} == e^{z_max}` in the mode.
    pub sum_absorbed: bool,
    /// The smaller softmax output is exactly zero.
    pub underflowed_ratio: bool,
}

/// Checks the two ways an unshifted two-class softmax loses the smaller
/// class in `mode`.
pub fn absorption_check(z: [f64; 2], mode: PrecisionMode) -> AbsorptionReport {
    let t = softmax_terms(&z, mode, false);
    let (hi, lo) = if z[0] >= z[1] { (0, 1) } else { (1, 0) };
    AbsorptionReport {
        sum_absorbed: t.sum == t.exps[hi],
        underflowed_ratio: t.probs[lo] == 0.0,
    }
}
