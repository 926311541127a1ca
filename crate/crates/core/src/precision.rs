//! Floating-point semantics used by every tensor operation.
//!
//! Values are always stored as `f64`. A [`PrecisionMode`] decides how the
//! result of each primitive is rounded before it is stored:
//!
//! * `Full64` keeps the native double result.
//! * `Standard32` rounds every result to IEEE-754 binary32
//!   (round-to-nearest-even). Contractions (linear, convolution) read their
//!   operands as binary32 and accumulate in binary32.
//! * `Reduced32` behaves like `Standard32` but additionally rounds every
//!   multiply/accumulate operand of a contraction to a 10-bit mantissa, the
//!   way tensor-float hardware feeds its multipliers.
//!
//! With `flush_to_zero` set, a 32-bit result whose magnitude is below the
//! smallest normal binary32 value (2^-126) is replaced by a signed zero.

use serde::{Deserialize, Serialize};

/// Smallest positive normal binary32 value, 2^-126.
pub const F32_MIN_NORMAL: f64 = 1.175_494_350_822_287_5e-38;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionKind {
    Full64,
    Standard32,
    Reduced32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionMode {
    pub kind: PrecisionKind,
    pub flush_to_zero: bool,
}

impl Default for PrecisionMode {
    fn default() -> Self {
        Self::FULL64
    }
}

impl PrecisionMode {
    pub const FULL64: Self = Self {
        kind: PrecisionKind::Full64,
        flush_to_zero: false,
    };
    pub const STANDARD32: Self = Self {
        kind: PrecisionKind::Standard32,
        flush_to_zero: false,
    };
    pub const REDUCED32: Self = Self {
        kind: PrecisionKind::Reduced32,
        flush_to_zero: false,
    };

    pub fn with_flush_to_zero(mut self, on: bool) -> Self {
        self.flush_to_zero = on;
        self
    }

    pub fn is_32bit(&self) -> bool {
        !matches!(self.kind, PrecisionKind::Full64)
    }

    /// Rounds a freshly computed result into this mode's storage format.
    #[inline]
    pub fn round(&self, x: f64) -> f64 {
        match self.kind {
            PrecisionKind::Full64 => x,
            _ => self.flush(x as f32 as f64),
        }
    }

    /// Applies flush-to-zero to a value that is already representable.
    #[inline]
    pub fn flush(&self, x: f64) -> f64 {
        if self.flush_to_zero && self.is_32bit() && x != 0.0 && x.abs() < F32_MIN_NORMAL {
            0.0_f64.copysign(x)
        } else {
            x
        }
    }

    #[inline]
    pub fn flush32(&self, x: f32) -> f32 {
        if self.flush_to_zero && x != 0.0 && x.is_subnormal() {
            0.0_f32.copysign(x)
        } else {
            x
        }
    }

    /// Operand conversion used by contractions in 32-bit modes.
    #[inline]
    pub fn contraction_operand(&self, x: f64) -> f32 {
        match self.kind {
            PrecisionKind::Reduced32 => round_reduced(x) as f32,
            _ => x as f32,
        }
    }

    /// Inverse of [`label`](Self::label).
    pub fn from_label(label: &str) -> Option<Self> {
        let (base, ftz) = match label.strip_suffix("-ftz") {
            Some(b) => (b, true),
            None => (label, false),
        };
        let mode = match base {
            "f64" => Self::FULL64,
            "f32" => Self::STANDARD32,
            "tf32" => Self::REDUCED32,
            _ => return None,
        };
        Some(mode.with_flush_to_zero(ftz && mode.is_32bit()))
    }

    /// Short name used on the command line and in reports.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.flush_to_zero) {
            (PrecisionKind::Full64, _) => "f64",
            (PrecisionKind::Standard32, false) => "f32",
            (PrecisionKind::Standard32, true) => "f32-ftz",
            (PrecisionKind::Reduced32, false) => "tf32",
            (PrecisionKind::Reduced32, true) => "tf32-ftz",
        }
    }
}

/// Rounds `x` to a 10-bit stored mantissa (ties to even) inside the binary32
/// exponent range.
///
/// The rounding is done directly on the binary64 pattern so there is no
/// intermediate rounding to 23 bits.
pub fn round_reduced(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    const DROP: u32 = 52 - 10;
    let bits = x.to_bits();
    let half = 1u64 << (DROP - 1);
    let mask = (1u64 << DROP) - 1;
    let rem = bits & mask;
    let mut kept = bits & !mask;
    let lsb = (bits >> DROP) & 1;
    if rem > half || (rem == half && lsb == 1) {
        // carrying into the exponent field is the correct result
        kept += 1u64 << DROP;
    }
    let rounded = f64::from_bits(kept);
    // Out-of-range magnitudes follow binary32: overflow to infinity,
    // tiny values land on the binary32 subnormal grid.
    rounded as f32 as f64
}
