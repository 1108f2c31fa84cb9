//! Fixed-point primitives shared by every kernel.
//!
//! All quantized values are signed 8-bit integers interpreted in a
//! power-of-two `Qm.n` format. The format is "virtual" when `n > 7`: the
//! stored byte is still a plain `i8`, but its real value is `q * 2^-n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A quantized 8-bit value.
pub type Q7 = i8;

/// 32-bit MAC accumulator.
pub type Acc32 = i32;

pub const Q7_MIN: i32 = i8::MIN as i32;
pub const Q7_MAX: i32 = i8::MAX as i32;

/// Largest shift a kernel accepts.
pub const MAX_SHIFT: u32 = 31;

/// Power-of-two fixed-point format `Qm.n` with `m = 7 - n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct QFormat {
    frac_bits: i32,
}

impl QFormat {
    pub const MIN_FRAC_BITS: i32 = -7;
    pub const MAX_FRAC_BITS: i32 = 31;

    /// Absolute Q0.7, the output format of squash and softmax.
    pub const Q0_7: QFormat = QFormat { frac_bits: 7 };

    pub fn new(frac_bits: i32) -> Result<Self> {
        if (Self::MIN_FRAC_BITS..=Self::MAX_FRAC_BITS).contains(&frac_bits) {
            Ok(QFormat { frac_bits })
        } else {
            Err(Error::InvalidQFormat(frac_bits))
        }
    }

    /// Clamps `frac_bits` into the representable range.
    pub fn saturating(frac_bits: i32) -> Self {
        QFormat {
            frac_bits: frac_bits.clamp(Self::MIN_FRAC_BITS, Self::MAX_FRAC_BITS),
        }
    }

    /// Fractional bits `n`.
    pub fn n(self) -> i32 {
        self.frac_bits
    }

    /// Integer bits `m`; negative for virtual formats.
    pub fn m(self) -> i32 {
        7 - self.frac_bits
    }

    pub fn is_virtual(self) -> bool {
        self.frac_bits > 7
    }

    /// Real value of one least-significant bit.
    pub fn step(self) -> f64 {
        (-self.frac_bits as f64).exp2()
    }
}

impl TryFrom<i32> for QFormat {
    type Error = Error;

    fn try_from(n: i32) -> Result<Self> {
        QFormat::new(n)
    }
}

impl From<QFormat> for i32 {
    fn from(f: QFormat) -> i32 {
        f.frac_bits
    }
}

impl std::fmt::Display for QFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.m(), self.n())
    }
}

/// Arithmetic right shift followed by signed saturation to 8 bits.
///
/// The shift rounds toward negative infinity, like `>>` on two's complement.
#[inline(always)]
pub fn saturate_q7(acc: Acc32, right_shift: u32) -> Q7 {
    debug_assert!(right_shift <= MAX_SHIFT);
    (acc >> right_shift).clamp(Q7_MIN, Q7_MAX) as Q7
}

/// Validates a shift amount coming from untrusted input.
pub fn check_shift(shift: i64, context: &str) -> Result<u32> {
    if (0..=MAX_SHIFT as i64).contains(&shift) {
        Ok(shift as u32)
    } else {
        Err(Error::ShiftOutOfRange {
            shift,
            context: context.to_string(),
        })
    }
}

/// Quantizes one finite value: `clamp(round(v * 2^n), -128, 127)`, with
/// ties rounded away from zero.
#[inline]
pub fn quantize_value(value: f32, fmt: QFormat) -> Q7 {
    let scaled = (value as f64 * (fmt.n() as f64).exp2()).round();
    scaled.clamp(Q7_MIN as f64, Q7_MAX as f64) as Q7
}

pub fn quantize_tensor(values: &[f32], fmt: QFormat) -> Result<Vec<Q7>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v.is_finite() {
                Ok(quantize_value(v, fmt))
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

#[inline]
pub fn dequantize(q: Q7, fmt: QFormat) -> f32 {
    (q as f64 * fmt.step()) as f32
}

pub fn dequantize_tensor(q: &[Q7], fmt: QFormat) -> Vec<f32> {
    q.iter().map(|&v| dequantize(v, fmt)).collect()
}

/// Integer square root by Newton-Raphson iteration, returning `floor(sqrt(x))`.
///
/// Starts from `x / 2` and iterates `(x0 + x / x0) / 2` while the estimate
/// keeps decreasing. Inputs below 2 are returned unchanged since the seed
/// would be zero.
pub fn isqrt(x: u32) -> u32 {
    if x <= 1 {
        return x;
    }
    let mut x0 = x / 2;
    let mut x1 = (x0 + x / x0) / 2;
    while x1 < x0 {
        x0 = x1;
        x1 = (x0 + x / x0) / 2;
    }
    x0
}
