//! Integer activation functions: squash, softmax, ReLU and vector norm.

use crate::error::{Error, Result};
use crate::kernels::QMatrix;
use crate::parallel::for_each_block;
use crate::qcore::{isqrt, QFormat, Q7};

/// Fractional bits of every squash output (absolute Q0.7).
pub const SQUASH_OUT_QN: i32 = 7;

/// Squash scaling: the input vectors carry `i_qn` virtual fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquashParams {
    pub i_qn: u32,
}

impl SquashParams {
    pub fn new(i_qn: u32) -> Self {
        SquashParams { i_qn }
    }

    pub fn o_qn(&self) -> i32 {
        SQUASH_OUT_QN
    }
}

/// Integer L2 norm: returns `(isqrt(sum v^2), sum v^2)`.
pub fn vector_norm_q(v: &[Q7]) -> (u32, u32) {
    let sq: u32 = v.iter().map(|&x| (x as i32 * x as i32) as u32).sum();
    (isqrt(sq), sq)
}

/// Squashes one vector into `out`.
///
/// `out_k = (s_k * (|s| << (o_qn - i_qn))) / ((1 << i_qn) + (|s|^2 >> i_qn))`,
/// with the norm shifted right instead when `i_qn > o_qn`. Division truncates
/// toward zero and the numerator is held in 64 bits.
pub fn squash_vector(row: &[Q7], i_qn: u32, out: &mut [Q7]) {
    let (norm, sq) = vector_norm_q(row);
    let diff = SQUASH_OUT_QN - i_qn as i32;
    let scale: i64 = if diff >= 0 {
        (norm as i64) << diff
    } else {
        (norm as i64) >> (-diff).min(63)
    };
    let denom: i64 = (1i64 << i_qn) + ((sq as i64) >> i_qn);
    for (o, &s) in out.iter_mut().zip(row) {
        *o = ((s as i64 * scale) / denom).clamp(i8::MIN as i64, i8::MAX as i64) as Q7;
    }
}

/// Squashes every row of `data` (rows of `dim` entries) into `out`,
/// splitting rows across `workers`.
pub fn squash_rows(data: &[Q7], dim: usize, i_qn: u32, workers: usize, out: &mut [Q7]) {
    for_each_block(out, dim, workers, |rows, chunk| {
        for (r, row) in rows.enumerate() {
            squash_vector(
                &data[row * dim..(row + 1) * dim],
                i_qn,
                &mut chunk[r * dim..(r + 1) * dim],
            );
        }
    });
}

/// Row-wise quantized squash; the result is in Q0.7.
pub fn squash_q7(rows: &QMatrix, p: SquashParams) -> QMatrix {
    let mut out = vec![0; rows.data.len()];
    squash_rows(&rows.data, rows.cols, p.i_qn, 1, &mut out);
    QMatrix {
        data: out,
        rows: rows.rows,
        cols: rows.cols,
        fmt: QFormat::Q0_7,
    }
}

/// Unit of the base-2 exponential: `e = UNIT >> shift`.
const SOFTMAX_UNIT: i64 = 1 << 15;
const SOFTMAX_MAX_SHIFT: i64 = 30;

/// Integer softmax over one group, written to `out` in Q0.7.
///
/// `e_i = 2^15 >> min(30, (max - x_i) >> frac_bits)` and
/// `out_i = clamp((e_i << 7) / sum(e), 0, 127)`.
pub fn softmax_group(logits: &[Q7], frac_bits: u32, out: &mut [Q7]) {
    let Some(&max) = logits.iter().max() else {
        return;
    };
    let exp = |x: Q7| {
        let shift = ((max as i64 - x as i64) >> frac_bits.min(63)).min(SOFTMAX_MAX_SHIFT);
        SOFTMAX_UNIT >> shift
    };
    let sum: i64 = logits.iter().map(|&x| exp(x)).sum();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = ((exp(x) << 7) / sum).clamp(0, 127) as Q7;
    }
}

/// Softmax applied independently to `groups` contiguous groups.
pub fn softmax_q7(logits: &[Q7], groups: usize, logit_frac_bits: u32) -> Result<Vec<Q7>> {
    if groups == 0 || !logits.len().is_multiple_of(groups) {
        return Err(Error::Shape(format!(
            "softmax: {} logits cannot be split into {groups} groups",
            logits.len()
        )));
    }
    let mut out = vec![0; logits.len()];
    let n = logits.len() / groups;
    if n > 0 {
        for (src, dst) in logits.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_group(src, logit_frac_bits, dst);
        }
    }
    Ok(out)
}

pub fn relu_q7(x: &[Q7]) -> Vec<Q7> {
    x.iter().map(|&v| v.max(0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squash(row: &[i8], i_qn: u32) -> Vec<i8> {
        let m = QMatrix::new(row.to_vec(), 1, row.len(), QFormat::Q0_7).unwrap();
        squash_q7(&m, SquashParams::new(i_qn)).data
    }

    #[test]
    fn norm_examples() {
        assert_eq!(vector_norm_q(&[3, 4]), (5, 25));
        assert_eq!(vector_norm_q(&[0, 0, 0]), (0, 0));
        assert_eq!(vector_norm_q(&[127, 0, 0, 0]), (127, 16129));
        assert_eq!(vector_norm_q(&[-128; 4]), (256, 65536));
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[127, 0, 0, 0], 7), vec![63, 0, 0, 0]);
        assert_eq!(squash(&[0, 0, 0, 0], 7), vec![0, 0, 0, 0]);
        let out = squash(&[3, 4], 7);
        assert!(out[0].abs() <= 3 && out[1].abs() <= 4);
        assert!(out.iter().all(|&v| v >= 0));
        let out = squash(&[-3, 4], 7);
        assert!(out[0] <= 0 && out[1] >= 0);
    }

    #[test]
    fn squash_shrinks_large_i_qn_and_saturates_small() {
        // i_qn = 2: |s| = 127 / 4 ~ 31.75, squash length ~ 0.999
        let out = squash(&[127, 0], 2);
        assert_eq!(out, vec![127, 0]);
        // i_qn = 12: right-shifted norm path
        let out = squash(&[127, 127, 127, 127], 12);
        assert!(out.iter().all(|&v| (0..=2).contains(&v)));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_q7(&[0, 0, 0, 0], 1, 7).unwrap(), vec![32; 4]);
        assert_eq!(softmax_q7(&[0, -128, -128, -128], 1, 7).unwrap(), vec![51, 25, 25, 25]);
        let a = softmax_q7(&[10, -20, 100, 0], 1, 4).unwrap();
        let b = softmax_q7(&[100, 0, 10, -20], 1, 4).unwrap();
        assert_eq!((a[0], a[1], a[2], a[3]), (b[2], b[3], b[0], b[1]));
        assert_eq!(softmax_q7(&[5], 1, 0).unwrap(), vec![127]);
    }

    #[test]
    fn softmax_groups() {
        let out = softmax_q7(&[0, 0, 0, 127, -128, 127], 2, 7).unwrap();
        assert_eq!(&out[..3], &[42, 42, 42]);
        assert!(softmax_q7(&[0; 5], 2, 7).is_err());
        assert!(softmax_q7(&[0; 4], 0, 7).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_q7(&[-5]), vec![0]);
        assert_eq!(relu_q7(&[7]), vec![7]);
        assert_eq!(relu_q7(&[-128, 127]), vec![0, 127]);
    }
}
