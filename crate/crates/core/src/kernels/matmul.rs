use super::{QMatrix, Strategy};
use crate::error::{Error, Result};
use crate::parallel::{for_each_block, ExecConfig};
use crate::qcore::{saturate_q7, Acc32, QFormat, Q7};

/// Dot product of four packed signed bytes, accumulated into `acc`.
///
/// Portable stand-in for a 4x8-bit SIMD MAC: lane `k` lives in bits
/// `8k..8k+8` of each word.
#[inline(always)]
pub fn sdotsp4(a: u32, b: u32, acc: Acc32) -> Acc32 {
    let lane = |w: u32, k: u32| ((w << (24 - 8 * k)) as i32) >> 24;
    acc + lane(a, 0) * lane(b, 0) + lane(a, 1) * lane(b, 1) + lane(a, 2) * lane(b, 2) + lane(a, 3) * lane(b, 3)
}

#[inline(always)]
fn pack4(v: &[Q7]) -> u32 {
    u32::from_le_bytes([v[0] as u8, v[1] as u8, v[2] as u8, v[3] as u8])
}

#[inline(always)]
fn dot_scalar(a: &[Q7], b: &[Q7]) -> Acc32 {
    a.iter().zip(b).map(|(&x, &y)| x as Acc32 * y as Acc32).sum()
}

#[inline(always)]
fn dot_packed(a: &[Q7], b: &[Q7]) -> Acc32 {
    let full = a.len() & !3;
    let mut sum = 0;
    for (wa, wb) in a[..full].chunks_exact(4).zip(b[..full].chunks_exact(4)) {
        sum = sdotsp4(pack4(wa), pack4(wb), sum);
    }
    for k in full..a.len() {
        sum += a[k] as Acc32 * b[k] as Acc32;
    }
    sum
}

/// Writes `b` (rows x cols) transposed into `out` (cols x rows).
pub fn transpose_into<T: Copy>(b: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = b[i * cols + j];
        }
    }
}

pub fn transpose(b: &QMatrix) -> QMatrix {
    let mut out = vec![0; b.data.len()];
    transpose_into(&b.data, b.rows, b.cols, &mut out);
    QMatrix {
        data: out,
        rows: b.cols,
        cols: b.rows,
        fmt: b.fmt,
    }
}

/// `out[m x n] = sat((a[m x k] * b[k x n]) >> shift)`.
///
/// Output rows are split across `exec.workers` contiguous blocks.
#[allow(clippy::too_many_arguments)]
pub fn mat_mult_into(a: &[Q7], b: &[Q7], m: usize, k: usize, n: usize, shift: u32, exec: &ExecConfig, out: &mut [Q7]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match exec.strategy {
        Strategy::Naive => for_each_block(out, n, exec.workers, |rows, chunk| {
            for (r, i) in rows.enumerate() {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let mut sum: Acc32 = 0;
                    for (kk, &x) in a_row.iter().enumerate() {
                        sum += x as Acc32 * b[kk * n + j] as Acc32;
                    }
                    chunk[r * n + j] = saturate_q7(sum, shift);
                }
            }
        }),
        Strategy::TransposedB | Strategy::PackedDot => {
            let mut bt = vec![0; k * n];
            transpose_into(b, k, n, &mut bt);
            let dot = if exec.strategy == Strategy::PackedDot {
                dot_packed
            } else {
                dot_scalar
            };
            let bt = &bt;
            for_each_block(out, n, exec.workers, |rows, chunk| {
                for (r, i) in rows.enumerate() {
                    let a_row = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        chunk[r * n + j] = saturate_q7(dot(a_row, &bt[j * k..(j + 1) * k]), shift);
                    }
                }
            });
        }
    }
}

fn check_mult(a: &QMatrix, b: &QMatrix, shift: u32) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    crate::qcore::check_shift(shift as i64, "mat_mult")?;
    Ok(())
}

fn product_format(a: QFormat, b: QFormat, shift: u32) -> QFormat {
    QFormat::saturating(a.n() + b.n() - shift as i32)
}

pub fn mat_mult(a: &QMatrix, b: &QMatrix, out_shift: u32, strategy: Strategy) -> Result<QMatrix> {
    mat_mult_exec(a, b, out_shift, &ExecConfig::new(strategy, 1))
}

pub fn mat_mult_exec(a: &QMatrix, b: &QMatrix, out_shift: u32, exec: &ExecConfig) -> Result<QMatrix> {
    check_mult(a, b, out_shift)?;
    let mut out = vec![0; a.rows * b.cols];
    mat_mult_into(&a.data, &b.data, a.rows, a.cols, b.cols, out_shift, exec, &mut out);
    Ok(QMatrix {
        data: out,
        rows: a.rows,
        cols: b.cols,
        fmt: product_format(a.fmt, b.fmt, out_shift),
    })
}

#[inline(always)]
fn pack_q15x2(lo: i16, hi: i16) -> u32 {
    (lo as u16 as u32) | ((hi as u16 as u32) << 16)
}

#[inline(always)]
fn smlad(x: u32, y: u32, acc: Acc32) -> Acc32 {
    let lo = |w: u32| w as u16 as i16 as Acc32;
    let hi = |w: u32| (w >> 16) as u16 as i16 as Acc32;
    acc + lo(x) * lo(y) + hi(x) * hi(y)
}

/// Matrix multiplication in the style of a 2x16-bit SIMD MAC: `b` is
/// transposed and sign-extended to 16 bits, `a` is expanded on the fly and
/// the inner loop is unrolled by two dual-MACs. Bit-identical to
/// [`mat_mult`]; kept for strategy benchmarking.
pub fn mat_mult_sign_extend_pairs(a: &QMatrix, b: &QMatrix, out_shift: u32) -> Result<QMatrix> {
    check_mult(a, b, out_shift)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut bt = vec![0i16; k * n];
    for i in 0..k {
        for j in 0..n {
            bt[j * k + i] = b.data[i * n + j] as i16;
        }
    }
    let full = k & !3;
    let mut out = vec![0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &bt[j * k..(j + 1) * k];
            let mut sum: Acc32 = 0;
            for kk in (0..full).step_by(4) {
                let a1 = pack_q15x2(a_row[kk] as i16, a_row[kk + 1] as i16);
                let a2 = pack_q15x2(a_row[kk + 2] as i16, a_row[kk + 3] as i16);
                let b1 = pack_q15x2(b_row[kk], b_row[kk + 1]);
                let b2 = pack_q15x2(b_row[kk + 2], b_row[kk + 3]);
                sum = smlad(a1, b1, sum);
                sum = smlad(a2, b2, sum);
            }
            for kk in full..k {
                sum += a_row[kk] as Acc32 * b_row[kk] as Acc32;
            }
            out[i * n + j] = saturate_q7(sum, out_shift);
        }
    }
    Ok(QMatrix {
        data: out,
        rows: m,
        cols: n,
        fmt: product_format(a.fmt, b.fmt, out_shift),
    })
}

/// `out = sat((a + b) >> shift)` element-wise, summed in 32 bits.
pub fn mat_add_into(a: &[Q7], b: &[Q7], shift: u32, out: &mut [Q7]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = saturate_q7(x as Acc32 + y as Acc32, shift);
    }
}

pub fn mat_add(a: &QMatrix, b: &QMatrix, out_shift: u32) -> Result<QMatrix> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    crate::qcore::check_shift(out_shift as i64, "mat_add")?;
    let mut out = vec![0; a.data.len()];
    mat_add_into(&a.data, &b.data, out_shift, &mut out);
    Ok(QMatrix {
        data: out,
        rows: a.rows,
        cols: a.cols,
        fmt: QFormat::saturating(a.fmt.n() - out_shift as i32),
    })
}
