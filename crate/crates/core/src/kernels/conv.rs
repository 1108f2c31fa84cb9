use std::ops::Range;

use super::matmul::sdotsp4;
use super::QTensor;
use crate::error::{Error, Result};
use crate::parallel::{for_each_block, partition};
use crate::qcore::{check_shift, QFormat, Q7, Q7_MAX, Q7_MIN};

/// Shape and scaling parameters of a 2-D HWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// Left shift applied to the int-8 bias before accumulation.
    pub bias_shift: u32,
    /// Right shift applied to the accumulator before saturation.
    pub out_shift: u32,
}

/// Axis along which a multi-worker convolution splits its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPartition {
    #[default]
    Height,
    Channel,
}

impl ConvParams {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_h - self.kernel_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_w - self.kernel_w) / self.stride_w + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_h,
            self.in_w,
            self.in_c,
            self.out_c,
            self.kernel_h,
            self.kernel_w,
            self.stride_h,
            self.stride_w,
        ];
        if dims.contains(&0) {
            return Err(Error::Shape(format!(
                "convolution parameters must be positive: {self:?}"
            )));
        }
        if self.kernel_h > self.in_h + 2 * self.pad_h || self.kernel_w > self.in_w + 2 * self.pad_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.in_h + 2 * self.pad_h,
                self.in_w + 2 * self.pad_w
            )));
        }
        check_shift(self.bias_shift as i64, "conv bias shift")?;
        check_shift(self.out_shift as i64, "conv output shift")?;
        Ok(())
    }

    /// Whether the paired-channel fast path applies.
    fn fast_path(&self) -> bool {
        self.in_c.is_multiple_of(4) && self.out_c.is_multiple_of(2)
    }
}

struct ConvArgs<'a> {
    x: &'a [Q7],
    w: &'a [Q7],
    bias: &'a [Q7],
    p: &'a ConvParams,
    relu: bool,
}

impl ConvArgs<'_> {
    #[inline(always)]
    fn finish(&self, acc: i64) -> Q7 {
        let v = (acc >> self.p.out_shift).clamp(Q7_MIN as i64, Q7_MAX as i64) as Q7;
        if self.relu {
            v.max(0)
        } else {
            v
        }
    }

    #[inline(always)]
    fn bias_term(&self, o: usize) -> i64 {
        (self.bias[o] as i64) << self.p.bias_shift
    }

    /// Input rows/cols covered by the kernel window at an output pixel,
    /// as (input coordinate, kernel coordinate) pairs inside the image.
    #[inline(always)]
    fn taps(&self, out: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> Range<usize> {
        let origin = (out * stride) as isize - pad as isize;
        let lo = (-origin).max(0) as usize;
        let hi = ((extent as isize - origin).min(kernel as isize)).max(0) as usize;
        lo..hi.max(lo)
    }

    /// Computes output rows `rows` and channels `chans` into `out`, laid
    /// out `[rows][out_w][chans]`.
    fn block(&self, rows: Range<usize>, chans: Range<usize>, out: &mut [Q7]) {
        let p = self.p;
        let (ow, nc) = (p.out_w(), chans.len());
        let paired = p.fast_path() && chans.start.is_multiple_of(2) && nc.is_multiple_of(2);
        for (r, oy) in rows.enumerate() {
            let ky_range = self.taps(oy, p.stride_h, p.pad_h, p.kernel_h, p.in_h);
            let iy0 = (oy * p.stride_h) as isize - p.pad_h as isize;
            for ox in 0..ow {
                let kx_range = self.taps(ox, p.stride_w, p.pad_w, p.kernel_w, p.in_w);
                let ix0 = (ox * p.stride_w) as isize - p.pad_w as isize;
                let base = (r * ow + ox) * nc;
                let pixel = |ky: usize, kx: usize| {
                    let iy = (iy0 + ky as isize) as usize;
                    let ix = (ix0 + kx as isize) as usize;
                    let at = (iy * p.in_w + ix) * p.in_c;
                    &self.x[at..at + p.in_c]
                };
                let wrow = |o: usize, ky: usize, kx: usize| {
                    let at = ((o * p.kernel_h + ky) * p.kernel_w + kx) * p.in_c;
                    &self.w[at..at + p.in_c]
                };
                if paired {
                    for (c, o) in chans.clone().step_by(2).enumerate() {
                        let mut acc0 = self.bias_term(o);
                        let mut acc1 = self.bias_term(o + 1);
                        for ky in ky_range.clone() {
                            for kx in kx_range.clone() {
                                let xs = pixel(ky, kx);
                                let (w0, w1) = (wrow(o, ky, kx), wrow(o + 1, ky, kx));
                                let (mut s0, mut s1) = (0i32, 0i32);
                                for ci in (0..p.in_c).step_by(4) {
                                    let xw = pack(&xs[ci..ci + 4]);
                                    s0 = sdotsp4(xw, pack(&w0[ci..ci + 4]), s0);
                                    s1 = sdotsp4(xw, pack(&w1[ci..ci + 4]), s1);
                                }
                                acc0 += s0 as i64;
                                acc1 += s1 as i64;
                            }
                        }
                        out[base + 2 * c] = self.finish(acc0);
                        out[base + 2 * c + 1] = self.finish(acc1);
                    }
                } else {
                    for (c, o) in chans.clone().enumerate() {
                        let mut acc = self.bias_term(o);
                        for ky in ky_range.clone() {
                            for kx in kx_range.clone() {
                                let s: i32 = pixel(ky, kx)
                                    .iter()
                                    .zip(wrow(o, ky, kx))
                                    .map(|(&a, &b)| a as i32 * b as i32)
                                    .sum();
                                acc += s as i64;
                            }
                        }
                        out[base + c] = self.finish(acc);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn pack(v: &[Q7]) -> u32 {
    u32::from_le_bytes([v[0] as u8, v[1] as u8, v[2] as u8, v[3] as u8])
}

fn check(input: &QTensor, weights: &[Q7], bias: &[Q7], p: &ConvParams) -> Result<()> {
    p.validate()?;
    if (input.h, input.w, input.c) != (p.in_h, p.in_w, p.in_c) {
        return Err(Error::DimensionMismatch {
            left: format!("input {}x{}x{}", input.h, input.w, input.c),
            right: format!("params {}x{}x{}", p.in_h, p.in_w, p.in_c),
        });
    }
    if weights.len() != p.weight_len() {
        return Err(Error::Shape(format!(
            "conv weights: expected {} values, got {}",
            p.weight_len(),
            weights.len()
        )));
    }
    if bias.len() != p.out_c {
        return Err(Error::Shape(format!(
            "conv bias: expected {} values, got {}",
            p.out_c,
            bias.len()
        )));
    }
    Ok(())
}

/// Int-8 convolution over an HWC input; weights are `[out_c][kh][kw][in_c]`.
///
/// Each output is `sat(((bias << bias_shift) + sum(w * x)) >> out_shift)`,
/// optionally clipped at zero. Padding reads as zero. The output format is
/// left to the caller via `out_fmt`.
pub fn conv2d_hwc(
    input: &QTensor,
    weights: &[Q7],
    bias: &[Q7],
    p: &ConvParams,
    relu: bool,
    out_fmt: QFormat,
) -> Result<QTensor> {
    conv2d_hwc_exec(input, weights, bias, p, relu, out_fmt, 1, ConvPartition::Height)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_hwc_exec(
    input: &QTensor,
    weights: &[Q7],
    bias: &[Q7],
    p: &ConvParams,
    relu: bool,
    out_fmt: QFormat,
    workers: usize,
    split: ConvPartition,
) -> Result<QTensor> {
    check(input, weights, bias, p)?;
    let args = ConvArgs {
        x: &input.data,
        w: weights,
        bias,
        p,
        relu,
    };
    let (oh, ow, oc) = (p.out_h(), p.out_w(), p.out_c);
    let mut out = vec![0; oh * ow * oc];
    match split {
        ConvPartition::Height => {
            for_each_block(&mut out, ow * oc, workers, |rows, chunk| args.block(rows, 0..oc, chunk));
        }
        ConvPartition::Channel => {
            let blocks = partition(oc, workers);
            let parts: Vec<(Range<usize>, Vec<Q7>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = blocks
                    .into_iter()
                    .map(|chans| {
                        let args = &args;
                        scope.spawn(move || {
                            let mut local = vec![0; oh * ow * chans.len()];
                            args.block(0..oh, chans.clone(), &mut local);
                            (chans, local)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("conv worker panicked"))
                    .collect()
            });
            for (chans, local) in parts {
                let nc = chans.len();
                for px in 0..oh * ow {
                    out[px * oc + chans.start..px * oc + chans.end].copy_from_slice(&local[px * nc..(px + 1) * nc]);
                }
            }
        }
    }
    QTensor::new(out, oh, ow, oc, out_fmt)
}
