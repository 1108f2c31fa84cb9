//! Scalar brute-force oracles.
//!
//! Written independently of the library kernels: 64-bit accumulators,
//! floor division instead of shifts, plain nested loops, no packing.

#![allow(dead_code, clippy::needless_range_loop)]

/// `clamp(floor(acc / 2^shift), -128, 127)`.
pub fn requant(acc: i64, shift: u32) -> i8 {
    acc.div_euclid(1i64 << shift).clamp(-128, 127) as i8
}

/// `[m x k] * [k x n]`, row-major.
pub fn matmul(a: &[i8], b: &[i8], m: usize, k: usize, n: usize, shift: u32) -> Vec<i8> {
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0i64;
            for t in 0..k {
                acc += a[r * k + t] as i64 * b[t * n + c] as i64;
            }
            out.push(requant(acc, shift));
        }
    }
    out
}

pub struct Conv {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub bias_shift: u32,
    pub out_shift: u32,
    pub relu: bool,
}

/// Six nested loops over (oy, ox, o, ky, kx, ci); HWC input,
/// `[o][ky][kx][ci]` weights.
pub fn conv(c: &Conv, x: &[i8], w: &[i8], bias: &[i8]) -> Vec<i8> {
    let oh = (c.in_h + 2 * c.p_h - c.k_h) / c.s_h + 1;
    let ow = (c.in_w + 2 * c.p_w - c.k_w) / c.s_w + 1;
    let mut out = vec![0i8; oh * ow * c.out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..c.out_c {
                let mut acc = bias[o] as i64 * (1i64 << c.bias_shift);
                for ky in 0..c.k_h {
                    for kx in 0..c.k_w {
                        for ci in 0..c.in_c {
                            let iy = (oy * c.s_h + ky) as i64 - c.p_h as i64;
                            let ix = (ox * c.s_w + kx) as i64 - c.p_w as i64;
                            if iy < 0 || ix < 0 || iy >= c.in_h as i64 || ix >= c.in_w as i64 {
                                continue;
                            }
                            let xv = x[(iy as usize * c.in_w + ix as usize) * c.in_c + ci] as i64;
                            let wv = w[((o * c.k_h + ky) * c.k_w + kx) * c.in_c + ci] as i64;
                            acc += xv * wv;
                        }
                    }
                }
                let mut v = requant(acc, c.out_shift);
                if c.relu && v < 0 {
                    v = 0;
                }
                out[(oy * ow + ox) * c.out_c + o] = v;
            }
        }
    }
    out
}

/// Largest `r` with `r * r <= x`, by bisection.
pub fn floor_sqrt(x: u64) -> u64 {
    let (mut lo, mut hi) = (0u64, 1u64 << 32);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if mid * mid <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Integer squash of one vector, output in Q0.7.
pub fn squash(s: &[i8], i_qn: u32) -> Vec<i8> {
    let sq: i64 = s.iter().map(|&v| v as i64 * v as i64).sum();
    let norm = floor_sqrt(sq as u64) as i64;
    let scale = if i_qn <= 7 {
        norm * (1i64 << (7 - i_qn))
    } else {
        norm.div_euclid(1i64 << (i_qn - 7))
    };
    let denom = (1i64 << i_qn) + sq.div_euclid(1i64 << i_qn);
    // truncating division
    s.iter()
        .map(|&v| ((v as i64 * scale) / denom).clamp(-128, 127) as i8)
        .collect()
}

/// Base-2 integer softmax of one group, output in Q0.7.
pub fn softmax(x: &[i8], frac: u32) -> Vec<i8> {
    let max = *x.iter().max().unwrap() as i64;
    let e: Vec<i64> = x
        .iter()
        .map(|&v| {
            let d = (max - v as i64).div_euclid(1i64 << frac).min(30);
            (1i64 << 15) / (1i64 << d)
        })
        .collect();
    let sum: i64 = e.iter().sum();
    e.iter().map(|&v| (v * 128 / sum).clamp(0, 127) as i8).collect()
}

pub struct Routing<'a> {
    pub in_caps: usize,
    pub in_dim: usize,
    pub out_caps: usize,
    pub out_dim: usize,
    pub routings: usize,
    /// `[j][i][d][k]`.
    pub w: &'a [i8],
    pub inputs_hat_shift: u32,
    pub caps_output_shift: &'a [u32],
    pub agreement_mul_shift: &'a [u32],
    pub agreement_add_shift: &'a [u32],
    pub squash_i_qn: &'a [u32],
    pub b_frac_bits: u32,
}

/// Dynamic routing written out as nested loops, indexed `[j][i]`.
pub fn routing(r: &Routing, u: &[i8]) -> Vec<i8> {
    let (ni, nj, di, dj) = (r.in_caps, r.out_caps, r.in_dim, r.out_dim);
    let mut u_hat = vec![vec![vec![0i8; dj]; ni]; nj];
    for j in 0..nj {
        for i in 0..ni {
            for d in 0..dj {
                let mut acc = 0i64;
                for k in 0..di {
                    acc += r.w[((j * ni + i) * dj + d) * di + k] as i64 * u[i * di + k] as i64;
                }
                u_hat[j][i][d] = requant(acc, r.inputs_hat_shift);
            }
        }
    }
    let mut b = vec![vec![0i8; ni]; nj];
    let mut v = vec![vec![0i8; dj]; nj];
    for it in 0..r.routings {
        let mut c = vec![vec![0i8; ni]; nj];
        for i in 0..ni {
            let column: Vec<i8> = (0..nj).map(|j| b[j][i]).collect();
            let sm = softmax(&column, r.b_frac_bits);
            for j in 0..nj {
                c[j][i] = sm[j];
            }
        }
        for j in 0..nj {
            let mut s = vec![0i8; dj];
            for d in 0..dj {
                let mut acc = 0i64;
                for i in 0..ni {
                    acc += c[j][i] as i64 * u_hat[j][i][d] as i64;
                }
                s[d] = requant(acc, r.caps_output_shift[it]);
            }
            v[j] = squash(&s, r.squash_i_qn[it]);
        }
        if it + 1 < r.routings {
            for j in 0..nj {
                for i in 0..ni {
                    let mut acc = 0i64;
                    for d in 0..dj {
                        acc += u_hat[j][i][d] as i64 * v[j][d] as i64;
                    }
                    let dot = requant(acc, r.agreement_mul_shift[it]);
                    b[j][i] = requant(b[j][i] as i64 + dot as i64, r.agreement_add_shift[it]);
                }
            }
        }
    }
    v.concat()
}
