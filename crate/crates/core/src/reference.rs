//! Float32 reference forward pass.
//!
//! This is both the calibration engine for the quantizer and the oracle the
//! int-8 path is compared against. Accumulation order is fixed (row-major),
//! so results are reproducible run to run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Activation, Architecture, LayerSpec, Shape};
use crate::error::{Error, Result};
use crate::kernels::ConvParams;
use crate::site::{Probe, SiteId, SiteKind};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub arch: Architecture,
    pub layers: Vec<FloatLayer>,
}

impl FloatModel {
    pub fn new(arch: Architecture, layers: Vec<FloatLayer>) -> Result<Self> {
        let geometry = arch.geometry()?;
        if geometry.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} layer descriptions but {} parameter sets",
                geometry.len(),
                layers.len()
            )));
        }
        for (index, (g, l)) in geometry.iter().zip(&layers).enumerate() {
            if l.weights.len() != g.weight_count || l.bias.len() != g.bias_count {
                return Err(Error::layer(
                    index,
                    format!(
                        "expected {} weights and {} biases, got {} and {}",
                        g.weight_count,
                        g.bias_count,
                        l.weights.len(),
                        l.bias.len()
                    ),
                ));
            }
        }
        Ok(FloatModel { arch, layers })
    }

    /// Weights and biases drawn i.i.d. from `N(0, std^2)`.
    pub fn random(arch: Architecture, std: f32, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .geometry()?
            .iter()
            .map(|g| FloatLayer {
                weights: (0..g.weight_count).map(|_| normal.sample(&mut rng)).collect(),
                bias: (0..g.bias_count).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect();
        FloatModel::new(arch, layers)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn input_len(&self) -> usize {
        let i = self.arch.input;
        i.h * i.w * i.c
    }
}

/// `v = |s|^2 / (1 + |s|^2) * s / |s|`; the zero vector maps to zero.
pub fn float_squash(s: &[f32]) -> Vec<f32> {
    let sq: f32 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let norm = sq.sqrt();
    let scale = sq / (1.0 + sq) / norm;
    s.iter().map(|x| x * scale).collect()
}

pub fn float_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

/// Float HWC convolution with the same weight layout as the int-8 kernel.
pub fn float_conv(x: &[f32], w: &[f32], bias: &[f32], p: &ConvParams, relu: bool) -> Vec<f32> {
    let (oh, ow) = (p.out_h(), p.out_w());
    let mut out = vec![0.0; oh * ow * p.out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..p.out_c {
                let mut acc = 0.0f32;
                for ky in 0..p.kernel_h {
                    let iy = (oy * p.stride_h + ky) as isize - p.pad_h as isize;
                    if iy < 0 || iy >= p.in_h as isize {
                        continue;
                    }
                    for kx in 0..p.kernel_w {
                        let ix = (ox * p.stride_w + kx) as isize - p.pad_w as isize;
                        if ix < 0 || ix >= p.in_w as isize {
                            continue;
                        }
                        let xi = (iy as usize * p.in_w + ix as usize) * p.in_c;
                        let wi = ((o * p.kernel_h + ky) * p.kernel_w + kx) * p.in_c;
                        for ci in 0..p.in_c {
                            acc += w[wi + ci] * x[xi + ci];
                        }
                    }
                }
                acc += bias[o];
                out[(oy * ow + ox) * p.out_c + o] = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    out
}

/// Float dynamic routing. `input` is `[in_caps][in_dim]`, weights are
/// `[out_caps][in_caps][out_dim][in_dim]`; returns `[out_caps][out_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn float_capsule_layer(
    layer: usize,
    input: &[f32],
    weights: &[f32],
    in_caps: usize,
    in_dim: usize,
    out_caps: usize,
    out_dim: usize,
    routings: usize,
    probe: &mut dyn Probe,
) -> Vec<f32> {
    let mut u_hat = vec![0.0f32; out_caps * in_caps * out_dim];
    for j in 0..out_caps {
        for i in 0..in_caps {
            let u = &input[i * in_dim..(i + 1) * in_dim];
            for d in 0..out_dim {
                let wrow = &weights[((j * in_caps + i) * out_dim + d) * in_dim..][..in_dim];
                u_hat[(j * in_caps + i) * out_dim + d] = wrow.iter().zip(u).map(|(a, b)| a * b).sum();
            }
        }
    }
    probe.observe(SiteId::new(layer, SiteKind::UHat), &u_hat);

    let mut b = vec![0.0f32; out_caps * in_caps];
    let mut c = vec![0.0f32; out_caps * in_caps];
    let mut v = vec![0.0f32; out_caps * out_dim];
    for r in 0..routings {
        for i in 0..in_caps {
            let max = (0..out_caps)
                .map(|j| b[j * in_caps + i])
                .fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = (0..out_caps).map(|j| (b[j * in_caps + i] - max).exp()).sum();
            for j in 0..out_caps {
                c[j * in_caps + i] = (b[j * in_caps + i] - max).exp() / sum;
            }
        }
        let mut s = vec![0.0f32; out_caps * out_dim];
        for j in 0..out_caps {
            for i in 0..in_caps {
                let cij = c[j * in_caps + i];
                for d in 0..out_dim {
                    s[j * out_dim + d] += cij * u_hat[(j * in_caps + i) * out_dim + d];
                }
            }
        }
        probe.observe(SiteId::at_iter(layer, SiteKind::S, r), &s);
        for j in 0..out_caps {
            let sq = float_squash(&s[j * out_dim..(j + 1) * out_dim]);
            v[j * out_dim..(j + 1) * out_dim].copy_from_slice(&sq);
        }
        probe.observe(SiteId::at_iter(layer, SiteKind::V, r), &v);
        if r + 1 < routings {
            let mut agreement = vec![0.0f32; out_caps * in_caps];
            for j in 0..out_caps {
                let vj = &v[j * out_dim..(j + 1) * out_dim];
                for i in 0..in_caps {
                    let uh = &u_hat[(j * in_caps + i) * out_dim..][..out_dim];
                    agreement[j * in_caps + i] = uh.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
            }
            for (bij, a) in b.iter_mut().zip(&agreement) {
                *bij += a;
            }
            probe.observe(SiteId::at_iter(layer, SiteKind::Agreement, r), &agreement);
            probe.observe(SiteId::at_iter(layer, SiteKind::Logits, r), &b);
        }
    }
    v
}

/// Runs the float network and returns the final capsule lengths.
pub fn float_forward(model: &FloatModel, input: &[f32], probe: &mut dyn Probe) -> Result<Vec<f32>> {
    if input.len() != model.input_len() {
        return Err(Error::Shape(format!(
            "input has {} values, model expects {}",
            input.len(),
            model.input_len()
        )));
    }
    let geometry = model.arch.geometry()?;
    let mut x = input.to_vec();
    for (index, ((spec, g), params)) in model.arch.layers.iter().zip(&geometry).zip(&model.layers).enumerate() {
        probe.observe(SiteId::new(index, SiteKind::Input), &x);
        x = match spec {
            LayerSpec::Conv(s) => {
                let p = g.conv.expect("conv geometry");
                let y = float_conv(&x, &params.weights, &params.bias, &p, s.activation == Activation::Relu);
                probe.observe(SiteId::new(index, SiteKind::Output), &y);
                y
            }
            LayerSpec::PrimaryCaps(s) => {
                let p = g.conv.expect("conv geometry");
                let y = float_conv(&x, &params.weights, &params.bias, &p, false);
                probe.observe(SiteId::new(index, SiteKind::Output), &y);
                let v: Vec<f32> = y.chunks_exact(s.dimension).flat_map(float_squash).collect();
                probe.observe(SiteId::new(index, SiteKind::V), &v);
                v
            }
            LayerSpec::Caps(s) => {
                let Shape::Capsules { count, dim } = g.input else {
                    return Err(Error::layer(index, "capsule layer without capsule input"));
                };
                float_capsule_layer(
                    index,
                    &x,
                    &params.weights,
                    count,
                    dim,
                    s.capsules,
                    s.dimension,
                    s.routings,
                    probe,
                )
            }
        };
    }
    let Some(Shape::Capsules { dim, .. }) = geometry.last().map(|g| g.output) else {
        return Err(Error::Shape("network does not end in capsules".into()));
    };
    Ok(x.chunks_exact(dim).map(float_norm).collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
