//! Quantized model container and the sequential forward pass.

use crate::activations::{squash_rows, vector_norm_q};
use crate::arch::{Activation, Architecture, LayerGeometry, LayerSpec, Shape};
use crate::error::{Error, Result};
use crate::kernels::{conv2d_hwc_exec, ConvParams, QMatrix, QTensor};
use crate::parallel::ExecConfig;
use crate::qcore::{check_shift, dequantize_tensor, quantize_tensor, QFormat, Q7};
use crate::reference::argmax;
use crate::site::{Probe, SiteId, SiteKind};

use super::capsule::{capsule_layer_q7_observed, CapsLayerDesc, CapsShifts};

/// A primary capsule layer: convolution without ReLU, reshape, squash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimaryCapsDesc {
    pub conv: ConvParams,
    pub num_caps: usize,
    pub caps_dim: usize,
    /// Fractional bits of the convolution output fed to squash.
    pub i_qn: u32,
}

impl PrimaryCapsDesc {
    pub fn validate(&self) -> Result<()> {
        if self.num_caps == 0 || self.caps_dim == 0 {
            return Err(Error::Shape(
                "primary capsules need positive count and dimension".into(),
            ));
        }
        if self.conv.out_c != self.num_caps * self.caps_dim {
            return Err(Error::Shape(format!(
                "primary capsules: conv has {} channels, expected {}x{}",
                self.conv.out_c, self.num_caps, self.caps_dim
            )));
        }
        check_shift(self.i_qn as i64, "primary squash i_qn")?;
        self.conv.validate()
    }
}

fn primary_capsule_parts(
    input: &QTensor,
    desc: &PrimaryCapsDesc,
    weights: &[Q7],
    bias: &[Q7],
    exec: &ExecConfig,
) -> Result<(QTensor, QMatrix)> {
    desc.validate()?;
    let pre_fmt = QFormat::new(desc.i_qn as i32)?;
    let y = conv2d_hwc_exec(
        input,
        weights,
        bias,
        &desc.conv,
        false,
        pre_fmt,
        exec.workers,
        exec.conv_partition,
    )?;
    let rows = y.data.len() / desc.caps_dim;
    let mut v = vec![0; y.data.len()];
    squash_rows(&y.data, desc.caps_dim, desc.i_qn, exec.workers, &mut v);
    let v = QMatrix::new(v, rows, desc.caps_dim, QFormat::Q0_7)?;
    Ok((y, v))
}

/// Primary capsule layer; returns `[out_h * out_w * num_caps][caps_dim]` in Q0.7.
pub fn primary_capsule_q7(
    input: &QTensor,
    desc: &PrimaryCapsDesc,
    weights: &[Q7],
    bias: &[Q7],
    exec: &ExecConfig,
) -> Result<QMatrix> {
    Ok(primary_capsule_parts(input, desc, weights, bias, exec)?.1)
}

/// Per-layer scaling parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QLayerParams {
    /// Convolution or primary capsule layer.
    Conv {
        bias_shift: u32,
        out_shift: u32,
    },
    Caps(CapsShifts),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QLayer {
    pub weights: Vec<Q7>,
    pub bias: Vec<Q7>,
    pub weight_fmt: QFormat,
    pub bias_fmt: QFormat,
    pub params: QLayerParams,
}

impl QLayer {
    /// Number of scalar format/shift entries this layer stores.
    pub fn metadata_entries(&self) -> usize {
        match &self.params {
            QLayerParams::Conv { .. } => 4,
            QLayerParams::Caps(s) => 1 + s.entry_count(),
        }
    }
}

/// Q-formats of the tensors entering and leaving one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationFormats {
    pub input: QFormat,
    /// Accumulator-derived format before squash (primary capsules) or the
    /// prediction-vector format (capsule layers); equals `output` for conv.
    pub inner: QFormat,
    pub output: QFormat,
}

/// A fully quantized network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantModel {
    pub arch: Architecture,
    pub input_fmt: QFormat,
    pub layers: Vec<QLayer>,
}

fn derived(index: usize, n: i32) -> Result<QFormat> {
    QFormat::new(n).map_err(|e| Error::layer(index, e.to_string()))
}

impl QuantModel {
    pub fn new(arch: Architecture, input_fmt: QFormat, layers: Vec<QLayer>) -> Result<Self> {
        let m = QuantModel {
            arch,
            input_fmt,
            layers,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks shapes, parameter counts, shift ranges and the format chain.
    pub fn validate(&self) -> Result<()> {
        self.formats().map(|_| ())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Scaling metadata entries: one byte each on a target device.
    pub fn metadata_entries(&self) -> usize {
        1 + self.layers.iter().map(QLayer::metadata_entries).sum::<usize>()
    }

    /// Resolves the activation formats of every layer.
    pub fn formats(&self) -> Result<Vec<ActivationFormats>> {
        let geometry = self.arch.geometry()?;
        if geometry.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer descriptions but {} parameter sets",
                geometry.len(),
                self.layers.len()
            )));
        }
        let mut fmt = self.input_fmt;
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, ((spec, g), l)) in self.arch.layers.iter().zip(&geometry).zip(&self.layers).enumerate() {
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
            let acc = fmt.n() + l.weight_fmt.n();
            let f = match (spec, &l.params) {
                (LayerSpec::Conv(_), &QLayerParams::Conv { bias_shift, out_shift }) => {
                    check_conv_shifts(index, bias_shift, out_shift)?;
                    let o = derived(index, acc - out_shift as i32)?;
                    ActivationFormats {
                        input: fmt,
                        inner: o,
                        output: o,
                    }
                }
                (LayerSpec::PrimaryCaps(_), &QLayerParams::Conv { bias_shift, out_shift }) => {
                    check_conv_shifts(index, bias_shift, out_shift)?;
                    let pre = acc - out_shift as i32;
                    if !(0..=31).contains(&pre) {
                        return Err(Error::layer(
                            index,
                            format!("squash input needs 0..=31 fractional bits, got {pre}"),
                        ));
                    }
                    ActivationFormats {
                        input: fmt,
                        inner: derived(index, pre)?,
                        output: QFormat::Q0_7,
                    }
                }
                (LayerSpec::Caps(s), QLayerParams::Caps(shifts)) => {
                    shifts
                        .validate(s.routings)
                        .map_err(|e| Error::layer(index, e.to_string()))?;
                    ActivationFormats {
                        input: fmt,
                        inner: derived(index, acc - shifts.inputs_hat_shift as i32)?,
                        output: QFormat::Q0_7,
                    }
                }
                _ => {
                    return Err(Error::layer(
                        index,
                        format!("scaling parameters do not match layer kind {}", spec.kind()),
                    ))
                }
            };
            fmt = f.output;
            out.push(f);
        }
        Ok(out)
    }

    /// Quantizes a float HWC image to the model's input format.
    pub fn quantize_input(&self, input: &[f32]) -> Result<QTensor> {
        let s = self.arch.input;
        QTensor::new(quantize_tensor(input, self.input_fmt)?, s.h, s.w, s.c, self.input_fmt)
    }

    pub fn num_classes(&self) -> Result<usize> {
        self.arch.num_classes()
    }
}

fn check_conv_shifts(index: usize, bias_shift: u32, out_shift: u32) -> Result<()> {
    check_shift(bias_shift as i64, "bias_shift").map_err(|e| Error::layer(index, e.to_string()))?;
    check_shift(out_shift as i64, "out_shift").map_err(|e| Error::layer(index, e.to_string()))?;
    Ok(())
}

fn conv_params(g: &LayerGeometry, bias_shift: u32, out_shift: u32) -> ConvParams {
    ConvParams {
        bias_shift,
        out_shift,
        ..g.conv.expect("conv geometry")
    }
}

struct Observer<'a> {
    probe: Option<&'a mut dyn Probe>,
}

impl Observer<'_> {
    fn emit(&mut self, site: SiteId, q: &[Q7], fmt: QFormat) {
        if let Some(p) = self.probe.as_deref_mut() {
            p.observe(site, &dequantize_tensor(q, fmt));
        }
    }
}

fn run(model: &QuantModel, input: &QTensor, exec: &ExecConfig, mut obs: Observer<'_>) -> Result<Vec<u32>> {
    let s = model.arch.input;
    if (input.h, input.w, input.c) != (s.h, s.w, s.c) {
        return Err(Error::Shape(format!(
            "input is {}x{}x{}, model expects {}x{}x{}",
            input.h, input.w, input.c, s.h, s.w, s.c
        )));
    }
    let geometry = model.arch.geometry()?;
    let formats = model.formats()?;
    let mut image = input.clone();
    image.fmt = model.input_fmt;
    let mut caps: Option<QMatrix> = None;
    for (index, spec) in model.arch.layers.iter().enumerate() {
        let (g, f, l) = (&geometry[index], formats[index], &model.layers[index]);
        match (spec, &l.params) {
            (LayerSpec::Conv(c), &QLayerParams::Conv { bias_shift, out_shift }) => {
                obs.emit(SiteId::new(index, SiteKind::Input), &image.data, f.input);
                let p = conv_params(g, bias_shift, out_shift);
                let relu = c.activation == Activation::Relu;
                image = conv2d_hwc_exec(
                    &image,
                    &l.weights,
                    &l.bias,
                    &p,
                    relu,
                    f.output,
                    exec.workers,
                    exec.conv_partition,
                )?;
                obs.emit(SiteId::new(index, SiteKind::Output), &image.data, f.output);
            }
            (LayerSpec::PrimaryCaps(c), &QLayerParams::Conv { bias_shift, out_shift }) => {
                obs.emit(SiteId::new(index, SiteKind::Input), &image.data, f.input);
                let desc = PrimaryCapsDesc {
                    conv: conv_params(g, bias_shift, out_shift),
                    num_caps: c.capsules,
                    caps_dim: c.dimension,
                    i_qn: f.inner.n() as u32,
                };
                let (pre, v) = primary_capsule_parts(&image, &desc, &l.weights, &l.bias, exec)?;
                obs.emit(SiteId::new(index, SiteKind::Output), &pre.data, f.inner);
                obs.emit(SiteId::new(index, SiteKind::V), &v.data, QFormat::Q0_7);
                caps = Some(v);
            }
            (LayerSpec::Caps(c), QLayerParams::Caps(shifts)) => {
                let Shape::Capsules { count, dim } = g.input else {
                    return Err(Error::layer(index, "capsule layer without capsule input"));
                };
                let x = caps
                    .take()
                    .ok_or_else(|| Error::layer(index, "capsule layer without capsule input"))?;
                obs.emit(SiteId::new(index, SiteKind::Input), &x.data, f.input);
                let desc = CapsLayerDesc {
                    in_caps: count,
                    in_dim: dim,
                    out_caps: c.capsules,
                    out_dim: c.dimension,
                    num_routings: c.routings,
                    weights: l.weights.clone(),
                    shifts: shifts.clone(),
                };
                let uh = f.inner.n();
                let v = if obs.probe.is_some() {
                    capsule_layer_q7_observed(&x, &desc, exec, &mut |kind, iter, data| {
                        let n = match (kind, iter) {
                            (SiteKind::UHat, _) => uh,
                            (SiteKind::S, Some(r)) => 7 + uh - shifts.caps_output_shift[r] as i32,
                            (SiteKind::Agreement, Some(r)) => uh + 7 - shifts.agreement_mul_shift[r] as i32,
                            (SiteKind::Logits, _) => shifts.b_frac_bits as i32,
                            _ => 7,
                        };
                        let site = SiteId {
                            layer: index,
                            kind,
                            iter,
                        };
                        let fmt = QFormat::saturating(n);
                        if let Some(p) = obs.probe.as_deref_mut() {
                            p.observe(site, &dequantize_tensor(data, fmt));
                        }
                    })?
                } else {
                    capsule_layer_q7_observed(&x, &desc, exec, &mut |_, _, _| {})?
                };
                caps = Some(v);
            }
            _ => return Err(Error::layer(index, "scaling parameters do not match layer kind")),
        }
    }
    let v = caps.ok_or_else(|| Error::Invariant("network produced no capsules".into()))?;
    Ok((0..v.rows).map(|j| vector_norm_q(v.row(j)).0).collect())
}

/// Runs the network; returns the integer length of every output capsule
/// (Q0.7 units, so at most 128).
pub fn forward(model: &QuantModel, input: &QTensor, exec: &ExecConfig) -> Result<Vec<u32>> {
    run(model, input, exec, Observer { probe: None })
}

/// Like [`forward`], also reporting dequantized intermediates to `probe`
/// under the same site names as the float reference.
pub fn forward_traced(
    model: &QuantModel,
    input: &QTensor,
    exec: &ExecConfig,
    probe: &mut dyn Probe,
) -> Result<Vec<u32>> {
    run(model, input, exec, Observer { probe: Some(probe) })
}

/// Predicted class: the longest output capsule, lowest index on ties.
pub fn predict(scores: &[u32]) -> usize {
    argmax(scores)
}

/// Converts integer capsule lengths to real lengths.
pub fn scores_to_f32(scores: &[u32]) -> Vec<f32> {
    scores.iter().map(|&s| s as f32 / 128.0).collect()
}
