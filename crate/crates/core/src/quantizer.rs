//! Post-training quantization.
//!
//! Activation ranges are measured by running the float reference over a
//! calibration set. Every tensor then gets a power-of-two format from its
//! max-abs value, and every kernel call gets the output shift that maps its
//! accumulator format onto the measured output format.

use std::collections::BTreeMap;

use crate::arch::LayerSpec;
use crate::error::{Error, Result};
use crate::layers::{CapsShifts, QLayer, QLayerParams, QuantModel};
use crate::qcore::{quantize_tensor, QFormat, MAX_SHIFT};
use crate::reference::{float_forward, FloatModel};
use crate::site::{Probe, SiteId, SiteKind};

/// Smallest format whose quantized maximum stays within 127.
///
/// Starts from `n = 7 - ceil(log2(max_abs))` and adds virtual fractional
/// bits while `max_abs * 2^(n+1) <= 127`. A zero maximum yields `n = 31`.
pub fn find_qformat(max_abs: f32) -> QFormat {
    let max = max_abs.abs() as f64;
    if max == 0.0 || !max.is_finite() {
        return QFormat::saturating(QFormat::MAX_FRAC_BITS);
    }
    let m = max.log2().ceil() as i32;
    let mut n = (7 - m).clamp(QFormat::MIN_FRAC_BITS, QFormat::MAX_FRAC_BITS);
    while n < QFormat::MAX_FRAC_BITS && max * ((n + 1) as f64).exp2() <= 127.0 {
        n += 1;
    }
    // exact powers of two land one step too high (1.0 * 2^7 = 128)
    while n > QFormat::MIN_FRAC_BITS && (max * (n as f64).exp2()).round() > 127.0 {
        n -= 1;
    }
    QFormat::saturating(n)
}

/// Running max-abs value of every observed site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationProfile {
    pub sites: BTreeMap<SiteId, f32>,
}

impl CalibrationProfile {
    pub fn record(&mut self, site: SiteId, values: &[f32]) {
        let m = values.iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
        let e = self.sites.entry(site).or_insert(0.0);
        *e = e.max(m);
    }

    /// Element-wise maximum of two profiles.
    pub fn merge(&mut self, other: &CalibrationProfile) {
        for (&site, &v) in &other.sites {
            let e = self.sites.entry(site).or_insert(0.0);
            *e = e.max(v);
        }
    }

    pub fn get(&self, site: SiteId) -> Option<f32> {
        self.sites.get(&site).copied()
    }

    fn require(&self, site: SiteId) -> Result<f32> {
        self.get(site)
            .ok_or_else(|| Error::layer(site.layer, format!("calibration profile has no entry for {site}")))
    }
}

impl Probe for CalibrationProfile {
    fn observe(&mut self, site: SiteId, values: &[f32]) {
        self.record(site, values);
    }
}

/// Records parameter ranges and runs every sample through the float model.
pub fn calibrate(model: &FloatModel, samples: &[Vec<f32>]) -> Result<CalibrationProfile> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut profile = CalibrationProfile::default();
    for (index, l) in model.layers.iter().enumerate() {
        profile.record(SiteId::new(index, SiteKind::Weights), &l.weights);
        if !l.bias.is_empty() {
            profile.record(SiteId::new(index, SiteKind::Bias), &l.bias);
        }
    }
    for s in samples {
        float_forward(model, s, &mut profile)?;
    }
    Ok(profile)
}

/// Formats and shifts for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub weight_fmt: QFormat,
    pub bias_fmt: QFormat,
    pub params: QLayerParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSchedule {
    pub input_fmt: QFormat,
    pub layers: Vec<LayerPlan>,
}

/// `out_s = f_ia + f_ib - f_o`.
pub fn output_shift(f_ia: i32, f_ib: i32, f_o: i32) -> i32 {
    f_ia + f_ib - f_o
}

/// `bias_s = f_ia + f_ib - f_b`.
pub fn bias_shift(f_ia: i32, f_ib: i32, f_b: i32) -> i32 {
    f_ia + f_ib - f_b
}

struct Planner {
    warnings: Vec<String>,
}

impl Planner {
    /// Clamps a computed shift into `[0, 31]`, additionally keeping the
    /// resulting format `acc - shift` within `[lo, hi]`.
    fn shift(&mut self, site: &str, acc: i32, target: i32, lo: i32, hi: i32) -> (u32, i32) {
        let raw = output_shift(acc, 0, target);
        let min = (acc - hi).max(0);
        let max = (acc - lo).min(MAX_SHIFT as i32);
        let s = raw.clamp(min, max.max(min));
        if s != raw {
            self.warnings
                .push(format!("{site}: computed shift {raw} clamped to {s}"));
        }
        (s as u32, acc - s)
    }

    fn fmt(&mut self, profile: &CalibrationProfile, site: SiteId) -> Result<QFormat> {
        let max = profile.require(site)?;
        if max == 0.0 {
            self.warnings.push(format!("{site}: constant zero, using Q-24.31"));
        }
        Ok(find_qformat(max))
    }
}

fn max_over_iters(profile: &CalibrationProfile, layer: usize, kinds: &[SiteKind], iters: usize) -> Result<f32> {
    let mut m = 0.0f32;
    for &kind in kinds {
        for r in 0..iters {
            m = m.max(profile.require(SiteId::at_iter(layer, kind, r))?);
        }
    }
    Ok(m)
}

/// Derives every format and shift of the model from a calibration profile.
/// Returns the schedule and a list of warnings for clamped shifts and
/// degenerate sites.
pub fn compute_shifts(profile: &CalibrationProfile, model: &FloatModel) -> Result<(ShiftSchedule, Vec<String>)> {
    let mut p = Planner { warnings: vec![] };
    let input_fmt = p.fmt(profile, SiteId::new(0, SiteKind::Input))?;
    let mut f_in = input_fmt.n();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (index, spec) in model.arch.layers.iter().enumerate() {
        let w = p.fmt(profile, SiteId::new(index, SiteKind::Weights))?;
        let acc = f_in + w.n();
        let site = |kind: SiteKind| SiteId::new(index, kind);
        let plan = match spec {
            LayerSpec::Conv(_) | LayerSpec::PrimaryCaps(_) => {
                let primary = matches!(spec, LayerSpec::PrimaryCaps(_));
                let b = p.fmt(profile, site(SiteKind::Bias))?;
                let target = p.fmt(profile, site(SiteKind::Output))?.n();
                // squash reads its input with 0..=31 fractional bits
                let (lo, hi) = if primary {
                    (0, 31)
                } else {
                    (QFormat::MIN_FRAC_BITS, QFormat::MAX_FRAC_BITS)
                };
                let (out_shift, f_o) = p.shift(&format!("{}.out_shift", site(SiteKind::Output)), acc, target, lo, hi);
                let (bs, f_b) = p.shift(
                    &format!("{}.bias_shift", site(SiteKind::Bias)),
                    acc,
                    b.n(),
                    QFormat::MIN_FRAC_BITS,
                    QFormat::MAX_FRAC_BITS,
                );
                f_in = if primary { 7 } else { f_o };
                LayerPlan {
                    weight_fmt: w,
                    bias_fmt: QFormat::saturating(f_b),
                    params: QLayerParams::Conv {
                        bias_shift: bs,
                        out_shift,
                    },
                }
            }
            LayerSpec::Caps(c) => {
                let routings = c.routings;
                let target = p.fmt(profile, site(SiteKind::UHat))?.n();
                let (ihs, f_uh) = p.shift(
                    &format!("{}.shift", site(SiteKind::UHat)),
                    acc,
                    target,
                    QFormat::MIN_FRAC_BITS,
                    QFormat::MAX_FRAC_BITS,
                );
                let mut shifts = CapsShifts::zeros(routings);
                shifts.inputs_hat_shift = ihs;
                for r in 0..routings {
                    let s_site = SiteId::at_iter(index, SiteKind::S, r);
                    let target = p.fmt(profile, s_site)?.n();
                    let (cos, f_s) = p.shift(&format!("{s_site}.shift"), 7 + f_uh, target, 0, 31);
                    shifts.caps_output_shift[r] = cos;
                    shifts.squash_i_qn[r] = f_s as u32;
                }
                if routings > 1 {
                    let max = max_over_iters(profile, index, &[SiteKind::Agreement, SiteKind::Logits], routings - 1)?;
                    let target = find_qformat(max).n().clamp(0, 31);
                    // logits and products share one format, so the add needs no shift
                    let (ams, f_b) = p.shift(&format!("layer{index}.agreement.shift"), f_uh + 7, target, 0, 31);
                    shifts.b_frac_bits = f_b as u32;
                    shifts.agreement_mul_shift = vec![ams; routings - 1];
                    shifts.agreement_add_shift = vec![0; routings - 1];
                }
                f_in = 7;
                LayerPlan {
                    weight_fmt: w,
                    bias_fmt: QFormat::Q0_7,
                    params: QLayerParams::Caps(shifts),
                }
            }
        };
        layers.push(plan);
    }
    Ok((ShiftSchedule { input_fmt, layers }, p.warnings))
}

/// Parameter and metadata sizes of a quantized model next to its float
/// original.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub parameters: usize,
    /// One byte per format or shift entry.
    pub metadata_bytes: usize,
}

impl Footprint {
    pub fn of(model: &QuantModel) -> Self {
        Footprint {
            parameters: model.parameter_count(),
            metadata_bytes: model.metadata_entries(),
        }
    }

    pub fn float_bytes(&self) -> usize {
        4 * self.parameters
    }

    pub fn int8_bytes(&self) -> usize {
        self.parameters + self.metadata_bytes
    }

    pub fn float_kb(&self) -> f64 {
        self.float_bytes() as f64 / 1000.0
    }

    pub fn int8_kb(&self) -> f64 {
        self.int8_bytes() as f64 / 1000.0
    }

    /// Saving relative to the float model, in percent.
    pub fn saving_percent(&self) -> f64 {
        100.0 * (1.0 - self.int8_bytes() as f64 / self.float_bytes() as f64)
    }

    /// Metadata size relative to the float model, in percent.
    pub fn metadata_percent(&self) -> f64 {
        100.0 * self.metadata_bytes as f64 / self.float_bytes() as f64
    }
}

/// Result of quantizing a float model.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub model: QuantModel,
    pub profile: CalibrationProfile,
    pub warnings: Vec<String>,
}

/// Applies a schedule: quantizes every weight and bias tensor.
pub fn apply_schedule(model: &FloatModel, schedule: &ShiftSchedule) -> Result<QuantModel> {
    let layers = model
        .layers
        .iter()
        .zip(&schedule.layers)
        .enumerate()
        .map(|(index, (l, plan))| {
            let tag = |e: Error| Error::layer(index, e.to_string());
            Ok(QLayer {
                weights: quantize_tensor(&l.weights, plan.weight_fmt).map_err(tag)?,
                bias: quantize_tensor(&l.bias, plan.bias_fmt).map_err(tag)?,
                weight_fmt: plan.weight_fmt,
                bias_fmt: plan.bias_fmt,
                params: plan.params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantModel::new(model.arch.clone(), schedule.input_fmt, layers)
}

/// Calibrates, computes shifts and quantizes in one step.
pub fn quantize_model(model: &FloatModel, samples: &[Vec<f32>]) -> Result<Quantized> {
    let profile = calibrate(model, samples)?;
    let (schedule, warnings) = compute_shifts(&profile, model)?;
    let model = apply_schedule(model, &schedule)?;
    Ok(Quantized {
        model,
        profile,
        warnings,
    })
}
