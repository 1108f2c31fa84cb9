//! On-disk formats.
//!
//! Models are a pretty-printed JSON manifest plus a raw little-endian blob.
//! The manifest records the layer hyper-parameters, Q-formats, shifts and
//! the byte range of every tensor in the blob. Saving is canonical, so a
//! loaded model saves back to identical bytes.

mod dataset;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, DatasetDtype, Samples, DATASET_HEADER_LEN, DATASET_MAGIC};

use crate::arch::{Architecture, InputShape, LayerSpec};
use crate::error::{Error, Result};
use crate::layers::{CapsShifts, QLayer, QLayerParams, QuantModel};
use crate::qcore::{check_shift, QFormat, Q7};
use crate::reference::{FloatLayer, FloatModel};

pub const FLOAT_TAG: &str = "capsnet-f32/v1";
pub const Q7_TAG: &str = "capsnet-q7/v1";

/// Byte range of one tensor inside the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FloatLayerEntry {
    #[serde(flatten)]
    spec: LayerSpec,
    weights: Segment,
    bias: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloatManifest {
    format: String,
    input: InputShape,
    layers: Vec<FloatLayerEntry>,
}

/// Scaling parameters as stored; shifts are wide so out-of-range values
/// reach validation instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ScalingEntry {
    Conv { bias_shift: i64, out_shift: i64 },
    Caps(CapsShiftsEntry),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CapsShiftsEntry {
    inputs_hat_shift: i64,
    caps_output_shift: Vec<i64>,
    agreement_mul_shift: Vec<i64>,
    agreement_add_shift: Vec<i64>,
    squash_i_qn: Vec<i64>,
    b_frac_bits: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QLayerEntry {
    #[serde(flatten)]
    spec: LayerSpec,
    weight_qn: i32,
    bias_qn: i32,
    scaling: ScalingEntry,
    weights: Segment,
    bias: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QManifest {
    format: String,
    input: InputShape,
    input_qn: i32,
    layers: Vec<QLayerEntry>,
}

/// Reads only the format tag, so a manifest of the wrong kind is reported
/// as such rather than as a missing field.
fn check_tag(manifest: &str, expected: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Tag {
        format: String,
    }
    let found = serde_json::from_str::<Tag>(manifest)?.format;
    if found != expected {
        return Err(Error::FormatTag {
            expected: expected.into(),
            found,
        });
    }
    Ok(())
}

fn to_text<T: Serialize>(manifest: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(manifest)?;
    s.push('\n');
    Ok(s)
}

/// Lays tensors out back to back and returns their segments.
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, data: impl IntoIterator<Item = u8>) -> Segment {
        let offset = self.bytes.len();
        self.bytes.extend(data);
        Segment {
            offset,
            len: self.bytes.len() - offset,
        }
    }
}

/// Checks every segment against the blob: within bounds, disjoint, and
/// covering it exactly.
fn check_segments(segments: &[(usize, Segment)], blob_len: usize) -> Result<()> {
    for &(layer, s) in segments {
        let end = s.offset.checked_add(s.len);
        if end.is_none_or(|e| e > blob_len) {
            return Err(Error::TruncatedBlob {
                layer,
                offset: s.offset,
                len: s.len,
                blob_len,
            });
        }
    }
    let mut sorted: Vec<_> = segments.iter().filter(|(_, s)| s.len > 0).copied().collect();
    sorted.sort_by_key(|(_, s)| s.offset);
    for pair in sorted.windows(2) {
        if pair[0].1.offset + pair[0].1.len > pair[1].1.offset {
            return Err(Error::OverlappingSegments { layer: pair[1].0 });
        }
    }
    let covered: usize = sorted.iter().map(|(_, s)| s.len).sum();
    if covered != blob_len {
        return Err(Error::BlobSize {
            expected: covered,
            actual: blob_len,
        });
    }
    Ok(())
}

fn check_len(layer: usize, what: &str, seg: Segment, count: usize, width: usize) -> Result<()> {
    if seg.len != count * width {
        return Err(Error::layer(
            layer,
            format!("{what} segment has {} bytes, expected {}", seg.len, count * width),
        ));
    }
    Ok(())
}

fn read_f32(blob: &[u8], seg: Segment) -> Vec<f32> {
    blob[seg.offset..seg.offset + seg.len]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn read_i8(blob: &[u8], seg: Segment) -> Vec<Q7> {
    blob[seg.offset..seg.offset + seg.len]
        .iter()
        .map(|&b| b as i8)
        .collect()
}

/// Serializes a float model to manifest text and blob bytes.
pub fn float_to_bytes(model: &FloatModel) -> Result<(String, Vec<u8>)> {
    let mut blob = BlobWriter { bytes: vec![] };
    let layers = model
        .arch
        .layers
        .iter()
        .zip(&model.layers)
        .map(|(spec, l)| FloatLayerEntry {
            spec: spec.clone(),
            weights: blob.push(l.weights.iter().flat_map(|v| v.to_le_bytes())),
            bias: blob.push(l.bias.iter().flat_map(|v| v.to_le_bytes())),
        })
        .collect();
    let manifest = FloatManifest {
        format: FLOAT_TAG.into(),
        input: model.arch.input,
        layers,
    };
    Ok((to_text(&manifest)?, blob.bytes))
}

pub fn float_from_bytes(manifest: &str, blob: &[u8]) -> Result<FloatModel> {
    check_tag(manifest, FLOAT_TAG)?;
    let m: FloatManifest = serde_json::from_str(manifest)?;
    let segments: Vec<_> = m
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| [(i, l.weights), (i, l.bias)])
        .collect();
    check_segments(&segments, blob.len())?;
    let arch = Architecture {
        input: m.input,
        layers: m.layers.iter().map(|l| l.spec.clone()).collect(),
    };
    let geometry = arch.geometry()?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for (index, (l, g)) in m.layers.iter().zip(&geometry).enumerate() {
        check_len(index, "weight", l.weights, g.weight_count, 4)?;
        check_len(index, "bias", l.bias, g.bias_count, 4)?;
        let weights = read_f32(blob, l.weights);
        let bias = read_f32(blob, l.bias);
        if let Some(k) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::layer(index, format!("non-finite parameter at index {k}")));
        }
        layers.push(FloatLayer { weights, bias });
    }
    FloatModel::new(arch, layers)
}

fn scaling_entry(p: &QLayerParams) -> ScalingEntry {
    let wide = |v: &[u32]| v.iter().map(|&x| x as i64).collect();
    match p {
        &QLayerParams::Conv { bias_shift, out_shift } => ScalingEntry::Conv {
            bias_shift: bias_shift as i64,
            out_shift: out_shift as i64,
        },
        QLayerParams::Caps(s) => ScalingEntry::Caps(CapsShiftsEntry {
            inputs_hat_shift: s.inputs_hat_shift as i64,
            caps_output_shift: wide(&s.caps_output_shift),
            agreement_mul_shift: wide(&s.agreement_mul_shift),
            agreement_add_shift: wide(&s.agreement_add_shift),
            squash_i_qn: wide(&s.squash_i_qn),
            b_frac_bits: s.b_frac_bits as i64,
        }),
    }
}

fn scaling_params(layer: usize, e: &ScalingEntry) -> Result<QLayerParams> {
    let tag = |e: Error| Error::layer(layer, e.to_string());
    let one = |v: i64, what: &str| check_shift(v, what).map_err(tag);
    let many = |v: &[i64], what: &str| v.iter().map(|&x| one(x, what)).collect::<Result<Vec<u32>>>();
    Ok(match e {
        &ScalingEntry::Conv { bias_shift, out_shift } => QLayerParams::Conv {
            bias_shift: one(bias_shift, "bias_shift")?,
            out_shift: one(out_shift, "out_shift")?,
        },
        ScalingEntry::Caps(s) => QLayerParams::Caps(CapsShifts {
            inputs_hat_shift: one(s.inputs_hat_shift, "inputs_hat_shift")?,
            caps_output_shift: many(&s.caps_output_shift, "caps_output_shift")?,
            agreement_mul_shift: many(&s.agreement_mul_shift, "agreement_mul_shift")?,
            agreement_add_shift: many(&s.agreement_add_shift, "agreement_add_shift")?,
            squash_i_qn: many(&s.squash_i_qn, "squash_i_qn")?,
            b_frac_bits: one(s.b_frac_bits, "b_frac_bits")?,
        }),
    })
}

/// Serializes a quantized model to manifest text and blob bytes.
pub fn quantized_to_bytes(model: &QuantModel) -> Result<(String, Vec<u8>)> {
    let mut blob = BlobWriter { bytes: vec![] };
    let layers = model
        .arch
        .layers
        .iter()
        .zip(&model.layers)
        .map(|(spec, l)| QLayerEntry {
            spec: spec.clone(),
            weight_qn: l.weight_fmt.n(),
            bias_qn: l.bias_fmt.n(),
            scaling: scaling_entry(&l.params),
            weights: blob.push(l.weights.iter().map(|&v| v as u8)),
            bias: blob.push(l.bias.iter().map(|&v| v as u8)),
        })
        .collect();
    let manifest = QManifest {
        format: Q7_TAG.into(),
        input: model.arch.input,
        input_qn: model.input_fmt.n(),
        layers,
    };
    Ok((to_text(&manifest)?, blob.bytes))
}

pub fn quantized_from_bytes(manifest: &str, blob: &[u8]) -> Result<QuantModel> {
    check_tag(manifest, Q7_TAG)?;
    let m: QManifest = serde_json::from_str(manifest)?;
    let segments: Vec<_> = m
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| [(i, l.weights), (i, l.bias)])
        .collect();
    check_segments(&segments, blob.len())?;
    let arch = Architecture {
        input: m.input,
        layers: m.layers.iter().map(|l| l.spec.clone()).collect(),
    };
    let geometry = arch.geometry()?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for (index, (l, g)) in m.layers.iter().zip(&geometry).enumerate() {
        check_len(index, "weight", l.weights, g.weight_count, 1)?;
        check_len(index, "bias", l.bias, g.bias_count, 1)?;
        let fmt = |n: i32| QFormat::new(n).map_err(|e| Error::layer(index, e.to_string()));
        layers.push(QLayer {
            weights: read_i8(blob, l.weights),
            bias: read_i8(blob, l.bias),
            weight_fmt: fmt(l.weight_qn)?,
            bias_fmt: fmt(l.bias_qn)?,
            params: scaling_params(index, &l.scaling)?,
        });
    }
    QuantModel::new(arch, QFormat::new(m.input_qn)?, layers)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_float_model(manifest: impl AsRef<Path>, blob: impl AsRef<Path>) -> Result<FloatModel> {
    float_from_bytes(&read_text(manifest.as_ref())?, &read_bytes(blob.as_ref())?)
}

pub fn save_float_model(model: &FloatModel, manifest: impl AsRef<Path>, blob: impl AsRef<Path>) -> Result<()> {
    let (text, bytes) = float_to_bytes(model)?;
    write(manifest.as_ref(), text.as_bytes())?;
    write(blob.as_ref(), &bytes)
}

pub fn load_quantized_model(manifest: impl AsRef<Path>, blob: impl AsRef<Path>) -> Result<QuantModel> {
    quantized_from_bytes(&read_text(manifest.as_ref())?, &read_bytes(blob.as_ref())?)
}

pub fn save_quantized_model(model: &QuantModel, manifest: impl AsRef<Path>, blob: impl AsRef<Path>) -> Result<()> {
    let (text, bytes) = quantized_to_bytes(model)?;
    write(manifest.as_ref(), text.as_bytes())?;
    write(blob.as_ref(), &bytes)
}
