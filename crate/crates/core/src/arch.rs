//! Network architecture descriptions shared by the float and int-8 models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ConvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryCapsSpec {
    pub capsules: usize,
    pub dimension: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsSpec {
    pub capsules: usize,
    pub dimension: usize,
    pub routings: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    PrimaryCaps(PrimaryCapsSpec),
    Caps(CapsSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::PrimaryCaps(_) => "primary_caps",
            LayerSpec::Caps(_) => "caps",
        }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { h: usize, w: usize, c: usize },
    Capsules { count: usize, dim: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { h, w, c } => h * w * c,
            Shape::Capsules { count, dim } => count * dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Image { h, w, c } => write!(f, "{h}x{w}x{c}"),
            Shape::Capsules { count, dim } => write!(f, "{count} capsules x {dim}"),
        }
    }
}

/// Resolved shapes and parameter counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub input: Shape,
    pub output: Shape,
    pub weight_count: usize,
    pub bias_count: usize,
    /// Convolution shape for conv and primary-capsule layers.
    pub conv: Option<ConvParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

fn conv_geometry(
    index: usize,
    input: Shape,
    out_c: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<ConvParams> {
    let Shape::Image { h, w, c } = input else {
        return Err(Error::layer(
            index,
            format!("convolution needs an image input, got {input}"),
        ));
    };
    let p = ConvParams {
        in_h: h,
        in_w: w,
        in_c: c,
        out_c,
        kernel_h: kernel[0],
        kernel_w: kernel[1],
        stride_h: stride[0],
        stride_w: stride[1],
        pad_h: padding[0],
        pad_w: padding[1],
        bias_shift: 0,
        out_shift: 0,
    };
    p.validate().map_err(|e| Error::layer(index, e.to_string()))?;
    Ok(p)
}

impl Architecture {
    /// Walks the layer chain, checking every shape transition.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let InputShape { h, w, c } = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("input shape {h}x{w}x{c} must be positive")));
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("architecture has no layers".into()));
        }
        let mut shape = Shape::Image { h, w, c };
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let g = match layer {
                LayerSpec::Conv(s) => {
                    if s.filters == 0 {
                        return Err(Error::layer(index, "conv needs at least one filter"));
                    }
                    let p = conv_geometry(index, shape, s.filters, s.kernel, s.stride, s.padding)?;
                    LayerGeometry {
                        input: shape,
                        output: Shape::Image {
                            h: p.out_h(),
                            w: p.out_w(),
                            c: p.out_c,
                        },
                        weight_count: p.weight_len(),
                        bias_count: p.out_c,
                        conv: Some(p),
                    }
                }
                LayerSpec::PrimaryCaps(s) => {
                    if s.capsules == 0 || s.dimension == 0 {
                        return Err(Error::layer(
                            index,
                            "primary capsules need positive count and dimension",
                        ));
                    }
                    let p = conv_geometry(index, shape, s.capsules * s.dimension, s.kernel, s.stride, s.padding)?;
                    LayerGeometry {
                        input: shape,
                        output: Shape::Capsules {
                            count: p.out_h() * p.out_w() * s.capsules,
                            dim: s.dimension,
                        },
                        weight_count: p.weight_len(),
                        bias_count: p.out_c,
                        conv: Some(p),
                    }
                }
                LayerSpec::Caps(s) => {
                    let Shape::Capsules { count, dim } = shape else {
                        return Err(Error::layer(
                            index,
                            format!("capsule layer needs capsule input, got {shape}"),
                        ));
                    };
                    if s.capsules == 0 || s.dimension == 0 || s.routings == 0 {
                        return Err(Error::layer(
                            index,
                            "capsule layer needs positive capsules, dimension and routings",
                        ));
                    }
                    if dim * s.dimension > 1 << 15 || count > 1 << 15 {
                        return Err(Error::layer(index, "capsule layer too large for a 32-bit accumulator"));
                    }
                    LayerGeometry {
                        input: shape,
                        output: Shape::Capsules {
                            count: s.capsules,
                            dim: s.dimension,
                        },
                        weight_count: s.capsules * count * s.dimension * dim,
                        bias_count: 0,
                        conv: None,
                    }
                }
            };
            shape = g.output;
            out.push(g);
        }
        if !matches!(shape, Shape::Capsules { .. }) {
            return Err(Error::layer(
                self.layers.len() - 1,
                "the last layer must produce capsules",
            ));
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.geometry()?.iter().map(|g| g.weight_count + g.bias_count).sum())
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.geometry()?.last().map(|g| g.output) {
            Some(Shape::Capsules { count, .. }) => Ok(count),
            _ => Err(Error::Shape("no capsule output".into())),
        }
    }

    /// One of the reference architectures: `mnist`, `smallnorb` or `cifar10`.
    pub fn preset(name: &str) -> Option<Architecture> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Some(Self::mnist()),
            "smallnorb" => Some(Self::smallnorb()),
            "cifar10" | "cifar-10" => Some(Self::cifar10()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["mnist", "smallnorb", "cifar10"];

    pub fn mnist() -> Architecture {
        Architecture {
            input: InputShape { h: 28, w: 28, c: 1 },
            layers: vec![conv(16, 7, 1), primary(16, 4, 7, 2), caps(10, 6, 3)],
        }
    }

    pub fn smallnorb() -> Architecture {
        Architecture {
            input: InputShape { h: 32, w: 32, c: 2 },
            layers: vec![conv(32, 7, 1), primary(16, 4, 7, 2), caps(5, 6, 3)],
        }
    }

    pub fn cifar10() -> Architecture {
        Architecture {
            input: InputShape { h: 32, w: 32, c: 3 },
            layers: vec![
                conv(32, 3, 1),
                conv(32, 3, 1),
                conv(64, 3, 2),
                conv(64, 3, 2),
                primary(16, 4, 3, 2),
                caps(10, 5, 3),
            ],
        }
    }
}

fn conv(filters: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        filters,
        kernel: [kernel; 2],
        stride: [stride; 2],
        padding: [0; 2],
        activation: Activation::Relu,
    })
}

fn primary(capsules: usize, dimension: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::PrimaryCaps(PrimaryCapsSpec {
        capsules,
        dimension,
        kernel: [kernel; 2],
        stride: [stride; 2],
        padding: [0; 2],
    })
}

fn caps(capsules: usize, dimension: usize, routings: usize) -> LayerSpec {
    LayerSpec::Caps(CapsSpec {
        capsules,
        dimension,
        routings,
    })
}
