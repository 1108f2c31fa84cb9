//! Quantized linear-algebra kernels.
//!
//! Every matrix-multiplication strategy and every worker count produces
//! bit-identical output; strategies only differ in memory access pattern.

mod conv;
mod matmul;

use std::str::FromStr;

pub use conv::{conv2d_hwc, conv2d_hwc_exec, ConvParams, ConvPartition};
pub use matmul::{
    mat_add, mat_add_into, mat_mult, mat_mult_exec, mat_mult_into, mat_mult_sign_extend_pairs, sdotsp4, transpose,
    transpose_into,
};

use crate::error::{Error, Result};
use crate::qcore::{QFormat, Q7};

/// Matrix-multiplication strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Row-by-column loop reading one element at a time from both operands.
    Naive,
    /// Transposes `b` first so both operands are walked contiguously.
    TransposedB,
    /// Transposed `b`, four int-8 operands packed per 32-bit word and a
    /// 4-lane dot product per word, with a scalar tail loop.
    PackedDot,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::TransposedB, Strategy::PackedDot];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::TransposedB => "transposed-b",
            Strategy::PackedDot => "packed-dot",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "naive" => Ok(Strategy::Naive),
            "transposed-b" | "trb" => Ok(Strategy::TransposedB),
            "packed-dot" | "simd" => Ok(Strategy::PackedDot),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// Row-major int-8 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMatrix {
    pub data: Vec<Q7>,
    pub rows: usize,
    pub cols: usize,
    pub fmt: QFormat,
}

impl QMatrix {
    pub fn new(data: Vec<Q7>, rows: usize, cols: usize, fmt: QFormat) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(QMatrix { data, rows, cols, fmt })
    }

    pub fn zeros(rows: usize, cols: usize, fmt: QFormat) -> Self {
        QMatrix {
            data: vec![0; rows * cols],
            rows,
            cols,
            fmt,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Q7 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[Q7] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// Int-8 feature map in height-width-channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub data: Vec<Q7>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub fmt: QFormat,
}

impl QTensor {
    pub fn new(data: Vec<Q7>, h: usize, w: usize, c: usize, fmt: QFormat) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "tensor {h}x{w}x{c} needs {} elements, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(QTensor { data, h, w, c, fmt })
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> Q7 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}
