//! Binary dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0   magic "CPDS"
//! 4   u32 sample count
//! 8   u16 h, u16 w, u16 c
//! 14  u8 dtype (0 = f32, 1 = i8)
//! 15  u8 reserved, must be 0
//! 16  samples, HWC, count * h * w * c values
//! ..  u8 label per sample
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::qcore::{dequantize_tensor, quantize_tensor, QFormat, Q7};

pub const DATASET_MAGIC: [u8; 4] = *b"CPDS";
pub const DATASET_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetDtype {
    F32,
    I8,
}

impl DatasetDtype {
    fn code(self) -> u8 {
        match self {
            DatasetDtype::F32 => 0,
            DatasetDtype::I8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DatasetDtype::F32),
            1 => Ok(DatasetDtype::I8),
            other => Err(Error::DatasetDtype(other)),
        }
    }

    fn width(self) -> u64 {
        match self {
            DatasetDtype::F32 => 4,
            DatasetDtype::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    F32(Vec<f32>),
    /// Already quantized; read as Q0.7 when a float view is needed.
    I8(Vec<Q7>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: u16,
    pub w: u16,
    pub c: u16,
    pub samples: Samples,
    pub labels: Vec<u8>,
}

struct Header {
    count: u32,
    h: u16,
    w: u16,
    c: u16,
    dtype: DatasetDtype,
}

impl Header {
    fn parse(b: &[u8; DATASET_HEADER_LEN]) -> Result<Self> {
        let magic = [b[0], b[1], b[2], b[3]];
        if magic != DATASET_MAGIC {
            return Err(Error::DatasetMagic(magic));
        }
        if b[15] != 0 {
            return Err(Error::Shape(format!("dataset reserved byte is {}, expected 0", b[15])));
        }
        Ok(Header {
            count: u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
            h: u16::from_le_bytes([b[8], b[9]]),
            w: u16::from_le_bytes([b[10], b[11]]),
            c: u16::from_le_bytes([b[12], b[13]]),
            dtype: DatasetDtype::from_code(b[14])?,
        })
    }

    /// Implied file size; wide enough that no header can overflow it.
    fn file_len(&self) -> u128 {
        let per = self.h as u128 * self.w as u128 * self.c as u128 * self.dtype.width() as u128;
        DATASET_HEADER_LEN as u128 + self.count as u128 * (per + 1)
    }

    fn check_len(&self, actual: u64) -> Result<()> {
        if self.file_len() != actual as u128 {
            return Err(Error::DatasetLength {
                expected: u64::try_from(self.file_len()).unwrap_or(u64::MAX),
                actual,
            });
        }
        Ok(())
    }
}

impl Dataset {
    pub fn new(h: u16, w: u16, c: u16, samples: Samples, labels: Vec<u8>) -> Result<Self> {
        let d = Dataset {
            h,
            w,
            c,
            samples,
            labels,
        };
        let values = match &d.samples {
            Samples::F32(v) => v.len(),
            Samples::I8(v) => v.len(),
        };
        if values != d.labels.len() * d.sample_len() {
            return Err(Error::Shape(format!(
                "dataset of {} samples of {}x{}x{} needs {} values, got {values}",
                d.labels.len(),
                h,
                w,
                c,
                d.labels.len() * d.sample_len()
            )));
        }
        if let Samples::F32(v) = &d.samples {
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.h as usize * self.w as usize * self.c as usize
    }

    pub fn dtype(&self) -> DatasetDtype {
        match self.samples {
            Samples::F32(_) => DatasetDtype::F32,
            Samples::I8(_) => DatasetDtype::I8,
        }
    }

    /// Sample `i` as floats.
    pub fn sample_f32(&self, i: usize) -> Vec<f32> {
        let r = i * self.sample_len()..(i + 1) * self.sample_len();
        match &self.samples {
            Samples::F32(v) => v[r].to_vec(),
            Samples::I8(v) => dequantize_tensor(&v[r], QFormat::Q0_7),
        }
    }

    /// Sample `i` in `fmt`; int-8 samples pass through unchanged.
    pub fn sample_q7(&self, i: usize, fmt: QFormat) -> Result<Vec<Q7>> {
        let r = i * self.sample_len()..(i + 1) * self.sample_len();
        match &self.samples {
            Samples::F32(v) => quantize_tensor(&v[r], fmt),
            Samples::I8(v) => Ok(v[r].to_vec()),
        }
    }

    pub fn all_f32(&self) -> Vec<Vec<f32>> {
        (0..self.len()).map(|i| self.sample_f32(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let count = u32::try_from(self.len()).expect("dataset count fits in u32");
        let mut out = Vec::with_capacity(DATASET_HEADER_LEN + self.len() * (self.sample_len() * 4 + 1));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        for d in [self.h, self.w, self.c] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.dtype().code());
        out.push(0);
        match &self.samples {
            Samples::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Samples::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head: &[u8; DATASET_HEADER_LEN] =
            bytes
                .get(..DATASET_HEADER_LEN)
                .and_then(|b| b.try_into().ok())
                .ok_or(Error::DatasetLength {
                    expected: DATASET_HEADER_LEN as u64,
                    actual: bytes.len() as u64,
                })?;
        let h = Header::parse(head)?;
        h.check_len(bytes.len() as u64)?;
        Self::from_body(&h, &bytes[DATASET_HEADER_LEN..])
    }

    fn from_body(h: &Header, body: &[u8]) -> Result<Self> {
        let values = h.count as usize * h.h as usize * h.w as usize * h.c as usize;
        let data_len = values * h.dtype.width() as usize;
        let samples = match h.dtype {
            DatasetDtype::F32 => Samples::F32(
                body[..data_len]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            DatasetDtype::I8 => Samples::I8(body[..data_len].iter().map(|&b| b as i8).collect()),
        };
        Dataset::new(h.h, h.w, h.c, samples, body[data_len..].to_vec())
    }

    /// Reads a dataset, checking the header against the file size before
    /// reading the body.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut f = std::fs::File::open(path).map_err(io)?;
        let actual = f.metadata().map_err(io)?.len();
        if actual < DATASET_HEADER_LEN as u64 {
            return Err(Error::DatasetLength {
                expected: DATASET_HEADER_LEN as u64,
                actual,
            });
        }
        let mut head = [0u8; DATASET_HEADER_LEN];
        f.read_exact(&mut head).map_err(io)?;
        let h = Header::parse(&head)?;
        h.check_len(actual)?;
        let mut body = Vec::with_capacity((actual - DATASET_HEADER_LEN as u64) as usize);
        f.read_to_end(&mut body).map_err(io)?;
        if body.len() as u64 + DATASET_HEADER_LEN as u64 != actual {
            return Err(Error::DatasetLength {
                expected: actual,
                actual: body.len() as u64 + DATASET_HEADER_LEN as u64,
            });
        }
        Self::from_body(&h, &body)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
