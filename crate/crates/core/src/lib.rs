//! Int-8 capsule network inference.
//!
//! Fixed-point kernels (matrix multiplication, HWC convolution, squash,
//! softmax, integer square root), dynamic-routing capsule layers, a float
//! reference model, a post-training quantizer and the on-disk formats that
//! connect them.

pub mod activations;
pub mod arch;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod model_io;
pub mod parallel;
pub mod qcore;
pub mod quantizer;
pub mod reference;
pub mod site;

pub use error::{Error, Result};
