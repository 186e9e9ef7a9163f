//! Hierarchical vector-quantized lossy compression for 2D scientific
//! floating-point fields.
//!
//! The pipeline: preprocessing (standardize, mask, cyclic pad, block
//! partition), a two-level convolutional encoder/decoder with EMA-learned
//! codebooks, canonical Huffman coding of the index streams, and an
//! error-bounded outlier pass that stores unpredictable values verbatim.

pub mod archive;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod model;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod vq;

pub use error::{HvqError, Result};
pub use tensor::Tensor;
