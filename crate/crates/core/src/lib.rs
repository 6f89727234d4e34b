//! Compositional scene GAN core.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (an allocator is required). File formats, the CLI
//! and the HTTP service live in the `compogan` crate.
//!
//! - [`grouping`]: class remap tables, label maps and class statistics
//! - [`autodiff`]: a small tape-based reverse-mode engine with support for
//!   higher-order gradients (needed by the R1 penalty)
//! - [`generator`]: mapping network, per-class local generators, softmax
//!   depth fusion and the renderer
//! - [`discriminator`]: two-branch image+mask discriminator with spectral
//!   normalization
//! - [`training`]: adversarial training step, EMA, optimizer, ablation runner
//! - [`explorer`]: style harvesting, PCA direction banks and edits
//! - [`metrics`]: Fréchet distance, mIoU, proxy feature extractor, segmenter
//! - [`toy`]: procedural street-scene corpus

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod discriminator;
pub mod error;
pub mod explorer;
pub mod generator;
pub mod grouping;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
