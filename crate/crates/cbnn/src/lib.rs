//! Compact binarized neural networks.
//!
//! The library covers the full pipeline for shrinking a binarized CNN through
//! bit-level input analysis:
//!
//! - [`bitslice`]: lossless conversion of integer images into per-bit binary
//!   channel planes, plus slice randomization and pruning.
//! - [`tensor`]: dense tensors and bit-packed {-1,+1} matrices with
//!   XNOR-popcount GEMM kernels.
//! - [`network`]: layer/architecture descriptors, packed forward inference and
//!   the analytic network-size / GOPs cost model.
//! - [`training`]: binary-constrained training with straight-through
//!   gradients, reference-weight clipping and an Adam loop.
//! - [`sensitivity`]: post-training per-slice and stacked-slice error
//!   measurements under random-slice substitution, and prunable-set selection.
//! - [`rebuild`]: compact-architecture derivation, retraining and compression
//!   reporting.
//! - [`data`]: CIFAR-10 binary format loading and a synthetic
//!   bit-significance task for small-scale end-to-end runs.
//! - [`checkpoint`] and [`cli`]: model serialization and the pipeline driver
//!   behind the `cbnn` binary.
//!
//! See the crate examples for runnable entry points into each capability.

pub mod bench;
pub mod bitslice;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod network;
pub mod rebuild;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
