//! Grouped differential attention toolkit.
//!
//! A self-contained reference implementation of a decoder language model
//! whose attention splits heads into a large signal group and a small shared
//! noise group, subtracts the noise map from each signal map with a learned
//! weight, and supports progressive growth of trained checkpoints (uniform
//! and signal-biased) with output preservation you can audit.
//!
//! Layering, bottom to top:
//!
//! * [`tensor`]: dense row-major tensors over `f32`/`f64` and the small set
//!   of deterministic kernels everything else is built from.
//! * [`config`]: model/training hyperparameters, validation, and the
//!   `key = value` config/checkpoint-header format.
//! * [`attention`]: head partitioning, the differential map, forward passes,
//!   and the accounting helpers (allocation, parameter, flop tables).
//! * [`gradcheck`]: hand-derived reverse-mode gradients and the finite
//!   difference harness that audits them.
//! * [`checkpoint`] / [`lm`]: the binary checkpoint format and the full
//!   decoder model (byte-level tokenizer, loss, generation).
//! * [`growth`]: function-preserving width/head expansion of checkpoints.
//! * [`training`]: corpus ingestion, AdamW, the warmup/stable/decay schedule,
//!   and the training loop.
//!
//! All floating-point paths are deterministic: loops fix the summation order
//! and nothing is threaded, so identical inputs give bitwise identical
//! results on a given build.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod growth;
pub mod lm;
pub mod tensor;
pub mod training;

pub use error::{GdaError, Result};
pub use tensor::{Mask, Precision, Scalar, Tensor};
