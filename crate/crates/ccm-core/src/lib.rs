//! Conditional consistency models for paired image-to-image translation.
//!
//! A self-contained CPU toolkit: a tensor engine with reverse-mode autodiff,
//! noise schedules, a small conditional U-Net, consistency training with a
//! frozen-teacher objective, single-step conditional sampling, synthetic
//! paired datasets, and full-reference image metrics (PSNR/SSIM).
//!
//! Everything is deterministic given a seed. Batch-level loops (training
//! loss, sampling, metrics, data synthesis) run data-parallel when the
//! `parallel` feature is enabled and a sequential fallback otherwise; both
//! paths produce bitwise-identical results because per-item work is
//! independently seeded and reductions happen in index order.

pub mod checkpoint;
pub mod consistency;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod sampling;
pub mod schedule;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor};
