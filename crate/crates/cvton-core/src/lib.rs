//! Two-stage virtual try-on: geometric garment warping followed by
//! context-conditioned image synthesis, desk-scale and fully testable.
//!
//! The pipeline has two trained stages and a fixed evaluation stack:
//!
//! 1. [`matcher`] — a body-part geometric matcher predicts thin-plate-spline
//!    parameters that warp a flat garment image onto the wearer's pose, and
//!    is trained with shape/appearance/feature losses against ground-truth
//!    garment regions.
//! 2. [`generator`] — a context-aware generator synthesizes the final image.
//!    Each residual block modulates its normalized activations with per-pixel
//!    affine parameters predicted from an "image context" stack (segmentation
//!    ⊕ garment-removed person ⊕ garment ⊕ warped garment). Training is
//!    adversarial with three discriminators ([`adversaries`]).
//! 3. [`metrics`] — a frozen convolutional feature extractor backs the
//!    perceptual losses plus FID/LPIPS evaluation, so results are
//!    reproducible without any external pretrained weights.
//!
//! Supporting modules: [`autodiff`] (reverse-mode differentiation over `f64`
//! arrays), [`tps`] (thin-plate-spline solver and sampling grids), [`nn`]
//! (layers, parameter store, Adam), [`data`] (procedural toy dataset),
//! [`train`] (training orchestration, checkpoints, inference) and [`cli`]
//! (the `cvton` command-line tool).
//!
//! Everything runs in `f64` on the CPU with explicit seeding: two runs with
//! the same seed produce identical loss curves, checkpoints and metrics.

pub mod adversaries;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tps;
pub mod train;

pub use error::{Error, Result};
