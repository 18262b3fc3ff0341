//! Differentiable multi-resolution tri-grid volume rendering and guided
//! scene optimization.
//!
//! The library is organized around a single scene representation — a pyramid
//! of tri-grids queried by summation — and the machinery to render it, to
//! differentiate the rendering back to the grid values and a latent code, and
//! to optimize it against multi-view targets or a pluggable guidance
//! provider.
//!
//! Module map:
//! - [`grid`]: tri-grid / pyramid storage and the differentiable feature query.
//! - [`camera`]: camera poses and pinhole ray generation.
//! - [`render`]: decoder, ToRGB, ray marching and compositing.
//! - [`tape`]: reverse-mode record of a render and its adjoint.
//! - [`optim`]: Adam with per-level learning-rate multipliers.
//! - [`gradcheck`]: finite-difference verification harness.
//! - [`synthesis`]: latent-to-pyramid generator and latent inversion.
//! - [`guidance`]: guidance-provider interface, score-distillation and
//!   multi-view refinement loops, binary wire protocol, remote client.
//! - [`fit`]: multi-view L2 fitting of a pyramid to posed images.
//! - [`analysis`]: power spectra, PSNR, marching-cubes extraction, and the
//!   grid-artifact ablation experiment.
//! - [`io`]: grid/weight/image file formats and the pipeline configuration.

pub mod analysis;
pub mod camera;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod grid;
pub mod guidance;
pub mod imagebuf;
pub mod io;
pub mod optim;
pub mod real;
pub mod render;
pub mod rng;
pub mod synthesis;
pub mod tape;

pub use error::{Error, Result};
