//! Lab-space image colorization with a GAN generator built around a
//! shifted-window color transformer.
//!
//! The crate is self-contained: [`tensor`] provides a small define-by-run
//! reverse-mode autodiff engine, and everything above it (Swin blocks, the
//! U-Net generator, the PatchGAN critic, losses, metrics, training) is built
//! on that engine.
//!
//! Module map:
//!
//! - [`colorspace`]: sRGB <-> CIELAB (D65) and the network-range normalization.
//! - [`tensor`]: tensors, the gradient tape, Adam, finite-difference checks.
//! - [`swin`]: window partition, cyclic shift, masked window attention, Swin blocks.
//! - [`model`]: generator, critic and the frozen perceptual backbone.
//! - [`losses`]: the four generator loss terms, the critic objective, clipping.
//! - [`metrics`]: PSNR, SSIM, colorfulness and delta-colorfulness.
//! - [`pipeline`]: configuration, datasets, training, checkpoints, evaluation.
//! - [`selftest`]: the fast invariant suite exposed by the CLI.

#![allow(clippy::unnecessary_cast)]

pub mod colorspace;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod selftest;
pub mod swin;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

/// Tensor element type: `f32`, or `f64` when built with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
