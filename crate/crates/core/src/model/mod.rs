//! Generator, critic and the frozen perceptual backbone.
//!
//! Weights live in [`ParamStore`]s under stable dotted names; the network
//! structs only carry hyper-parameters and know how to lay out and run them.

mod backbone;
mod critic;
mod generator;

use crate::Real;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

pub use backbone::Backbone;
pub use critic::Critic;
pub use generator::{BottleneckTrace, Generator, GeneratorOutput, ModelConfig};

/// Which parts of the bottleneck are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Color encoder, fusion conv and both Swin blocks.
    #[default]
    Full,
    /// Plain U-Net with injected backbone features.
    Unet,
    /// Fusion conv over encoder features plus the Swin blocks.
    NoColorEncoder,
    /// Color encoder and fusion conv, no Swin blocks.
    NoColorTransformer,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::Unet,
        Ablation::NoColorEncoder,
        Ablation::NoColorTransformer,
    ];

    pub fn has_color_encoder(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoColorTransformer)
    }

    pub fn has_fusion(self) -> bool {
        self != Ablation::Unet
    }

    pub fn has_transformer(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoColorEncoder)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Unet => "unet",
            Ablation::NoColorEncoder => "no_color_encoder",
            Ablation::NoColorTransformer => "no_color_transformer",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "ablation: unknown value `{s}` (expected full, unet, no_color_encoder or no_color_transformer)"
                ))
            })
    }
}

/// Convolution weight `[cout, cin, k, k]` ~ N(0, gain^2 / fan_in), zero bias.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: Real,
    rng: &mut impl Rng,
) {
    let std = gain / ((cin * k * k) as Real).sqrt();
    let normal = Normal::new(0.0 as Real, std).expect("valid std");
    store.insert(
        format!("{name}.weight"),
        Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(rng)),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn conv_shapes(
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> [(String, Vec<usize>); 2] {
    [
        (format!("{name}.weight"), vec![cout, cin, k, k]),
        (format!("{name}.bias"), vec![cout]),
    ]
}

/// `name.weight` / `name.bias` convolution followed by an optional activation.
pub(crate) fn conv(
    tape: &mut Tape,
    p: &mut Binder,
    x: Var,
    name: &str,
    stride: usize,
    pad: usize,
    act: Option<Activation>,
) -> Result<Var> {
    let w = p.var(tape, &format!("{name}.weight"))?;
    let b = p.var(tape, &format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, Some(b), stride, pad)?;
    match act {
        Some(a) => tape.activation(y, a),
        None => Ok(y),
    }
}

/// Nearest-neighbour resize of `[N, C, H, W]` to `(h, w)`.
pub fn resize_nearest(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(
            "resize_nearest",
            format!("expected NCHW, got {s:?}"),
        ));
    }
    if (s[2], s[3]) == (h, w) {
        return Ok(x);
    }
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let sy = y * sh / h;
            for xx in 0..w {
                idx.push((plane * sh * sw + sy * sw + xx * sw / w) as u32);
            }
        }
    }
    let idx: Arc<[u32]> = idx.into();
    tape.gather(x, idx, &[n, c, h, w])
}

/// NCHW -> NHWC.
pub(crate) fn to_channels_last(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 3, 1])
}

/// NHWC -> NCHW.
pub(crate) fn to_channels_first(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 3, 1, 2])
}
