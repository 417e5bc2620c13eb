use crate::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

const LAYERS: usize = 5;

/// PatchGAN critic over the normalized Lab stack `(L, a, b)`.
///
/// Three `4x4` stride-2 convolutions, a `4x4` stride-1 convolution and a
/// final `4x4` stride-1 projection to one channel; leaky ReLU in between, no
/// normalization and no output squashing. A 64x64 input yields a 6x6 score
/// map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Critic {
    width: usize,
}

impl Critic {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("critic_width must be positive".into()));
        }
        Ok(Self { width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn layers(&self) -> [(usize, usize, usize); LAYERS] {
        let w = self.width;
        [
            (3, w, 2),
            (w, 2 * w, 2),
            (2 * w, 4 * w, 2),
            (4 * w, 8 * w, 1),
            (8 * w, 1, 1),
        ]
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .iter()
            .enumerate()
            .flat_map(|(i, &(cin, cout, _))| {
                super::conv_shapes(&format!("critic.conv{}", i + 1), cin, cout, 4)
            })
            .collect()
    }

    /// Weights ~ N(0, 0.02^2), zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let normal = Normal::new(0.0 as Real, 0.02).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".weight") {
                Tensor::from_fn(&shape, |_| normal.sample(rng))
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t);
        }
        store
    }

    /// Score-map size for an `h x w` input.
    pub fn patch_grid(h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |mut v: usize| {
            for _ in 0..3 {
                if !v.is_multiple_of(2) || v < 2 {
                    return None;
                }
                v /= 2;
            }
            (v >= 3).then(|| v - 2)
        };
        Some((f(h)?, f(w)?))
    }

    /// Patch scores `[N, 1, h, w]` for lightness `[N, 1, H, W]` and ab
    /// `[N, 2, H, W]`.
    pub fn discriminate(&self, tape: &mut Tape, p: &mut Binder, ln: Var, abn: Var) -> Result<Var> {
        let (a, b) = (tape.shape(ln).to_vec(), tape.shape(abn).to_vec());
        if a.len() != 4
            || b.len() != 4
            || a[1] != 1
            || b[1] != 2
            || a[0] != b[0]
            || a[2..] != b[2..]
        {
            return Err(Error::shape(
                "discriminate",
                format!("lightness {a:?} and ab {b:?} are not aligned [N,1,H,W] / [N,2,H,W]"),
            ));
        }
        if Self::patch_grid(a[2], a[3]).is_none() {
            return Err(Error::shape(
                "discriminate",
                format!("input {}x{} too small or not divisible by 8", a[2], a[3]),
            ));
        }
        let mut x = tape.concat_channels(ln, abn)?;
        for (i, &(_, _, stride)) in self.layers().iter().enumerate() {
            let last = i + 1 == LAYERS;
            let act = (!last).then_some(Activation::LeakyRelu(0.2));
            x = conv(tape, p, x, &format!("critic.conv{}", i + 1), stride, 1, act)?;
        }
        Ok(x)
    }
}
