use crate::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{conv, init_conv};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

/// Frozen stack of `4x4`, stride-2 convolutions with ReLU, fed with sRGB
/// mapped to [-1, 1]. Stage `k` (1-based) halves the resolution `k` times.
///
/// Weights are bound as constants on every tape, so gradients reach the
/// input image but never the weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    store: ParamStore,
    widths: Vec<usize>,
    digest: String,
}

fn stage_name(k: usize) -> String {
    format!("backbone.stage{k}")
}

impl Backbone {
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

    /// Fixed-seed random surrogate.
    pub fn surrogate(seed: u64, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone widths must be positive, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            init_conv(
                &mut store,
                &stage_name(i + 1),
                cin,
                w,
                4,
                Real::sqrt(2.0),
                &mut rng,
            );
            cin = w;
        }
        Self::from_store(store)
    }

    /// Wraps externally provided weights named `backbone.stage{k}.weight`
    /// (`[Cout, Cin, 4, 4]`, Cin = 3 for stage 1) and `.bias`.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mut widths = Vec::new();
        let mut cin = 3;
        while store.contains(&format!("{}.weight", stage_name(widths.len() + 1))) {
            let name = stage_name(widths.len() + 1);
            let w = store.get(&format!("{name}.weight"))?;
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 4 || s[3] != 4 {
                return Err(Error::Checkpoint(format!(
                    "{name}.weight: expected [Cout, {cin}, 4, 4], got {s:?}"
                )));
            }
            let b = store.get(&format!("{name}.bias"))?;
            if b.shape() != [s[0]] {
                return Err(Error::Checkpoint(format!(
                    "{name}.bias: expected [{}], got {:?}",
                    s[0],
                    b.shape()
                )));
            }
            cin = s[0];
            widths.push(s[0]);
        }
        if widths.is_empty() {
            return Err(Error::Checkpoint(
                "backbone: no `backbone.stage1.weight` entry".into(),
            ));
        }
        if store.len() != 2 * widths.len() {
            let extra: Vec<&str> = store
                .names()
                .filter(|n| !n.starts_with("backbone.stage"))
                .collect();
            return Err(Error::Checkpoint(format!(
                "backbone: unexpected entries {extra:?}"
            )));
        }
        let digest = store.digest();
        Ok(Self {
            store,
            widths,
            digest,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// SHA-256 of the weights, recorded at construction.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Channels of the deepest stage, the global feature map.
    pub fn global_channels(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    /// Outputs of stages `1..=upto` for sRGB input in [0, 1], `[N, 3, H, W]`.
    pub fn features(&self, tape: &mut Tape, rgb: Var, upto: usize) -> Result<Vec<Var>> {
        if upto == 0 || upto > self.stages() {
            return Err(Error::Invalid(format!(
                "backbone tap {upto} outside 1..={}",
                self.stages()
            )));
        }
        let s = tape.shape(rgb).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(
                "backbone",
                format!("expected [N, 3, H, W], got {s:?}"),
            ));
        }
        let mut p = Binder::new(&self.store, false);
        let x = tape.scale(rgb, 2.0)?;
        let shift = tape.constant(Tensor::full(&[1], -1.0));
        let mut x = tape.add_broadcast(x, shift)?;
        let mut out = Vec::with_capacity(upto);
        for k in 1..=upto {
            x = conv(
                tape,
                &mut p,
                x,
                &stage_name(k),
                2,
                1,
                Some(Activation::LeakyRelu(0.0)),
            )?;
            out.push(x);
        }
        Ok(out)
    }

    /// Stage-`k` features, the perceptual tap.
    pub fn perceptual_features(&self, tape: &mut Tape, rgb: Var, k: usize) -> Result<Var> {
        Ok(*self.features(tape, rgb, k)?.last().expect("non-empty"))
    }

    /// All stages for the achromatic image of normalized lightness `ln`
    /// (`[N, 1, H, W]`).
    pub fn gray_features(&self, tape: &mut Tape, ln: Var) -> Result<Vec<Var>> {
        let s = tape.shape(ln).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(
                "backbone",
                format!("lightness must be [N, 1, H, W], got {s:?}"),
            ));
        }
        let zeros = tape.constant(Tensor::zeros(&[s[0], 2, s[2], s[3]]));
        let lab = tape.concat_channels(ln, zeros)?;
        let rgb = tape.lab_to_rgb(lab)?;
        self.features(tape, rgb, self.stages())
    }
}
