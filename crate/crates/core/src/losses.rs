//! Generator loss terms, the Wasserstein critic objective and its Lipschitz
//! constraint.
//!
//! Tape-level functions return scalar [`Var`]s so they can be combined and
//! differentiated; [`wgan_losses`] and [`total_loss`] work on plain numbers
//! for reporting.

use crate::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, Critic};
use crate::tensor::{Binder, ParamStore, Tape, Tensor, Var};

/// Weights of the four generator terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_p: f64,
    pub lambda_l1: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.1,
            lambda_p: 100.0,
            lambda_l1: 10.0,
            lambda_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda_g", self.lambda_g),
            ("lambda_p", self.lambda_p),
            ("lambda_l1", self.lambda_l1),
            ("lambda_c", self.lambda_c),
        ]
    }
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub lg: f64,
    pub lp: f64,
    pub l1: f64,
    pub lc: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl LossBundle {
    /// Fills `total` from the four components.
    pub fn new(
        lg: f64,
        lp: f64,
        l1: f64,
        lc: f64,
        d_loss: f64,
        w: &LossWeights,
        step: u64,
    ) -> Result<Self> {
        let total = total_loss([lg, lp, l1, lc], w, step)?;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite {
                component: "d_loss".into(),
                value: d_loss,
                step,
            });
        }
        Ok(Self {
            lg,
            lp,
            l1,
            lc,
            total,
            d_loss,
        })
    }
}

/// `lambda_g*Lg + lambda_p*Lp + lambda_l1*L1 + lambda_c*Lc` for components
/// `[Lg, Lp, L1, Lc]`.
pub fn total_loss(components: [f64; 4], w: &LossWeights, step: u64) -> Result<f64> {
    const NAMES: [&str; 4] = ["Lg", "Lp", "L1", "Lc"];
    for (name, v) in NAMES.iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: (*name).into(),
                value: v,
                step,
            });
        }
    }
    let [lg, lp, l1, lc] = components;
    Ok(w.lambda_g * lg + w.lambda_p * lp + w.lambda_l1 * l1 + w.lambda_c * lc)
}

fn mean_real(v: &[Real]) -> f64 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as Real as f64
}

/// `(g_loss, d_loss) = (-mean(fake), mean(fake) - mean(real))` over batch and
/// patch grid.
///
/// Both means are rounded to [`Real`]; `d_loss + g_loss == -mean(real)` holds
/// exactly.
pub fn wgan_losses(scores_real: &[Real], scores_fake: &[Real]) -> Result<(f64, f64)> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::Invalid(
            "wgan losses need non-empty score maps".into(),
        ));
    }
    if let Some(v) = scores_real
        .iter()
        .chain(scores_fake)
        .find(|v| !v.is_finite())
    {
        return Err(Error::Invalid(format!("non-finite critic score {v}")));
    }
    let (mr, mf) = (mean_real(scores_real), mean_real(scores_fake));
    Ok((-mf, mf - mr))
}

/// Critic objective on the tape: `mean(fake) - mean(real)`.
pub fn critic_loss(tape: &mut Tape, scores_real: Var, scores_fake: Var) -> Result<Var> {
    let r = tape.mean(scores_real)?;
    let f = tape.mean(scores_fake)?;
    tape.sub(f, r)
}

/// Generator adversarial term on the tape: `-mean(fake)`.
pub fn adversarial_loss(tape: &mut Tape, scores_fake: Var) -> Result<Var> {
    let f = tape.mean(scores_fake)?;
    tape.scale(f, -1.0)
}

/// Clamps every critic weight into `[-c, c]`.
pub fn clip_critic(params: &mut ParamStore, c: Real) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Invalid(format!(
            "clip value must be positive, got {c}"
        )));
    }
    params.clamp_values(c);
    Ok(())
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Mean squared difference of two feature maps.
pub fn feature_mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "perceptual_loss")?;
    let d = tape.sub(a, b)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Mean squared difference of backbone tap-`k` features of two sRGB images
/// in [0, 1].
pub fn perceptual_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    y_rgb: Var,
    yhat_rgb: Var,
    k: usize,
) -> Result<Var> {
    same_shape(tape, y_rgb, yhat_rgb, "perceptual_loss")?;
    let fy = backbone.perceptual_features(tape, y_rgb, k)?;
    let fh = backbone.perceptual_features(tape, yhat_rgb, k)?;
    feature_mse(tape, fy, fh)
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "l1_loss")?;
    let d = tape.sub(pred, target)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Batch mean of per-sample mean absolute differences between color-encoder
/// output and the backbone's global features of the ground truth.
pub fn color_loss(tape: &mut Tape, x_ce: Var, gt_features: Var) -> Result<Var> {
    same_shape(tape, x_ce, gt_features, "color_loss")?;
    let d = tape.sub(x_ce, gt_features)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Tape terms of the generator objective; absent terms are zero.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub lg: Var,
    pub lp: Var,
    pub l1: Var,
    pub lc: Option<Var>,
}

/// Weighted sum of the generator terms as a tape scalar.
pub fn total_loss_var(tape: &mut Tape, terms: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    let mut acc = tape.scale(terms.lg, w.lambda_g as Real)?;
    for (v, lambda) in [
        (Some(terms.lp), w.lambda_p),
        (Some(terms.l1), w.lambda_l1),
        (terms.lc, w.lambda_c),
    ] {
        if let Some(v) = v {
            let s = tape.scale(v, lambda as Real)?;
            acc = tape.add(acc, s)?;
        }
    }
    Ok(acc)
}

/// Per-sample mean of a score map `[N, 1, h, w]` -> `[N]`.
fn per_sample_mean(tape: &mut Tape, scores: Var) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    let n = s[0];
    let flat = tape.reshape(scores, &[n, s[1..].iter().product()])?;
    tape.mean_last(flat)
}

/// Finite-difference gradient penalty.
///
/// Samples `x = e*real + (1-e)*fake` per image, takes the unit direction `u`
/// of the critic's input gradient at `x` (held constant), and penalizes
/// `weight * mean((d - 1)^2)` where `d = (s(x + h u) - s(x - h u)) / 2h` is the
/// directional derivative of the per-image mean score. This approximates the
/// gradient norm along its own direction while needing only first-order
/// derivatives with respect to the critic weights.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &Critic,
    p: &mut Binder,
    ln: &Tensor,
    real_ab: &Tensor,
    fake_ab: &Tensor,
    weight: Real,
    rng: &mut impl Rng,
) -> Result<Var> {
    const H: Real = 1e-2;
    if real_ab.shape() != fake_ab.shape() || real_ab.shape().len() != 4 {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?} vs {:?}", real_ab.shape(), fake_ab.shape()),
        ));
    }
    let n = real_ab.shape()[0];
    let per = real_ab.numel() / n;
    let eps: Vec<Real> = (0..n).map(|_| rng.random::<Real>()).collect();
    let mix = Tensor::from_fn(real_ab.shape(), |i| {
        let e = eps[i / per];
        e * real_ab.data()[i] + (1.0 - e) * fake_ab.data()[i]
    });

    // direction of the input gradient, critic weights fixed
    let dir = {
        let mut t = Tape::new();
        let mut cp = Binder::new(p.store(), false);
        let l = t.constant(ln.clone());
        let x = t.param(mix.clone());
        let s = critic.discriminate(&mut t, &mut cp, l, x)?;
        let m = per_sample_mean(&mut t, s)?;
        let total = t.sum(m)?;
        t.backward(total)?;
        let g = t
            .grad(x)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; mix.numel()]);
        let mut u = vec![0.0 as Real; g.len()];
        for (gs, us) in g.chunks(per).zip(u.chunks_mut(per)) {
            let norm = gs.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in us.iter_mut().zip(gs) {
                    *o = (v as f64 / norm) as Real;
                }
            } else {
                us[0] = 1.0;
            }
        }
        u
    };

    let shifted = |sign: Real| Tensor::from_fn(mix.shape(), |i| mix.data()[i] + sign * H * dir[i]);
    let l = tape.constant(ln.clone());
    let xp = tape.constant(shifted(1.0));
    let xm = tape.constant(shifted(-1.0));
    let sp = critic.discriminate(tape, p, l, xp)?;
    let sm = critic.discriminate(tape, p, l, xm)?;
    let sp = per_sample_mean(tape, sp)?;
    let sm = per_sample_mean(tape, sm)?;
    let d = tape.sub(sp, sm)?;
    let d = tape.scale(d, 1.0 / (2.0 * H))?;
    let minus_one = tape.constant(Tensor::full(&[1], -1.0));
    let d = tape.add_broadcast(d, minus_one)?;
    let d = tape.square(d)?;
    let m = tape.mean(d)?;
    tape.scale(m, weight)
}

#[cfg(all(test, not(feature = "f64")))]
mod tests {
    use super::*;

    #[test]
    fn wgan_arithmetic() {
        let (g, d) = wgan_losses(&[1.0; 8], &[0.0; 8]).unwrap();
        assert_eq!((g, d), (0.0, -1.0));
        assert!(wgan_losses(&[f32::NAN], &[0.0]).is_err());
    }

    #[test]
    fn paper_weights_total() {
        let t = total_loss([1.0; 4], &LossWeights::default(), 0).unwrap();
        assert_eq!(t, 111.1);
        let err = total_loss([1.0, f64::NAN, 1.0, 1.0], &LossWeights::default(), 7).unwrap_err();
        assert!(
            err.to_string().contains("Lp") && err.to_string().contains('7'),
            "{err}"
        );
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_c: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("lambda_c"));
    }
}
