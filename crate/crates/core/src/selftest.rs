//! Fast invariant suite behind `huegan selftest`.
//!
//! Each suite returns a one-line summary on success or names the first
//! property that failed.

use crate::Real;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{lab_to_srgb, srgb_to_lab, srgb_unit_to_lab, LabImage, RgbImage};
use crate::losses::{clip_critic, total_loss, wgan_losses, LossWeights};
use crate::metrics::{colorfulness, psnr, ssim, ColorfulnessMode};
use crate::model::{Ablation, Backbone, Critic, Generator, ModelConfig};
use crate::pipeline::{Checkpoint, TrainConfig, TrainState};
use crate::swin::{build_attention_mask, cyclic_shift, window_partition, window_reverse, MASK_NEG};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

type Check = std::result::Result<String, String>;

/// Gradient checks must stay below this norm-wise relative error.
pub const GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    /// Summary on success, the failing property otherwise.
    pub result: Check,
    pub elapsed: Duration,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.result.is_ok()
    }
}

/// Suite names and bodies, in run order.
pub fn suites() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("gradient checks", gradients as fn() -> Check),
        ("colorspace", colorspace),
        ("swin mechanics", swin),
        ("bottleneck structure", bottleneck),
        ("objective", objective),
        ("metric oracles", metrics),
        ("checkpoint round trip", checkpoint),
        ("determinism", determinism),
    ]
}

/// Runs every suite, reporting each outcome as it completes.
pub fn run(report: &mut dyn FnMut(&SuiteOutcome)) -> Vec<SuiteOutcome> {
    suites()
        .into_iter()
        .map(|(name, body)| {
            let start = Instant::now();
            let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
            let outcome = SuiteOutcome {
                name,
                result,
                elapsed: start.elapsed(),
            };
            report(&outcome);
            outcome
        })
        .collect()
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn lib<T>(r: crate::Result<T>, what: &str) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Weights every output element differently before the checker sums it.
fn project(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let r = t.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    t.mul(y, r)
}

type OpCase = (
    &'static str,
    Vec<Tensor>,
    fn(&mut Tape, &[Var]) -> crate::Result<Var>,
);

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    let cases: Vec<OpCase> = vec![
        (
            "conv2d 3x3",
            vec![r(&[2, 3, 5, 5]), r(&[4, 3, 3, 3]), r(&[4])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(t, y, 1)
            },
        ),
        (
            "conv2d 4x4 stride 2",
            vec![r(&[1, 2, 8, 8]), r(&[3, 2, 4, 4]), r(&[3])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project(t, y, 2)
            },
        ),
        (
            "linear",
            vec![r(&[3, 4, 5]), r(&[6, 5]), r(&[6])],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, 3)
            },
        ),
        ("layer_norm", vec![r(&[4, 6]), r(&[6]), r(&[6])], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 4)
        }),
        ("softmax", vec![r(&[3, 5])], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 5)
        }),
        ("gelu / tanh / leaky_relu", vec![r(&[2, 7])], |t, v| {
            let a = t.activation(v[0], Activation::Gelu)?;
            let b = t.activation(a, Activation::Tanh)?;
            let c = t.activation(b, Activation::LeakyRelu(0.2))?;
            project(t, c, 6)
        }),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |t, v| {
            let y = t.bmm(v[0], v[1], true)?;
            project(t, y, 7)
        }),
        (
            "upsample2x + concat",
            vec![r(&[1, 2, 3, 3]), r(&[1, 1, 6, 6])],
            |t, v| {
                let u = t.upsample2x(v[0])?;
                let y = t.concat_channels(u, v[1])?;
                project(t, y, 8)
            },
        ),
        (
            "permute / mean_last / square",
            vec![r(&[2, 3, 4])],
            |t, v| {
                let p = t.permute(v[0], &[2, 0, 1])?;
                let s = t.square(p)?;
                let y = t.mean_last(s)?;
                project(t, y, 9)
            },
        ),
    ];
    let mut worst = 0.0f64;
    for (name, inputs, f) in cases {
        let rep = lib(check_gradients(&inputs, f, 1e-3, 64), name)?;
        let e = rep.max_rel_error();
        ensure(e <= GRAD_TOL, || {
            format!("gradient check {name}: relative error {e:.2e} > {GRAD_TOL:.0e}")
        })?;
        worst = worst.max(e);
    }
    let lab = Tensor::from_fn(&[1, 3, 3, 3], |i| match i / 9 {
        0 => rng.random_range(-0.6..0.6),
        _ => rng.random_range(-0.2..0.2),
    });
    let rep = lib(
        check_gradients(
            &[lab],
            |t, v| {
                let y = t.lab_to_rgb(v[0])?;
                project(t, y, 10)
            },
            1e-3,
            64,
        ),
        "lab_to_rgb",
    )?;
    ensure(rep.max_rel_error() <= GRAD_TOL, || {
        format!(
            "gradient check lab_to_rgb: relative error {:.2e}",
            rep.max_rel_error()
        )
    })?;
    worst = worst.max(rep.max_rel_error());
    Ok(format!("10 ops, worst relative error {worst:.1e}"))
}

fn colorspace() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<u8> = (0..3000).map(|_| rng.random()).collect();
    let img = lib(RgbImage::new(1000, 1, data.clone()), "image")?;
    let back = lab_to_srgb(&srgb_to_lab(&img));
    let max = data
        .iter()
        .zip(back.data())
        .map(|(&a, &b)| a.abs_diff(b))
        .max()
        .unwrap_or(0);
    ensure(max <= 1, || {
        format!("sRGB -> Lab -> sRGB round trip off by {max} > 1")
    })?;
    let white = srgb_unit_to_lab([1.0, 1.0, 1.0]);
    ensure(
        (white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-3 && white[2].abs() < 1e-3,
        || format!("D65 white maps to {white:?}"),
    )?;
    let red = srgb_unit_to_lab([1.0, 0.0, 0.0]);
    let want = [53.24, 80.09, 67.20];
    ensure(
        red.iter().zip(want).all(|(a, b)| (a - b).abs() <= 0.05),
        || format!("sRGB red maps to {red:?}, expected {want:?}"),
    )?;
    Ok(format!(
        "1000 pixels within +/-{max}; white and red anchors"
    ))
}

fn swin() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 8, 8, 3], -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = lib(window_partition(&mut t, v, 4), "partition")?;
    let back = lib(window_reverse(&mut t, w, 4, 8, 8), "reverse")?;
    ensure(t.value(back) == &x, || {
        "window_reverse(window_partition(x)) != x".into()
    })?;
    let s = lib(cyclic_shift(&mut t, v, 2), "shift")?;
    let u = lib(cyclic_shift(&mut t, s, -2), "unshift")?;
    ensure(t.value(u) == &x, || "unshift(shift(x)) != x".into())?;
    for (h, wd, m, sh) in [(8, 8, 4, 2), (16, 16, 8, 4)] {
        let mask = lib(build_attention_mask(h, wd, m, sh), "mask")?;
        let wrapped = |v: usize, len: usize| v + sh >= len;
        let mut k = 0;
        for wy in 0..h / m {
            for wx in 0..wd / m {
                let cells: Vec<(usize, usize)> = (0..m * m)
                    .map(|i| (wy * m + i / m, wx * m + i % m))
                    .collect();
                for &(yi, xi) in &cells {
                    for &(yj, xj) in &cells {
                        let same =
                            wrapped(yi, h) == wrapped(yj, h) && wrapped(xi, wd) == wrapped(xj, wd);
                        let want = if same { 0.0 } else { MASK_NEG };
                        ensure(mask.values[k] == want, || {
                            format!("mask ({h},{wd},{m},{sh}) differs from brute force at window ({wy},{wx})")
                        })?;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok("partition/shift inverses exact; masks match enumeration".into())
}

fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        base_width: 4,
        inject_channels: 2,
        noise_channels: 4,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        ablation,
        backbone_widths: vec![2, 4, 4, 6],
        ..ModelConfig::default()
    }
}

fn bottleneck() -> Check {
    let g = lib(Generator::new(tiny_config(Ablation::Full)), "generator")?;
    let bb = lib(Backbone::surrogate(3, &[2, 4, 4, 6]), "backbone")?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = g.init(&mut rng);
    let ln = rand_tensor(&mut rng, &[1, 1, 64, 64], -1.0, 1.0);
    let z = g.sample_noise(1, 64, 64, &mut rng);
    let mut t = Tape::new();
    let mut p = Binder::new(&store, false);
    let (lv, zv) = (t.constant(ln), t.constant(z));
    let out = lib(g.forward(&mut t, &mut p, &bb, lv, Some(zv)), "forward")?;
    let tr = out.trace;
    let (x_ce, x_c, x_st2) = match (tr.x_ce, tr.x_c, tr.x_st2) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err("full model trace is missing stages".into()),
    };
    let ce = t.shape(tr.x_e)[1] + t.shape(x_ce)[1];
    ensure(t.shape(tr.x_i)[1] == ce, || {
        format!("x_i has {} channels, expected {ce}", t.shape(tr.x_i)[1])
    })?;
    let sum: Vec<Real> = t
        .value(x_c)
        .data()
        .iter()
        .zip(t.value(x_st2).data())
        .map(|(a, b)| a + b)
        .collect();
    ensure(t.value(tr.y).data() == sum.as_slice(), || {
        "y != x_c + x_st2".into()
    })?;
    Ok(format!("x_i channels {ce}; y == x_c + x_st2 exactly"))
}

fn objective() -> Check {
    let w = LossWeights::default();
    let total = lib(total_loss([1.0; 4], &w, 0), "total")?;
    ensure(total == 111.1, || {
        format!("unit components total {total}, expected 111.1")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let real: Vec<Real> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fake: Vec<Real> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (g, d) = lib(wgan_losses(&real, &fake), "wgan")?;
        let mr = (real.iter().map(|&v| v as f64).sum::<f64>() / 36.0) as Real as f64;
        ensure(d + g == -mr, || {
            format!("d_loss + g_loss = {} != -mean(real) = {}", d + g, -mr)
        })?;
    }
    let critic = lib(Critic::new(4), "critic")?;
    let mut store = critic.init(&mut rng);
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    }
    lib(clip_critic(&mut store, 0.01), "clip")?;
    ensure(store.max_abs() <= 0.01, || {
        format!("critic weight {} exceeds clip 0.01", store.max_abs())
    })?;
    Ok("111.1 exact; wgan identity on 20 batches; clipping holds".into())
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<u8> = (0..32 * 32 * 3)
        .map(|_| rng.random_range(20..200))
        .collect();
    let a = lib(RgbImage::new(32, 32, data), "image")?;
    let b = RgbImage::from_fn(32, 32, |x, y| a.pixel(x, y).map(|c| c + 10));
    let v = lib(psnr(&a, &b), "psnr")?;
    ensure((v - 28.13).abs() <= 0.01, || {
        format!("offset-10 PSNR {v:.3} != 28.13")
    })?;
    let s = lib(ssim(&a, &a), "ssim")?;
    ensure((s - 1.0).abs() < 1e-12, || {
        format!("SSIM of identical images {s}")
    })?;
    let gray = RgbImage::from_fn(32, 32, |x, _| [x as u8 * 8; 3]);
    let c = colorfulness(&gray, ColorfulnessMode::LabStd);
    ensure(c < 0.01, || format!("gray image colorfulness {c}"))?;
    let lab = LabImage {
        width: 1,
        height: 1,
        l: vec![50.0],
        a: vec![0.0],
        b: vec![0.0],
    };
    ensure(lab_to_srgb(&lab).is_grayscale(), || {
        "neutral Lab is not gray".into()
    })?;
    Ok(format!(
        "PSNR {v:.2} dB, SSIM {s}, gray colorfulness {c:.1e}"
    ))
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        image_size: 32,
        base_width: 4,
        critic_width: 4,
        inject_channels: 2,
        noise_channels: 4,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        single_threaded: true,
        ..TrainConfig::desk()
    }
}

fn forward_ab(state: &TrainState, ln: &Tensor, z: &Option<Tensor>) -> crate::Result<Tensor> {
    let mut t = Tape::new();
    let mut p = Binder::new(&state.g_params, false);
    let lv = t.constant(ln.clone());
    let zv = z.clone().map(|z| t.constant(z));
    let out = state
        .generator
        .forward(&mut t, &mut p, &state.backbone, lv, zv)?;
    Ok(t.value(out.ab).clone())
}

fn checkpoint() -> Check {
    let state = lib(TrainState::new(tiny_train_config()), "state")?;
    let dir = std::env::temp_dir().join(format!("huegan-selftest-{}", std::process::id()));
    let ck_dir = dir.join("checkpoint");
    let saved = state.to_checkpoint().save(&ck_dir);
    let loaded = saved
        .and_then(|_| Checkpoint::load(&ck_dir))
        .and_then(TrainState::from_checkpoint);
    let _ = std::fs::remove_dir_all(&dir);
    let loaded = lib(loaded, "checkpoint")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ln = rand_tensor(&mut rng, &[1, 1, 32, 32], -1.0, 1.0);
    let z = state.step_noise(1, 1, 32, 32);
    let a = lib(forward_ab(&state, &ln, &z), "forward")?;
    let b = lib(forward_ab(&loaded, &ln, &z), "forward")?;
    ensure(a == b, || {
        "forward after save/load differs from before".into()
    })?;
    ensure(
        loaded.g_params == state.g_params && loaded.d_params == state.d_params,
        || "parameters changed across save/load".into(),
    )?;
    Ok(format!(
        "{} generator tensors restored bit-exactly",
        state.g_params.len()
    ))
}

fn determinism() -> Check {
    let run = || -> crate::Result<(Vec<f64>, ParamStore)> {
        let mut state = TrainState::new(tiny_train_config())?;
        let img = crate::synthetic::scene(32, 4);
        let batch = crate::pipeline::batch_from_images(vec![img]);
        let mut totals = Vec::new();
        for _ in 0..3 {
            totals.push(state.train_step(&batch)?.total);
        }
        Ok((totals, state.g_params))
    };
    let (a, pa) = lib(run(), "training")?;
    let (b, pb) = lib(run(), "training")?;
    ensure(a == b && pa == pb, || {
        "two identical 3-step runs diverged".into()
    })?;
    ensure(a.iter().all(|v| v.is_finite()), || {
        format!("non-finite losses {a:?}")
    })?;
    Ok("3 training steps reproduce bit-exactly".into())
}

#[cfg(all(test, not(feature = "f64")))]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for o in run(&mut |_| {}) {
            assert!(o.passed(), "{}: {:?}", o.name, o.result);
        }
    }
}
