// Gradient cases shared by the single- and double-precision runs.
//
// Included into a module that first binds `hg` to `huegan` or `huegan_f64`.

use hg::losses::LossWeights;
use hg::model::{Ablation, Backbone, Critic, Generator, ModelConfig};
use hg::pipeline::{generator_loss, LossModel};
use hg::swin::{build_attention_mask, swin_block, window_attention, SwinBlockParams};
use hg::tensor::gradcheck::check_gradients;
use hg::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};
use hg::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn project(t: &mut Tape, y: Var, seed: u64) -> hg::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let r = t.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    t.mul(y, r)
}

fn err<T>(r: hg::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

type OpFn = fn(&mut Tape, &[Var]) -> hg::Result<Var>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = |s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
    vec![
        ("conv2d", vec![r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3]), r(&[4])], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            project(t, y, 1)
        }),
        ("conv2d stride 2", vec![r(&[1, 2, 8, 8]), r(&[3, 2, 4, 4]), r(&[3])], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, 2)
        }),
        ("upsample2x", vec![r(&[1, 2, 3, 4])], |t, v| {
            let y = t.upsample2x(v[0])?;
            project(t, y, 3)
        }),
        ("linear", vec![r(&[2, 3, 5]), r(&[4, 5]), r(&[4])], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 4)
        }),
        ("gelu", vec![r(&[3, 5])], |t, v| {
            let y = t.activation(v[0], Activation::Gelu)?;
            project(t, y, 5)
        }),
        ("leaky_relu", vec![r(&[3, 5])], |t, v| {
            let y = t.activation(v[0], Activation::LeakyRelu(0.2))?;
            project(t, y, 6)
        }),
        ("tanh", vec![r(&[3, 5])], |t, v| {
            let y = t.activation(v[0], Activation::Tanh)?;
            project(t, y, 7)
        }),
        ("layer_norm", vec![r(&[4, 6]), r(&[6]), r(&[6])], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 8)
        }),
        ("softmax", vec![r(&[3, 6])], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 9)
        }),
        ("concat", vec![r(&[2, 3, 2]), r(&[2, 1, 2])], |t, v| {
            let y = t.concat(v[0], v[1], 1)?;
            project(t, y, 10)
        }),
        ("concat_channels", vec![r(&[1, 2, 3, 3]), r(&[1, 1, 3, 3])], |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, 11)
        }),
        ("gather", vec![r(&[2, 3])], |t, v| {
            let y = t.gather(v[0], vec![3u32, 0, 0, 5, 2, 1, 4, 4].into(), &[2, 4])?;
            project(t, y, 12)
        }),
        ("permute + reshape", vec![r(&[2, 3, 4])], |t, v| {
            let p = t.permute(v[0], &[1, 2, 0])?;
            let y = t.reshape(p, &[12, 2])?;
            project(t, y, 13)
        }),
        ("add / sub / mul", vec![r(&[4, 3]), r(&[4, 3])], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let y = t.mul(a, s)?;
            project(t, y, 14)
        }),
        ("add_broadcast", vec![r(&[3, 4]), r(&[4])], |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            project(t, y, 15)
        }),
        ("scale / square", vec![r(&[5])], |t, v| {
            let s = t.scale(v[0], -2.5)?;
            let y = t.square(s)?;
            project(t, y, 16)
        }),
        ("abs", vec![Tensor::new(&[4], vec![0.7, -0.4, 0.9, -1.2]).unwrap()], |t, v| {
            let y = t.abs(v[0])?;
            project(t, y, 17)
        }),
        ("sum / mean / mean_last", vec![r(&[3, 4])], |t, v| {
            let m = t.mean_last(v[0])?;
            let m = project(t, m, 18)?;
            let s = t.sum(m)?;
            let mu = t.mean(v[0])?;
            t.add(s, mu)
        }),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], |t, v| {
            let y = t.bmm(v[0], v[1], false)?;
            project(t, y, 19)
        }),
        ("bmm transposed", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |t, v| {
            let y = t.bmm(v[0], v[1], true)?;
            project(t, y, 20)
        }),
    ]
}

/// Every op case plus `lab_to_rgb`, masked window attention and a full Swin
/// block. Returns the number of checks and the worst (error, name).
pub fn ops(eps: Real, tol: f64) -> Result<(usize, f64, &'static str), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, "");
    let mut n = 0;
    let mut record = |name: &'static str, e: f64| -> Result<(), String> {
        if e > tol {
            return Err(format!("{name}: relative error {e:.2e}"));
        }
        if e > worst.0 {
            worst = (e, name);
        }
        n += 1;
        Ok(())
    };
    for (name, inputs, f) in op_cases(&mut rng) {
        record(name, err(check_gradients(&inputs, f, eps, 64))?.max_rel_error())?;
    }
    let lab = Tensor::from_fn(&[2, 3, 3, 3], |i| match (i / 9) % 3 {
        0 => rng.random_range(-0.6..0.6),
        _ => rng.random_range(-0.25..0.25),
    });
    let e = err(check_gradients(&[lab], |t, v| {
        let y = t.lab_to_rgb(v[0])?;
        project(t, y, 21)
    }, eps, 64))?;
    record("lab_to_rgb", e.max_rel_error())?;

    let blk = err(SwinBlockParams::new("blk", 8, 2, 2, 1, 2))?;
    let mut store = ParamStore::new();
    blk.init(&mut store, &mut rng);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = rand_tensor(&mut rng, &[1, 4, 4, 8], -1.0, 1.0);
    let e = err(check_gradients(&[x], |t, v| {
        let mut p = Binder::new(&store, false);
        let y = swin_block(t, &mut p, v[0], &blk)?;
        project(t, y, 22)
    }, eps, 64))?;
    record("swin block", e.max_rel_error())?;
    let tokens = rand_tensor(&mut rng, &[4, 4, 8], -1.0, 1.0);
    let mask = err(build_attention_mask(4, 4, 2, 1))?;
    let e = err(check_gradients(&[tokens], |t, v| {
        let mut p = Binder::new(&store, false);
        let o = window_attention(t, &mut p, v[0], &blk, Some(&mask))?;
        project(t, o.out, 23)
    }, eps, 64))?;
    record("masked window attention", e.max_rel_error())?;
    Ok((n, worst.0, worst.1))
}

pub const LOSS_PROBES: [&str; 8] = [
    "encoder.stage1.weight",
    "encoder.inject2.weight",
    "color_encoder.conv2.weight",
    "fusion.weight",
    "transformer.swin1.attn.qkv.weight",
    "transformer.swin2.mlp.fc1.weight",
    "decoder.stage3.weight",
    "decoder.head.weight",
];

/// The complete four-term generator objective on a tiny model, checked
/// w.r.t. the lightness input (index 0) and each of [`LOSS_PROBES`].
pub fn generator_objective(eps: Real) -> Result<Vec<f64>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig {
        base_width: 4,
        inject_channels: 2,
        noise_channels: 4,
        noise_std: 0.1,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        ablation: Ablation::Full,
        backbone_widths: vec![4, 4, 6, 6],
    };
    let gen = err(Generator::new(cfg))?;
    let backbone = err(Backbone::surrogate(5, &[4, 4, 6, 6]))?;
    let critic = err(Critic::new(4))?;
    let g_store = gen.init(&mut rng);
    let d_store = critic.init(&mut rng);
    let m = LossModel {
        generator: &gen,
        backbone: &backbone,
        critic: &critic,
        critic_params: &d_store,
        weights: LossWeights::default(),
        perceptual_tap: 3,
    };
    let ln = rand_tensor(&mut rng, &[1, 1, 32, 32], -0.6, 0.6);
    let ab = rand_tensor(&mut rng, &[1, 2, 32, 32], -0.3, 0.3);
    let z = gen.sample_noise(1, 32, 32, &mut rng);
    let mut inputs = vec![ln];
    for name in LOSS_PROBES {
        inputs.push(err(g_store.get(name))?.clone());
    }
    let rep = err(check_gradients(&inputs, |t, v| {
        let mut p = Binder::new(&g_store, false);
        for (name, &var) in LOSS_PROBES.iter().zip(&v[1..]) {
            p.bind(*name, var);
        }
        let ab_gt = t.constant(ab.clone());
        let zv = t.constant(z.clone());
        let (total, terms, _) = generator_loss(t, &m, &mut p, v[0], ab_gt, Some(zv))?;
        if terms.lc.is_none() {
            return Err(hg::Error::Invalid("color loss missing".into()));
        }
        Ok(total)
    }, eps, 24))?;
    Ok(rep.rel_errors)
}
