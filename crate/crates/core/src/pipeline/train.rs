use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint, LogRow};
use super::config::{Lipschitz, TrainConfig};
use super::dataset::{load_dataset, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{self, GeneratorTerms, LossBundle, LossWeights};
use crate::model::{Backbone, Critic, Generator, GeneratorOutput};
use crate::par;
use crate::tensor::{Adam, AdamMoments, Binder, ParamStore, Tape, Tensor, Var};

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    InitGenerator = 0,
    InitCritic = 1,
    Noise = 2,
    Penalty = 3,
    Order = 4,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(8).wrapping_add(stream as u64));
    rng
}

/// Dataset indices for 1-based `step`: consecutive slices of per-epoch
/// permutations, so the order depends only on (seed, step).
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;
    let start = (step - 1) * batch as u64;
    (0..batch as u64)
        .map(|j| {
            let pos = start + j;
            let epoch = pos / n as u64;
            if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream_rng(seed, Stream::Order, epoch));
                epoch_cache = Some((epoch, perm));
            }
            epoch_cache.as_ref().expect("filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Loads the configured backbone: imported weights when a path is given,
/// otherwise the seeded surrogate.
pub fn load_backbone(cfg: &TrainConfig) -> Result<Backbone> {
    match &cfg.backbone_weights {
        Some(path) => {
            let ck = Checkpoint::load(&checkpoint::resolve(path))?;
            let mut store = ParamStore::new();
            for (name, t) in ck.tensors {
                store.insert(name, t);
            }
            Backbone::from_store(store)
        }
        None => Backbone::surrogate(cfg.backbone_seed, &Backbone::DEFAULT_WIDTHS),
    }
}

/// Everything the generator objective needs besides the generator weights.
pub struct LossModel<'a> {
    pub generator: &'a Generator,
    pub backbone: &'a Backbone,
    pub critic: &'a Critic,
    pub critic_params: &'a ParamStore,
    pub weights: LossWeights,
    pub perceptual_tap: usize,
}

/// Full generator objective on `tape`.
///
/// Lp compares backbone features of RGB rebuilt from (`ln`, prediction) and
/// (`ln`, `ab_gt`); Lc compares the color-encoder output with the global
/// backbone features of the target. Critic weights enter as constants.
pub fn generator_loss(
    tape: &mut Tape,
    m: &LossModel,
    p: &mut Binder,
    ln: Var,
    ab_gt: Var,
    noise: Option<Var>,
) -> Result<(Var, GeneratorTerms, GeneratorOutput)> {
    let out = m.generator.forward(tape, p, m.backbone, ln, noise)?;
    let (total, terms) = generator_terms(tape, m, ln, ab_gt, &out)?;
    Ok((total, terms, out))
}

/// The weighted objective for an existing generator output.
pub fn generator_terms(
    tape: &mut Tape,
    m: &LossModel,
    ln: Var,
    ab_gt: Var,
    out: &GeneratorOutput,
) -> Result<(Var, GeneratorTerms)> {
    let mut cp = Binder::new(m.critic_params, false);
    let scores = m.critic.discriminate(tape, &mut cp, ln, out.ab)?;
    let lg = losses::adversarial_loss(tape, scores)?;
    let lab_pred = tape.concat_channels(ln, out.ab)?;
    let rgb_pred = tape.lab_to_rgb(lab_pred)?;
    let lab_gt = tape.concat_channels(ln, ab_gt)?;
    let rgb_gt = tape.lab_to_rgb(lab_gt)?;
    let lp = losses::perceptual_loss(tape, m.backbone, rgb_gt, rgb_pred, m.perceptual_tap)?;
    let l1 = losses::l1_loss(tape, out.ab, ab_gt)?;
    let lc = match out.trace.x_ce {
        Some(x_ce) => {
            let feats = m.backbone.features(tape, rgb_gt, m.backbone.stages())?;
            Some(losses::color_loss(
                tape,
                x_ce,
                *feats.last().expect("non-empty"),
            )?)
        }
        None => None,
    };
    let terms = GeneratorTerms { lg, lp, l1, lc };
    let total = losses::total_loss_var(tape, &terms, &m.weights)?;
    Ok((total, terms))
}

/// Generator and critic weights, optimizer state, step counter and loss log.
///
/// Randomness is drawn from streams keyed by (seed, step), so a state
/// restored from a checkpoint continues exactly as the uninterrupted run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub backbone: Backbone,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed generator updates.
    pub step: u64,
    pub log: Vec<LogRow>,
}

const OPTIMIZERS: [&str; 2] = ["generator", "critic"];

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = load_backbone(&config)?;
        Self::with_backbone(config, backbone)
    }

    pub fn with_backbone(config: TrainConfig, backbone: Backbone) -> Result<Self> {
        let generator = Generator::new(config.model_config(backbone.widths()))?;
        let critic = Critic::new(config.critic_width)?;
        let g_params = generator.init(&mut stream_rng(config.seed, Stream::InitGenerator, 0));
        let d_params = critic.init(&mut stream_rng(config.seed, Stream::InitCritic, 0));
        Ok(Self {
            adam_g: Adam::new(config.adam_generator()),
            adam_d: Adam::new(config.adam_critic()),
            config,
            generator,
            critic,
            backbone,
            g_params,
            d_params,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn loss_model(&self) -> LossModel<'_> {
        LossModel {
            generator: &self.generator,
            backbone: &self.backbone,
            critic: &self.critic,
            critic_params: &self.d_params,
            weights: self.config.loss_weights(),
            perceptual_tap: self.config.perceptual_tap,
        }
    }

    /// Color-encoder noise for the given step.
    pub fn step_noise(&self, step: u64, n: usize, h: usize, w: usize) -> Option<Tensor> {
        self.config.ablation.has_color_encoder().then(|| {
            self.generator.sample_noise(
                n,
                h,
                w,
                &mut stream_rng(self.config.seed, Stream::Noise, step),
            )
        })
    }

    /// `n_critic` critic updates on the detached fake, then one generator
    /// update against the updated critic.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBundle> {
        let step = self.step + 1;
        let s = batch.ln.shape().to_vec();
        let noise = self.step_noise(step, s[0], s[2], s[3]);

        let mut tape = Tape::new();
        let mut gp = Binder::new(&self.g_params, true);
        let ln = tape.constant(batch.ln.clone());
        let z = noise.map(|t| tape.constant(t));
        let out = self
            .generator
            .forward(&mut tape, &mut gp, &self.backbone, ln, z)?;
        let fake = tape.value(out.ab).clone();

        let d_loss = critic_updates(
            &self.critic,
            &mut self.d_params,
            &mut self.adam_d,
            &self.config,
            batch,
            &fake,
            step,
        )?;

        let m = self.loss_model();
        let ab_gt = tape.constant(batch.ab.clone());
        let (total, terms) = generator_terms(&mut tape, &m, ln, ab_gt, &out)?;
        let GeneratorTerms { lg, lp, l1, lc } = terms;

        let value = |v: Var| tape.value(v).item() as f64;
        let bundle = LossBundle::new(
            value(lg),
            value(lp),
            value(l1),
            lc.map_or(0.0, value),
            d_loss,
            &m.weights,
            step,
        )?;
        tape.backward(total)?;
        let vars = gp.into_vars();
        self.g_params.accumulate_grads(&tape, &vars)?;
        self.adam_g.step(&mut self.g_params)?;
        self.step = step;
        self.log.push(LogRow::new(step, &bundle));
        Ok(bundle)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_params(&self.g_params);
        c.insert_params("", &self.d_params);
        c.step = self.step;
        c.config = Some(self.config.clone());
        c.backbone_sha256 = self.backbone.digest().to_string();
        for (opt, adam) in OPTIMIZERS.iter().zip([&self.adam_g, &self.adam_d]) {
            c.adam_steps.insert((*opt).to_string(), adam.steps_taken());
            for (name, mom) in &adam.moments {
                let shape = [mom.m.len()];
                for (kind, data) in [("m", &mom.m), ("v", &mom.v)] {
                    let t = Tensor::new(&shape, data.clone()).expect("flat moment");
                    c.tensors.insert(format!("adam.{opt}.{kind}.{name}"), t);
                }
            }
        }
        c.loss_log = self.log.clone();
        c
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`]. Missing
    /// entries are named in the error.
    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let config = ck
            .config
            .take()
            .ok_or_else(|| Error::Checkpoint("manifest has no training config".into()))?;
        let backbone = load_backbone(&config)?;
        if backbone.digest() != ck.backbone_sha256 {
            return Err(Error::Checkpoint(format!(
                "backbone digest {} does not match the checkpoint's {}",
                backbone.digest(),
                ck.backbone_sha256
            )));
        }
        let mut state = Self::with_backbone(config, backbone)?;
        state.g_params = ck.take_params("", &state.generator.param_shapes())?;
        state.d_params = ck.take_params("", &state.critic.param_shapes())?;
        for opt in OPTIMIZERS {
            let steps = ck.adam_steps.get(opt).copied().unwrap_or(0);
            let (adam, store) = match opt {
                "generator" => (&mut state.adam_g, &state.g_params),
                _ => (&mut state.adam_d, &state.d_params),
            };
            adam.moments = BTreeMap::new();
            if steps == 0 {
                continue;
            }
            for (name, p) in store.iter() {
                let shape = [p.value.numel()];
                let m = ck
                    .take(&format!("adam.{opt}.m.{name}"), &shape)?
                    .into_data();
                let v = ck
                    .take(&format!("adam.{opt}.v.{name}"), &shape)?
                    .into_data();
                adam.moments
                    .insert(name.to_string(), AdamMoments { m, v, step: steps });
            }
        }
        if !ck.tensors.is_empty() {
            let extra: Vec<&str> = ck.tensors.keys().map(String::as_str).collect();
            return Err(Error::Checkpoint(format!(
                "unexpected entries: {}",
                extra.join(", ")
            )));
        }
        state.step = ck.step;
        state.log = ck.loss_log;
        state.log.retain(|r| r.step <= ck.step);
        Ok(state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(&checkpoint::resolve(dir))?)
    }

    /// Writes `checkpoint/`, `loss_log.csv` and `config.toml` into `out_dir`.
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        self.to_checkpoint().save(&out_dir.join("checkpoint"))?;
        checkpoint::write_loss_log(&out_dir.join(checkpoint::LOSS_LOG), &self.log)?;
        let cfg = out_dir.join("config.toml");
        std::fs::write(&cfg, self.config.to_toml()).map_err(|e| Error::io(&cfg, e))
    }

    /// Runs steps until `until`, saving every `checkpoint_every` steps and at
    /// the end. `progress` sees every new log row.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        out_dir: Option<&Path>,
        progress: &mut dyn FnMut(&LogRow),
    ) -> Result<()> {
        let every = self.config.checkpoint_every;
        while self.step < until {
            let idx = batch_indices(
                self.config.seed,
                self.step + 1,
                data.len(),
                self.config.batch_size,
            );
            let batch = data.make_batch(&idx, self.config.image_size)?;
            self.train_step(&batch)?;
            progress(self.log.last().expect("row pushed"));
            if let Some(dir) = out_dir {
                if every > 0 && self.step.is_multiple_of(every) && self.step < until {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(dir)?;
        }
        Ok(())
    }
}

fn critic_updates(
    critic: &Critic,
    params: &mut ParamStore,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &Batch,
    fake: &Tensor,
    step: u64,
) -> Result<f64> {
    let mut penalty_rng = stream_rng(cfg.seed, Stream::Penalty, step);
    let mut d_loss = 0.0;
    for _ in 0..cfg.n_critic {
        let mut tape = Tape::new();
        let mut p = Binder::new(params, true);
        let ln = tape.constant(batch.ln.clone());
        let real = tape.constant(batch.ab.clone());
        let fake_v = tape.constant(fake.clone());
        let s_real = critic.discriminate(&mut tape, &mut p, ln, real)?;
        let s_fake = critic.discriminate(&mut tape, &mut p, ln, fake_v)?;
        let mut loss = losses::critic_loss(&mut tape, s_real, s_fake)?;
        if cfg.lipschitz == Lipschitz::GradientPenalty {
            let gp = losses::gradient_penalty(
                &mut tape,
                critic,
                &mut p,
                &batch.ln,
                &batch.ab,
                fake,
                cfg.gp_weight,
                &mut penalty_rng,
            )?;
            loss = tape.add(loss, gp)?;
        }
        d_loss = tape.value(loss).item() as f64;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite {
                component: "d_loss".into(),
                value: d_loss,
                step,
            });
        }
        tape.backward(loss)?;
        let vars = p.into_vars();
        params.accumulate_grads(&tape, &vars)?;
        adam.step(params)?;
        if cfg.lipschitz == Lipschitz::Clip {
            losses::clip_critic(params, cfg.clip_c)?;
        }
    }
    Ok(d_loss)
}

/// Trains from scratch on the train split of `data_dir`, writing checkpoints
/// and the loss log into `out_dir`. `steps = 0` writes the initial checkpoint.
pub fn train(
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    progress: &mut (dyn FnMut(&LogRow) + Send),
) -> Result<TrainState> {
    let steps = cfg.validate_for_training()?;
    let data = load_dataset(data_dir, Split::Train, cfg.seed, cfg.test_fraction)?;
    par::with_threads(cfg.threads(), || {
        let mut state = TrainState::new(cfg.clone())?;
        state.run(&data, steps, Some(out_dir), progress)?;
        Ok(state)
    })
}

/// Continues the run saved in `out_dir` up to `steps` (default: the saved
/// config's step count).
pub fn resume(
    data_dir: &Path,
    out_dir: &Path,
    steps: Option<u64>,
    progress: &mut (dyn FnMut(&LogRow) + Send),
) -> Result<TrainState> {
    let mut state = TrainState::load(out_dir)?;
    let until = match steps.or(state.config.steps) {
        Some(s) => s,
        None => return Err(Error::Config("steps: required to resume this run".into())),
    };
    let data = load_dataset(
        data_dir,
        Split::Train,
        state.config.seed,
        state.config.test_fraction,
    )?;
    par::with_threads(state.config.threads(), || {
        state.run(&data, until, Some(out_dir), progress)?;
        Ok(state)
    })
}
