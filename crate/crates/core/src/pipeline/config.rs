use crate::Real;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{ColorfulnessMode, DeltaMode};
use crate::model::{Ablation, Critic, ModelConfig};
use crate::tensor::AdamConfig;

/// How the critic is kept (approximately) 1-Lipschitz.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lipschitz {
    /// Clamp every critic weight into `[-clip_c, clip_c]` after each update.
    #[default]
    Clip,
    /// Add the finite-difference gradient penalty to the critic objective.
    GradientPenalty,
}

/// Every training, model and evaluation setting.
///
/// Field names double as the config-file keys and the CLI `--<field>` flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: Real,
    pub lr_d: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub adam_eps: Real,
    pub batch_size: usize,
    pub image_size: usize,
    /// Number of generator updates; required by the paper profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    pub seed: u64,
    pub lambda_g: f64,
    pub lambda_p: f64,
    pub lambda_l1: f64,
    pub lambda_c: f64,
    pub ablation: Ablation,
    pub lipschitz: Lipschitz,
    pub clip_c: Real,
    pub gp_weight: Real,
    pub n_critic: usize,
    pub base_width: usize,
    pub critic_width: usize,
    pub inject_channels: usize,
    pub noise_channels: usize,
    pub noise_std: Real,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub perceptual_tap: usize,
    pub backbone_seed: u64,
    /// Checkpoint directory holding `backbone.stage*` weights; the seeded
    /// surrogate is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
    /// Generator steps between checkpoints (0: only the final one).
    pub checkpoint_every: u64,
    pub test_fraction: f64,
    pub eval_seed: u64,
    pub colorfulness: ColorfulnessMode,
    pub delta_mode: DeltaMode,
    /// Run every parallel section on one thread.
    pub single_threaded: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub const PROFILES: [&'static str; 2] = ["desk", "paper"];

    /// CPU-sized defaults: 64x64 images, batch 4, halved widths.
    pub fn desk() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            image_size: 64,
            steps: Some(2000),
            seed: 0,
            lambda_g: 0.1,
            lambda_p: 100.0,
            lambda_l1: 10.0,
            lambda_c: 1.0,
            ablation: Ablation::Full,
            lipschitz: Lipschitz::Clip,
            clip_c: 0.01,
            gp_weight: 10.0,
            n_critic: 1,
            base_width: 32,
            critic_width: 32,
            inject_channels: 16,
            noise_channels: 64,
            noise_std: 0.1,
            window: 4,
            heads: 8,
            mlp_ratio: 4,
            perceptual_tap: 3,
            backbone_seed: 7,
            backbone_weights: None,
            checkpoint_every: 500,
            test_fraction: 0.2,
            eval_seed: 1234,
            colorfulness: ColorfulnessMode::LabStd,
            delta_mode: DeltaMode::MeanOfDeltas,
            single_threaded: false,
        }
    }

    /// Full-scale settings: 256x256, batch 16, doubled widths, window 8.
    /// `steps` must be supplied.
    pub fn paper() -> Self {
        Self {
            batch_size: 16,
            image_size: 256,
            steps: None,
            base_width: 64,
            critic_width: 64,
            inject_channels: 32,
            window: 8,
            checkpoint_every: 5000,
            test_fraction: 0.1,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!(
                "profile: unknown profile `{name}` (expected desk or paper)"
            ))),
        }
    }

    /// Profile defaults overlaid with a TOML file. A `profile` key in the file
    /// selects the base profile unless `profile` is given explicitly.
    pub fn load(path: Option<&Path>, profile: Option<&str>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let file_profile = match table.remove("profile") {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => {
                return Err(Error::Config(format!(
                    "profile: expected a string, got {other}"
                )))
            }
            None => None,
        };
        let base = Self::profile(profile.or(file_profile.as_deref()).unwrap_or("desk"))?;
        base.merged(table)
    }

    fn merged(&self, overlay: toml::Table) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overlay {
            if !Self::is_field(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            table.insert(k, v);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Every config key.
    pub fn field_names() -> Vec<String> {
        let mut full = Self::desk();
        full.backbone_weights = Some(PathBuf::new());
        toml::Table::try_from(&full)
            .expect("config serializes")
            .keys()
            .cloned()
            .collect()
    }

    /// Keys whose values are booleans.
    pub fn boolean_fields() -> Vec<String> {
        toml::Table::try_from(Self::desk())
            .expect("config serializes")
            .into_iter()
            .filter(|(_, v)| v.is_bool())
            .map(|(k, _)| k)
            .collect()
    }

    fn is_field(key: &str) -> bool {
        Self::field_names().iter().any(|k| k == key)
    }

    /// Sets one field from its textual value, e.g. `("lr_g", "3e-4")` or
    /// `("ablation", "unet")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::is_field(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut overlay = toml::Table::new();
        overlay.insert(key.to_string(), parsed.clone());
        let updated = self.merged(overlay).or_else(|first| {
            // numbers-looking strings such as paths named `1`
            if parsed.is_str() {
                return Err(first);
            }
            let mut o = toml::Table::new();
            o.insert(key.to_string(), toml::Value::String(value.to_string()));
            self.merged(o).map_err(|_| first)
        });
        *self = updated.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{key}: {msg}")),
            other => other,
        })?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks value ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        for (k, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
            ("clip_c", self.clip_c),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, format!("must be positive, got {v}"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(k, format!("must be in [0, 1), got {v}"));
            }
        }
        if !(self.gp_weight >= 0.0) {
            return bad("gp_weight", format!("must be >= 0, got {}", self.gp_weight));
        }
        self.loss_weights().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad(
                "image_size",
                format!("must be a positive multiple of 16, got {}", self.image_size),
            );
        }
        if Critic::patch_grid(self.image_size, self.image_size).is_none() {
            return bad(
                "image_size",
                format!("{} is too small for the critic", self.image_size),
            );
        }
        if self.n_critic == 0 {
            return bad("n_critic", "must be at least 1".into());
        }
        if !(1..=4).contains(&self.perceptual_tap) {
            return bad(
                "perceptual_tap",
                format!("must be in 1..=4, got {}", self.perceptual_tap),
            );
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(
                "test_fraction",
                format!("must be in [0, 1), got {}", self.test_fraction),
            );
        }
        if self.critic_width == 0 {
            return bad("critic_width", "must be positive".into());
        }
        if self.ablation.has_transformer() {
            let grid = self.image_size / 16;
            if self.window == 0 || !grid.is_multiple_of(self.window) {
                return bad(
                    "window",
                    format!(
                        "{} must divide the {grid}x{grid} bottleneck of {}px images",
                        self.window, self.image_size
                    ),
                );
            }
        }
        crate::model::Generator::new(self.model_config(&crate::model::Backbone::DEFAULT_WIDTHS))?;
        Ok(())
    }

    /// Validation plus the requirement that `steps` is set.
    pub fn validate_for_training(&self) -> Result<u64> {
        self.validate()?;
        self.steps.ok_or_else(|| {
            Error::Config("steps: required (the paper profile has no default)".into())
        })
    }

    pub fn model_config(&self, backbone_widths: &[usize]) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            inject_channels: self.inject_channels,
            noise_channels: self.noise_channels,
            noise_std: self.noise_std,
            window: self.window,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            ablation: self.ablation,
            backbone_widths: backbone_widths.to_vec(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_g: self.lambda_g,
            lambda_p: self.lambda_p,
            lambda_l1: self.lambda_l1,
            lambda_c: self.lambda_c,
        }
    }

    pub fn adam_generator(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn adam_critic(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.adam_generator()
        }
    }

    /// Thread budget for [`crate::par::with_threads`].
    pub fn threads(&self) -> Option<usize> {
        self.single_threaded.then_some(1)
    }
}
