use crate::Real;
use std::path::Path;

use image::imageops::{self, FilterType};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::dataset::{batch_from_images, Dataset};
use super::train::TrainState;
use crate::colorspace::{lab_to_srgb, srgb_to_lab, LabImage, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, MetricRow};
use crate::model::{Backbone, Generator};
use crate::par;
use crate::tensor::{Binder, ParamStore, Tape};

/// A trained generator ready for inference.
#[derive(Clone, Debug)]
pub struct Colorizer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamStore,
    pub backbone: Backbone,
}

impl From<TrainState> for Colorizer {
    fn from(s: TrainState) -> Self {
        Self {
            config: s.config,
            generator: s.generator,
            params: s.g_params,
            backbone: s.backbone,
        }
    }
}

impl From<&TrainState> for Colorizer {
    fn from(s: &TrainState) -> Self {
        s.clone().into()
    }
}

/// Noise seed for one named image: fixed per (evaluation seed, file name),
/// independent of corpus order.
pub fn image_seed(eval_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(eval_seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn resize_plane(plane: &[Real], from: (usize, usize), to: (usize, usize)) -> Vec<Real> {
    if from == to {
        return plane.to_vec();
    }
    let buf = image::ImageBuffer::<image::Luma<Real>, Vec<Real>>::from_raw(
        from.0 as u32,
        from.1 as u32,
        plane.to_vec(),
    )
    .expect("plane matches its size");
    imageops::resize(&buf, to.0 as u32, to.1 as u32, FilterType::Triangle).into_raw()
}

impl Colorizer {
    /// Loads the generator from a checkpoint (or a training output directory).
    pub fn load(path: &Path) -> Result<Self> {
        Ok(TrainState::load(path)?.into())
    }

    /// Colorizes `input` (its color, if any, is discarded).
    ///
    /// The network runs at the configured size; the predicted chroma is
    /// resized bilinearly to the input's resolution and combined with the
    /// input's own lightness.
    pub fn colorize(&self, input: &RgbImage, seed: u64) -> Result<RgbImage> {
        let size = self.config.image_size;
        let (w, h) = (input.width(), input.height());
        if w == 0 || h == 0 {
            return Err(Error::Invalid("cannot colorize an empty image".into()));
        }
        let batch = batch_from_images(vec![input.resized(size, size)]);
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.params, false);
        let ln = tape.constant(batch.ln);
        let noise = self
            .config
            .ablation
            .has_color_encoder()
            .then(|| {
                self.generator
                    .sample_noise(1, size, size, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .map(|z| tape.constant(z));
        let out = self
            .generator
            .forward(&mut tape, &mut p, &self.backbone, ln, noise)?;
        let ab = tape.value(out.ab).data();
        let plane = size * size;
        let scale = |v: &[Real]| v.iter().map(|x| x * 128.0).collect::<Vec<Real>>();
        let a = resize_plane(&scale(&ab[..plane]), (size, size), (w, h));
        let b = resize_plane(&scale(&ab[plane..2 * plane]), (size, size), (w, h));
        let native = srgb_to_lab(input);
        Ok(lab_to_srgb(&LabImage {
            width: w,
            height: h,
            l: native.l,
            a,
            b,
        }))
    }
}

/// Runs `predict(index, gt)` on every dataset image and scores the outputs
/// against the originals.
pub fn evaluate_with<F>(data: &Dataset, cfg: &TrainConfig, predict: F) -> Result<MetricReport>
where
    F: Fn(usize, &RgbImage) -> Result<RgbImage> + Sync + Send,
{
    let rows = par::map_range(data.len(), |i| {
        let gt = data.image(i)?;
        let pred = predict(i, &gt)?;
        MetricRow::compute(data.name(i), &pred, &gt, cfg.colorfulness)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows, cfg.delta_mode)
}

/// Colorizes each image with its fixed evaluation noise and scores it.
pub fn evaluate(colorizer: &Colorizer, data: &Dataset) -> Result<MetricReport> {
    let cfg = &colorizer.config;
    par::with_threads(cfg.threads(), || {
        evaluate_with(data, cfg, |i, gt| {
            colorizer.colorize(gt, image_seed(cfg.eval_seed, &data.name(i)))
        })
    })
}
