//! Image-quality metrics on 8-bit sRGB images.
//!
//! PSNR over all RGB channels at peak 255; single-scale SSIM on BT.601 luma
//! with an 11x11 Gaussian window (sigma 1.5) over valid positions only;
//! colorfulness as the chroma dispersion `sqrt(var(a) + var(b))` in Lab, or
//! the Hasler-Susstrunk opponent-color measure.

use crate::Real;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colorspace::{srgb_to_lab, LabImage, RgbImage};
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn same_size(a: &RgbImage, b: &RgbImage, op: &'static str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b, "psnr")?;
    if a.data().is_empty() {
        return Err(Error::Invalid("psnr of an empty image".into()));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// BT.601 luma in [0, 255].
pub fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode Gaussian filter of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k
                .iter()
                .zip(&src[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter(&x, w, h, &k);
    let my = filter(&y, w, h, &k);
    let sxx = filter(&prod(&x, &x), w, h, &k);
    let syy = filter(&prod(&y, &y), w, h, &k);
    let sxy = filter(&prod(&x, &y), w, h, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Colorfulness definition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorfulnessMode {
    /// `sqrt(var(a) + var(b))` over the Lab chroma planes (population variance).
    #[default]
    LabStd,
    /// Hasler-Susstrunk: `sigma_rgyb + 0.3 * mu_rgyb` on opponent channels.
    Hasler,
}

impl FromStr for ColorfulnessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab_std" => Ok(Self::LabStd),
            "hasler" => Ok(Self::Hasler),
            _ => Err(Error::Config(format!(
                "colorfulness: unknown mode `{s}` (expected lab_std or hasler)"
            ))),
        }
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var)
}

fn widen(v: &[Real]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `sqrt(var(a) + var(b))` of a Lab image.
pub fn colorfulness_lab(img: &LabImage) -> f64 {
    let (_, va) = mean_var(&widen(&img.a));
    let (_, vb) = mean_var(&widen(&img.b));
    (va + vb).sqrt()
}

pub fn colorfulness(img: &RgbImage, mode: ColorfulnessMode) -> f64 {
    match mode {
        ColorfulnessMode::LabStd => colorfulness_lab(&srgb_to_lab(img)),
        ColorfulnessMode::Hasler => {
            let rg: Vec<f64> = img.pixels().map(|[r, g, _]| r as f64 - g as f64).collect();
            let yb: Vec<f64> = img
                .pixels()
                .map(|[r, g, b]| 0.5 * (r as f64 + g as f64) - b as f64)
                .collect();
            let (mrg, vrg) = mean_var(&rg);
            let (myb, vyb) = mean_var(&yb);
            (vrg + vyb).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt()
        }
    }
}

pub fn delta_colorfulness(pred: &RgbImage, gt: &RgbImage, mode: ColorfulnessMode) -> f64 {
    (colorfulness(pred, mode) - colorfulness(gt, mode)).abs()
}

/// How the corpus delta-colorfulness is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Mean of per-image deltas.
    #[default]
    MeanOfDeltas,
    /// Delta of the corpus-mean colorfulness values.
    DeltaOfMeans,
}

impl FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_of_deltas" => Ok(Self::MeanOfDeltas),
            "delta_of_means" => Ok(Self::DeltaOfMeans),
            _ => Err(Error::Config(format!(
                "delta mode: unknown value `{s}` (expected mean_of_deltas or delta_of_means)"
            ))),
        }
    }
}

/// Per-image metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub colorfulness_pred: f64,
    pub colorfulness_gt: f64,
    pub delta_colorfulness: f64,
}

impl MetricRow {
    pub fn compute(
        image: impl Into<String>,
        pred: &RgbImage,
        gt: &RgbImage,
        mode: ColorfulnessMode,
    ) -> Result<Self> {
        let colorfulness_pred = colorfulness(pred, mode);
        let colorfulness_gt = colorfulness(gt, mode);
        Ok(Self {
            image: image.into(),
            psnr_db: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            colorfulness_pred,
            colorfulness_gt,
            delta_colorfulness: (colorfulness_pred - colorfulness_gt).abs(),
        })
    }
}

/// Corpus means; serialized as the JSON summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub psnr_db: f64,
    pub ssim: f64,
    pub colorfulness_pred: f64,
    pub colorfulness_gt: f64,
    pub delta_colorfulness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub summary: MetricSummary,
}

pub const CSV_COLUMNS: [&str; 6] = [
    "image",
    "psnr_db",
    "ssim",
    "colorfulness_pred",
    "colorfulness_gt",
    "delta_colorfulness",
];

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>, delta: DeltaMode) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid(
                "metric report needs at least one image".into(),
            ));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let colorfulness_pred = mean(|r| r.colorfulness_pred);
        let colorfulness_gt = mean(|r| r.colorfulness_gt);
        let summary = MetricSummary {
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            colorfulness_pred,
            colorfulness_gt,
            delta_colorfulness: match delta {
                DeltaMode::MeanOfDeltas => mean(|r| r.delta_colorfulness),
                DeltaMode::DeltaOfMeans => (colorfulness_pred - colorfulness_gt).abs(),
            },
        };
        Ok(Self { rows, summary })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| Error::Invalid(format!("metrics csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Invalid(format!("metrics csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        std::fs::write(&json, self.summary_json()? + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
