//! Image quality metrics, corpus evaluation and the inference timing harness.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datastore::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::{check_same_shape, ImageTensor};
use crate::network::Model;
use crate::rainsynth::procedural_background;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB with peak value 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    let sum: f64 = x
        .view()
        .iter()
        .zip(y.view().iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sum / x.view().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering (no padding).
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| taps[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

fn ssim_channel(x: ArrayView2<f32>, y: ArrayView2<f32>, taps: &[f64]) -> f64 {
    let xd = x.mapv(f64::from);
    let yd = y.mapv(f64::from);
    let mu_x = filter_valid(&xd, taps);
    let mu_y = filter_valid(&yd, taps);
    let exx = filter_valid(&(&xd * &xd), taps);
    let eyy = filter_valid(&(&yd * &yd), taps);
    let exy = filter_valid(&(&xd * &yd), taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for (((&mx, &my), (&xx, &yy)), &xy) in mu_x.iter().zip(&mu_y).zip(exx.iter().zip(&eyy)).zip(&exy) {
        let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / mu_x.len() as f64
}

/// Mean structural similarity over the valid 11×11 Gaussian-window region,
/// computed per channel and averaged.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same_shape(x, y)?;
    let (h, w, c) = x.dim();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let sum: f64 = (0..c)
        .into_par_iter()
        .map(|ch| ssim_channel(x.view().index_axis(Axis(2), ch), y.view().index_axis(Axis(2), ch), &taps))
        .sum();
    Ok(sum / c as f64)
}

/// Serializes infinite dB values as the string `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub image_size: (usize, usize),
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub device_label: String,
    pub samples_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingRecord>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// Builds the report from scores, sorting by id.
    pub fn from_scores(mut per_image: Vec<ImageScore>) -> Self {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len().max(1) as f64;
        let aggregate = Aggregate {
            mean_psnr: per_image.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
        };
        Self { per_image, aggregate, timing: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self.per_image.iter().map(|s| s.id.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>8}", "id", "PSNR (dB)", "SSIM");
        for s in &self.per_image {
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>8.4}", s.id, fmt_db(s.psnr_db), s.ssim);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>8.4}",
            "mean",
            fmt_db(self.aggregate.mean_psnr),
            self.aggregate.mean_ssim
        );
        out
    }
}

/// Scores already-loaded `(id, result, truth)` triples.
pub fn evaluate_pairs(pairs: &[(String, ImageTensor, ImageTensor)]) -> Result<EvalReport> {
    let scores = pairs
        .par_iter()
        .map(|(id, x, y)| Ok(ImageScore { id: id.clone(), psnr_db: psnr(x, y)?, ssim: ssim(x, y)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(scores))
}

fn image_path(m: &Manifest, e: &ManifestEntry) -> Result<std::path::PathBuf> {
    e.background
        .as_deref()
        .or(e.rainy.as_deref())
        .map(|rel| m.resolve(rel))
        .ok_or_else(|| Error::InvalidParameter(format!("entry `{}` has no image path", e.id)))
}

/// Scores every result image against the truth image with the same id.
/// Entries use their background path, falling back to the rainy path.
pub fn evaluate_corpus(results: &Manifest, truths: &Manifest) -> Result<EvalReport> {
    let mismatched = crate::datastore::id_mismatches(results, truths);
    if !mismatched.is_empty() {
        return Err(Error::IdMismatch(mismatched));
    }
    let scores = results
        .entries()
        .par_iter()
        .zip(truths.entries().par_iter())
        .map(|(r, t)| {
            let x = ImageTensor::load_png(&image_path(results, r)?)?;
            let y = ImageTensor::load_png(&image_path(truths, t)?)?;
            Ok(ImageScore { id: r.id.clone(), psnr_db: psnr(&x, &y)?, ssim: ssim(&x, &y)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(scores))
}

pub fn cpu_device_label() -> String {
    format!("cpu ({} threads)", rayon::current_num_threads())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Times `derain` on seeded synthetic inputs of the given size. Each run uses
/// a different input; no absolute timing is asserted anywhere.
pub fn bench_inference(
    model: &Model,
    size: (usize, usize),
    warmup: usize,
    runs: usize,
    seed: u64,
    device_label: &str,
) -> Result<TimingRecord> {
    if runs == 0 {
        return Err(Error::InvalidParameter("runs must be at least 1".into()));
    }
    let (h, w) = size;
    let mut samples = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let input = procedural_background(h, w, 3, crate::seed::derive_seed(seed, i as u64));
        let started = Instant::now();
        let out = model.derain(&input)?;
        let elapsed = started.elapsed().as_secs_f64();
        std::hint::black_box(out);
        if i >= warmup {
            samples.push(elapsed);
        }
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingRecord {
        image_size: size,
        warmup_runs: warmup,
        measured_runs: runs,
        median_seconds: median(&sorted),
        mean_seconds: samples.iter().sum::<f64>() / runs as f64,
        device_label: device_label.to_string(),
        samples_seconds: samples,
    })
}
