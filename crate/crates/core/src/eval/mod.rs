//! Reconstruction sweeps and linear probing.

pub mod metrics;
pub mod probe;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{Codec, Image};
use crate::error::{bail_validation, Error, Result};
use crate::flow::{gaussian_noise, GuidanceMode, GuidanceParams, SamplerStats};
use crate::repa::FeatureOracle;
use crate::tokenizer::Tokenizer;

pub use probe::{linear_probe, ProbeRecipe, ProbeResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconMetrics {
    pub mae: f64,
    pub psnr: f64,
    pub feature_distance: f64,
}

/// Decoder sampling settings for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance: GuidanceParams,
    pub batch_size: usize,
    /// Noise for image `i` comes from stream `i` of a generator with this seed.
    pub seed: u64,
}

/// Starting noise for one image, independent of batching and of `k`.
pub fn image_noise(seed: u64, index: usize, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    gaussian_noise(&mut rng, len)
}

/// Reconstructions of `images` (dataset indices `indices`) from their
/// first `k` tokens.
pub fn reconstruct_batch(
    tok: &Tokenizer,
    codec: &Codec,
    images: &[Image],
    indices: &[usize],
    k: usize,
    sampler: &SamplerSettings,
) -> Result<(Vec<Image>, SamplerStats)> {
    if k == 0 || k > tok.spec.k_max {
        return Err(Error::OutOfRange { what: "k", value: k as i64, valid: format!("[1, {}]", tok.spec.k_max) });
    }
    let mut out = Vec::with_capacity(images.len());
    let mut stats = SamplerStats::default();
    let len = tok.spec.geometry.latent_len();
    for (chunk, idx) in images.chunks(sampler.batch_size.max(1)).zip(indices.chunks(sampler.batch_size.max(1))) {
        let lat = chunk.iter().map(|im| codec.encode_pixels(im)).collect::<Result<Vec<_>>>()?;
        let tokens = tok.tokenize(&lat, k)?;
        let eps: Vec<f32> = idx.iter().flat_map(|&i| image_noise(sampler.seed, i, len)).collect();
        let (grids, s) = tok.detokenize_with_noise(&tokens, &eps, sampler.steps, &sampler.guidance)?;
        stats.steps = s.steps;
        stats.apg_bound_violations += s.apg_bound_violations;
        stats.apg_max_ratio = stats.apg_max_ratio.max(s.apg_max_ratio);
        for g in &grids {
            out.push(codec.decode_latents(g)?);
        }
    }
    Ok((out, stats))
}

/// Per-image metrics against the originals.
pub fn score(originals: &[Image], recons: &[Image], indices: &[usize], oracle: &mut FeatureOracle) -> Result<Vec<ReconMetrics>> {
    originals
        .iter()
        .zip(recons)
        .zip(indices)
        .map(|((a, b), &i)| {
            Ok(ReconMetrics {
                mae: metrics::mae(a, b)?,
                psnr: metrics::psnr(a, b)?,
                feature_distance: metrics::feature_distance(&oracle.features(i, a)?, &oracle.features(i, b)?)?,
            })
        })
        .collect()
}

fn mean(rows: &[ReconMetrics]) -> ReconMetrics {
    let n = rows.len().max(1) as f64;
    ReconMetrics {
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        feature_distance: rows.iter().map(|r| r.feature_distance).sum::<f64>() / n,
    }
}

/// Reconstruct one image from its first `k` tokens and score it.
pub fn reconstruct(
    tok: &Tokenizer,
    codec: &Codec,
    image: &Image,
    index: usize,
    k: usize,
    sampler: &SamplerSettings,
    oracle: &mut FeatureOracle,
) -> Result<(Image, ReconMetrics)> {
    let (mut imgs, _) = reconstruct_batch(tok, codec, std::slice::from_ref(image), &[index], k, sampler)?;
    let img = imgs.remove(0);
    let m = score(std::slice::from_ref(image), std::slice::from_ref(&img), &[index], oracle)?.remove(0);
    Ok((img, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateDistortionRow {
    pub k_tokens: usize,
    pub mae: f64,
    pub psnr: f64,
    pub feature_distance: f64,
    pub n_images: usize,
    pub seed: u64,
}

/// `1, 2, 4, …` up to and including `k_max`.
pub fn pow2_ks(k_max: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..usize::BITS).map(|i| 1usize << i).take_while(|&k| k <= k_max).collect();
    if ks.last() != Some(&k_max) {
        ks.push(k_max);
    }
    ks
}

/// One row per `k`, in the given order.
pub fn rate_distortion_sweep(
    tok: &Tokenizer,
    codec: &Codec,
    images: &[Image],
    ks: &[usize],
    sampler: &SamplerSettings,
    oracle: &mut FeatureOracle,
) -> Result<Vec<RateDistortionRow>> {
    let indices: Vec<usize> = (0..images.len()).collect();
    ks.iter()
        .map(|&k| {
            let (rec, _) = reconstruct_batch(tok, codec, images, &indices, k, sampler)?;
            let m = mean(&score(images, &rec, &indices, oracle)?);
            log::info!("k = {k}: mae {:.4} psnr {:.2}", m.mae, m.psnr);
            Ok(RateDistortionRow {
                k_tokens: k,
                mae: m.mae,
                psnr: m.psnr,
                feature_distance: m.feature_distance,
                n_images: images.len(),
                seed: sampler.seed,
            })
        })
        .collect()
}

/// Adjacent rows where MAE rises by more than `tol`: `(k_prev, k, increase)`.
pub fn monotonicity_violations(rows: &[RateDistortionRow], tol: f64) -> Vec<(usize, usize, f64)> {
    rows.windows(2)
        .filter(|w| w[1].mae > w[0].mae + tol)
        .map(|w| (w[0].k_tokens, w[1].k_tokens, w[1].mae - w[0].mae))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceRow {
    pub mode: String,
    pub scale: f64,
    pub k_tokens: usize,
    pub mae: f64,
    pub psnr: f64,
    pub feature_distance: f64,
    pub apg_bound_violations: usize,
    pub apg_max_ratio: f64,
}

pub fn guidance_sweep(
    tok: &Tokenizer,
    codec: &Codec,
    images: &[Image],
    k: usize,
    mode: GuidanceMode,
    scales: &[f64],
    sampler: &SamplerSettings,
    oracle: &mut FeatureOracle,
) -> Result<Vec<GuidanceRow>> {
    let indices: Vec<usize> = (0..images.len()).collect();
    scales
        .iter()
        .map(|&scale| {
            let s = SamplerSettings { guidance: GuidanceParams { mode, scale, ..sampler.guidance }, ..*sampler };
            let (rec, stats) = reconstruct_batch(tok, codec, images, &indices, k, &s)?;
            let m = mean(&score(images, &rec, &indices, oracle)?);
            Ok(GuidanceRow {
                mode: format!("{mode:?}").to_lowercase(),
                scale,
                k_tokens: k,
                mae: m.mae,
                psnr: m.psnr,
                feature_distance: m.feature_distance,
                apg_bound_violations: stats.apg_bound_violations,
                apg_max_ratio: stats.apg_max_ratio,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub steps: usize,
    pub k_tokens: usize,
    pub mae: f64,
    pub psnr: f64,
    pub feature_distance: f64,
}

pub fn step_sweep(
    tok: &Tokenizer,
    codec: &Codec,
    images: &[Image],
    k: usize,
    steps: &[usize],
    sampler: &SamplerSettings,
    oracle: &mut FeatureOracle,
) -> Result<Vec<StepRow>> {
    let indices: Vec<usize> = (0..images.len()).collect();
    steps
        .iter()
        .map(|&n| {
            if n == 0 {
                bail_validation!("step counts must be ≥ 1");
            }
            let s = SamplerSettings { steps: n, ..*sampler };
            let (rec, _) = reconstruct_batch(tok, codec, images, &indices, k, &s)?;
            let m = mean(&score(images, &rec, &indices, oracle)?);
            Ok(StepRow { steps: n, k_tokens: k, mae: m.mae, psnr: m.psnr, feature_distance: m.feature_distance })
        })
        .collect()
}

/// Write serializable rows as CSV with a header row in field order.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RD_HEADER: [&str; 6] = ["k_tokens", "mae", "psnr", "feature_distance", "n_images", "seed"];
pub const GUIDANCE_HEADER: [&str; 8] =
    ["mode", "scale", "k_tokens", "mae", "psnr", "feature_distance", "apg_bound_violations", "apg_max_ratio"];
pub const STEP_HEADER: [&str; 5] = ["steps", "k_tokens", "mae", "psnr", "feature_distance"];
