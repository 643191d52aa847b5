//! Buffer initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::NoiseType;
use crate::backbone::BackboneWeights;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{kernels, Tensor};
use crate::rng::SeedTree;

/// One unit-variance draw from `noise_type`.
pub fn sample_noise(noise_type: NoiseType, rng: &mut impl Rng) -> f64 {
    match noise_type {
        NoiseType::Gaussian => rng.sample(StandardNormal),
        NoiseType::Uniform => {
            let half = 3f64.sqrt();
            rng.random_range(-half..half)
        }
        NoiseType::Laplace => {
            // inverse CDF with scale 1/sqrt(2), variance 2b² = 1
            let b = std::f64::consts::FRAC_1_SQRT_2;
            let u: f64 = rng.random::<f64>() - 0.5;
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
    }
}

/// Mean layer-0 content embedding of `modality` over the calibration
/// samples and their tokens, tiled to `width` rows.
pub fn embedding_summary(
    backbone: &BackboneWeights,
    calibration: &[Sample],
    modality: usize,
    width: usize,
) -> Result<Tensor> {
    let cfg = &backbone.config;
    cfg.check_modality(modality)?;
    if calibration.is_empty() {
        return Err(Error::config("rep.calibration_samples", "no calibration samples available"));
    }
    let enc = &backbone.encoders[modality];
    let d = cfg.d_model;
    let w = cfg.feature_widths[modality];
    let mut mean_raw = vec![0.0; cfg.seq_len * w];
    for s in calibration {
        let raw = &s.features[modality];
        if raw.shape() != [cfg.seq_len, w] {
            return Err(Error::Shape {
                op: "embedding_summary",
                shapes: vec![raw.shape().to_vec(), vec![cfg.seq_len, w]],
            });
        }
        for (acc, v) in mean_raw.iter_mut().zip(raw.data()) {
            *acc += v;
        }
    }
    mean_raw.iter_mut().for_each(|v| *v /= calibration.len() as f64);
    // the embedding is affine, so the mean of embeddings is the embedding of
    // the mean input
    let emb = kernels::matmul(&mean_raw, enc.embed.data(), cfg.seq_len, w, d);
    let mut row = vec![0.0; d];
    for t in 0..cfg.seq_len {
        for j in 0..d {
            row[j] += emb[t * d + j] + enc.pos.get(t, j);
        }
    }
    row.iter_mut().for_each(|v| *v /= cfg.seq_len as f64);
    Tensor::new(vec![1, d], row)?.tile_rows(width)
}

/// `summary + ε_n · noise`, with unit-variance noise drawn from a stream
/// private to `modality`, so two modalities never share a draw.
pub fn init_private_buffer(
    summary: &Tensor,
    noise_intensity: f64,
    noise_type: NoiseType,
    seeds: &SeedTree,
    modality: usize,
) -> Result<Tensor> {
    if !(noise_intensity >= 0.0) {
        return Err(Error::NegativeNoise(noise_intensity));
    }
    let mut rng = seeds.stream(&format!("noise/private/{modality}"));
    let mut out = summary.clone();
    for v in out.data_mut() {
        *v += noise_intensity * sample_noise(noise_type, &mut rng);
    }
    Ok(out)
}

/// A standard Gaussian `width × d_model` draw scaled to unit L2 norm.
pub fn init_shared_buffer(width: usize, d_model: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if width == 0 || d_model == 0 {
        return Err(Error::InvalidShape(vec![width, d_model]));
    }
    loop {
        let t = Tensor::gaussian(&[width, d_model], 1.0, rng);
        let norm = t.norm();
        if norm > 0.0 {
            return Ok(t.map(|v| v / norm));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_returns_summary() {
        let summary = Tensor::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0]]).unwrap();
        let out = init_private_buffer(&summary, 0.0, NoiseType::Laplace, &SeedTree::new(1), 0).unwrap();
        assert!(out.bitwise_eq(&summary));
    }

    #[test]
    fn negative_noise_is_rejected() {
        let summary = Tensor::zeros(&[1, 2]);
        let err = init_private_buffer(&summary, -0.1, NoiseType::Gaussian, &SeedTree::new(1), 0);
        assert!(matches!(err, Err(Error::NegativeNoise(_))));
    }

    #[test]
    fn modalities_draw_independent_noise() {
        let seeds = SeedTree::new(3);
        let summary = Tensor::zeros(&[4, 8]);
        let a = init_private_buffer(&summary, 1.0, NoiseType::Gaussian, &seeds, 0).unwrap();
        let b = init_private_buffer(&summary, 1.0, NoiseType::Gaussian, &seeds, 1).unwrap();
        assert!(a.max_abs_diff(&b) > 0.1);
    }

    #[test]
    fn shared_buffer_has_unit_norm() {
        let t = init_shared_buffer(3, 5, &mut SeedTree::new(0).stream("s")).unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-12);
    }
}
