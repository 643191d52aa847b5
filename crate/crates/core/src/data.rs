//! Synthetic multimodal classification tasks with controlled shared and
//! private class signal.
//!
//! Generative process for a sample of class `y`:
//!
//! 1. A shared latent `z = s_y + τ·n` is drawn once per sample from the
//!    class's shared prototype `s_y`; every modality sees the same `z`.
//! 2. Each modality `m` draws its own private latent `q_m = p_{m,y} + τ·n`
//!    from its private prototype.
//! 3. Every content token of modality `m` is `[z, q_m, 0] + σ_m·n`, where the
//!    trailing block is pure-noise dimensions.
//!
//! Prototypes are scaled one-hot vectors with a seeded class-to-axis
//! permutation per block (random Gaussian directions when a block has fewer
//! dimensions than there are classes), so every seed gives a task of the same
//! difficulty. Shared dimensions make the modalities redundant for part of
//! the class signal; private dimensions make each modality carry information
//! the others lack. `τ` (latent jitter) and `σ_m` (token noise) set the
//! difficulty.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::missing::ModalityKind;
use crate::rng::SeedTree;

/// One multimodal sample: a `[seq_len, width]` raw feature matrix per
/// modality plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<Tensor>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub shared_dims: usize,
    pub private_dims: usize,
    pub noise_dims: usize,
    /// Standard deviation of per-token noise.
    pub noise_std: f64,
}

impl ModalitySpec {
    pub fn width(&self) -> usize {
        self.shared_dims + self.private_dims + self.noise_dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub modalities: Vec<ModalitySpec>,
    pub n_classes: usize,
    pub seq_len: usize,
    /// Scale of the class prototypes.
    pub signal_scale: f64,
    /// Standard deviation of the per-sample latent jitter.
    pub latent_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::vision_language()
    }
}

impl SyntheticTaskSpec {
    fn modality(kind: ModalityKind) -> ModalitySpec {
        ModalitySpec {
            kind,
            shared_dims: 4,
            private_dims: 4,
            noise_dims: 8,
            noise_std: 1.0,
        }
    }

    /// Two modalities (image-like, text-like), four classes.
    pub fn vision_language() -> Self {
        Self {
            modalities: vec![Self::modality(ModalityKind::Image), Self::modality(ModalityKind::Text)],
            n_classes: 4,
            seq_len: 8,
            signal_scale: 1.0,
            latent_std: 0.4,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
        }
    }

    /// Three modalities (image-like, text-like, audio-like).
    pub fn vision_language_audio() -> Self {
        let mut spec = Self::vision_language();
        spec.modalities.push(Self::modality(ModalityKind::Audio));
        spec
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        self.modalities.iter().map(ModalitySpec::width).collect()
    }

    pub fn kinds(&self) -> Vec<ModalityKind> {
        self.modalities.iter().map(|m| m.kind).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n_modalities()) {
            return Err(Error::config("task.modalities", "expected 2 or 3 modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.shared_dims + m.private_dims == 0 {
                return Err(Error::config(
                    format!("task.modalities[{i}]"),
                    "infeasible split: no class-informative dimensions",
                ));
            }
            if self.modalities.iter().any(|o| o.shared_dims != m.shared_dims) {
                return Err(Error::config(
                    format!("task.modalities[{i}].shared_dims"),
                    "infeasible split: shared dimensions must agree across modalities",
                ));
            }
            if !(m.noise_std >= 0.0 && m.noise_std.is_finite()) {
                return Err(Error::config(format!("task.modalities[{i}].noise_std"), "must be finite and >= 0"));
            }
        }
        if !(self.latent_std >= 0.0 && self.latent_std.is_finite()) {
            return Err(Error::config("task.latent_std", "must be finite and >= 0"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("task.n_classes", "need at least two classes"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("task.seq_len", "must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("task.n_train", "every split needs at least one sample"));
        }
        Ok(())
    }
}

/// Class prototypes drawn once per task.
struct Prototypes {
    shared: Vec<Vec<f64>>,
    private: Vec<Vec<Vec<f64>>>,
}

fn prototypes(rng: &mut impl Rng, dims: usize, n_classes: usize, scale: f64) -> Vec<Vec<f64>> {
    if dims >= n_classes {
        let mut axes: Vec<usize> = (0..dims).collect();
        axes.shuffle(rng);
        axes[..n_classes]
            .iter()
            .map(|&a| {
                let mut v = vec![0.0; dims];
                v[a] = scale;
                v
            })
            .collect()
    } else {
        (0..n_classes)
            .map(|_| (0..dims).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }
}

fn balanced_labels(n: usize, n_classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    labels
}

fn draw_sample(spec: &SyntheticTaskSpec, protos: &Prototypes, label: usize, rng: &mut impl Rng) -> Sample {
    let tau = spec.latent_std;
    let shared_latent: Vec<f64> = protos.shared[label]
        .iter()
        .map(|&v| v + tau * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let features = spec
        .modalities
        .iter()
        .enumerate()
        .map(|(m, ms)| {
            let sigma = ms.noise_std;
            let private_latent: Vec<f64> = protos.private[m][label]
                .iter()
                .map(|&v| v + tau * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let width = ms.width();
            let mut data = Vec::with_capacity(spec.seq_len * width);
            for _ in 0..spec.seq_len {
                for &base in shared_latent
                    .iter()
                    .chain(&private_latent)
                    .chain(std::iter::repeat_n(&0.0, ms.noise_dims))
                {
                    data.push(base + sigma * rng.sample::<f64, _>(StandardNormal));
                }
            }
            Tensor::new(vec![spec.seq_len, width], data).expect("positive shape")
        })
        .collect();
    Sample { features, label }
}

/// Draws train/val/test splits, deterministic in `seeds`.
///
/// Labels are balanced within each split (class counts differ by at most
/// one).
pub fn generate_synthetic(spec: &SyntheticTaskSpec, seeds: &SeedTree) -> Result<Splits> {
    spec.validate()?;
    let mut rng = seeds.stream("data");
    let shared_dims = spec.modalities[0].shared_dims;
    let protos = Prototypes {
        shared: prototypes(&mut rng, shared_dims, spec.n_classes, spec.signal_scale),
        private: spec
            .modalities
            .iter()
            .map(|ms| prototypes(&mut rng, ms.private_dims, spec.n_classes, spec.signal_scale))
            .collect(),
    };
    let mut split = |n: usize| -> Vec<Sample> {
        balanced_labels(n, spec.n_classes, &mut rng)
            .into_iter()
            .map(|y| draw_sample(spec, &protos, y, &mut rng))
            .collect()
    };
    let train = split(spec.n_train);
    let val = split(spec.n_val);
    let test = split(spec.n_test);
    Ok(Splits { train, val, test })
}
