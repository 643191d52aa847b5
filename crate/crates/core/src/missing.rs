//! Missing-modality scenarios and placeholder inputs.
//!
//! A [`Scenario`] states how many samples lose which modalities; a
//! [`MissingPattern`] is one concrete, seeded realization of it over a
//! dataset. Missing modalities are never dropped from the input: they are
//! replaced by a fixed [`placeholder`] so the model always sees the same
//! input structure.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::rng::StreamRng;

/// What kind of raw signal a modality carries; decides its placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Image,
    Text,
    Audio,
}

impl ModalityKind {
    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Image => "image",
            ModalityKind::Text => "text",
            ModalityKind::Audio => "audio",
        }
    }
}

/// Fixed raw input standing in for an absent modality.
///
/// * text: a start token (`e₀`) then an end token (`e₁`), remaining rows zero
///   padding, i.e. the encoding of an empty string;
/// * image: all-one features;
/// * audio: all-zero features.
pub fn placeholder(kind: ModalityKind, seq_len: usize, width: usize) -> Tensor {
    match kind {
        ModalityKind::Image => Tensor::ones(&[seq_len, width]),
        ModalityKind::Audio => Tensor::zeros(&[seq_len, width]),
        ModalityKind::Text => {
            let mut t = Tensor::zeros(&[seq_len, width]);
            let data = t.data_mut();
            data[0] = 1.0;
            if seq_len > 1 && width > 1 {
                data[width + 1] = 1.0;
            }
            t
        }
    }
}

/// Replaces every modality flagged missing in `missing` with its
/// placeholder; present modalities are left untouched.
pub fn apply_placeholder(sample: &Sample, missing: &[bool], kinds: &[ModalityKind]) -> Result<Sample> {
    if missing.len() != sample.features.len() {
        return Err(Error::UnknownModality {
            index: missing.len().max(sample.features.len()) - 1,
            count: missing.len().min(sample.features.len()),
        });
    }
    if kinds.len() < sample.features.len() {
        return Err(Error::UnknownModality {
            index: kinds.len(),
            count: kinds.len(),
        });
    }
    let features = sample
        .features
        .iter()
        .zip(missing)
        .zip(kinds)
        .map(|((f, &gone), &kind)| {
            if gone {
                placeholder(kind, f.rows(), f.cols())
            } else {
                f.clone()
            }
        })
        .collect();
    Ok(Sample {
        features,
        label: sample.label,
    })
}

/// A missing-modality condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scenario {
    Complete,
    /// `modality` is missing in a fraction `rate` of samples.
    Single { modality: usize, rate: f64 },
    /// A total budget `rate` split evenly over `modalities`; each listed
    /// modality is missing in `rate / |modalities|` of the samples, on
    /// disjoint sample sets.
    Multi { modalities: Vec<usize>, rate: f64 },
}

impl Scenario {
    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        let check = |m: usize| {
            if m < n_modalities {
                Ok(())
            } else {
                Err(Error::UnknownModality {
                    index: m,
                    count: n_modalities,
                })
            }
        };
        let check_rate = |r: f64| {
            if (0.0..=1.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::InvalidRate(r))
            }
        };
        match self {
            Scenario::Complete => Ok(()),
            Scenario::Single { modality, rate } => {
                check(*modality)?;
                check_rate(*rate)
            }
            Scenario::Multi { modalities, rate } => {
                if modalities.is_empty() {
                    return Err(Error::EmptyMissingSet);
                }
                let mut sorted = modalities.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != modalities.len() {
                    return Err(Error::config("scenario.modalities", "duplicate modality"));
                }
                modalities.iter().try_for_each(|&m| check(m))?;
                check_rate(*rate)
            }
        }
    }

    /// Requested per-modality missing rate.
    pub fn requested_rates(&self, n_modalities: usize) -> Vec<f64> {
        let mut rates = vec![0.0; n_modalities];
        match self {
            Scenario::Complete => {}
            Scenario::Single { modality, rate } => rates[*modality] = *rate,
            Scenario::Multi { modalities, rate } => {
                for &m in modalities {
                    rates[m] = rate / modalities.len() as f64;
                }
            }
        }
        rates
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Complete => write!(f, "complete"),
            Scenario::Single { modality, rate } => write!(f, "single:{modality}:{rate}"),
            Scenario::Multi { modalities, rate } => {
                let ms: Vec<String> = modalities.iter().map(usize::to_string).collect();
                write!(f, "multi:{}:{rate}", ms.join(","))
            }
        }
    }
}

/// Parses `complete`, `single:<m>:<rate>` or `multi:<m>,<m>:<rate>`.
/// Modalities may be given by index or by kind name for the default
/// image/text/audio ordering.
impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("scenario", format!("cannot parse `{s}`"));
        let modality = |t: &str| -> Result<usize> {
            match t {
                "image" => Ok(0),
                "text" => Ok(1),
                "audio" => Ok(2),
                _ => t.parse().map_err(|_| bad()),
            }
        };
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["complete"] => Ok(Scenario::Complete),
            ["single", m, r] => Ok(Scenario::Single {
                modality: modality(m)?,
                rate: r.parse().map_err(|_| bad())?,
            }),
            ["multi", ms, r] => Ok(Scenario::Multi {
                modalities: ms.split(',').map(modality).collect::<Result<_>>()?,
                rate: r.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Which modalities each sample is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingPattern {
    pub scenario: Scenario,
    /// `flags[i][m]` is true when modality `m` of sample `i` is missing.
    pub flags: Vec<Vec<bool>>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Exact per-modality missing counts for a scenario over `n` samples.
///
/// Counts are rounded half-up; under a multi scenario the last modality
/// absorbs the rounding residual so the counts sum to the rounded total
/// budget.
pub fn missing_counts(n: usize, scenario: &Scenario, n_modalities: usize) -> Vec<usize> {
    let mut counts = vec![0; n_modalities];
    match scenario {
        Scenario::Complete => {}
        Scenario::Single { modality, rate } => counts[*modality] = round_half_up(rate * n as f64),
        Scenario::Multi { modalities, rate } => {
            let budget = round_half_up(rate * n as f64).min(n);
            let share = rate / modalities.len() as f64;
            let mut assigned = 0;
            for (i, &m) in modalities.iter().enumerate() {
                let c = if i + 1 == modalities.len() {
                    budget.saturating_sub(assigned)
                } else {
                    round_half_up(share * n as f64).min(budget - assigned)
                };
                counts[m] = c;
                assigned += c;
            }
        }
    }
    counts
}

/// Draws a pattern for `n` samples realizing `scenario` exactly.
pub fn sample_missing_pattern(
    n: usize,
    n_modalities: usize,
    scenario: &Scenario,
    rng: &mut StreamRng,
) -> Result<MissingPattern> {
    scenario.validate(n_modalities)?;
    let counts = missing_counts(n, scenario, n_modalities);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![vec![false; n_modalities]; n];
    let mut cursor = 0;
    for (m, &c) in counts.iter().enumerate() {
        for &i in &order[cursor..cursor + c] {
            flags[i][m] = true;
        }
        if matches!(scenario, Scenario::Multi { .. }) {
            cursor += c;
        }
    }
    Ok(MissingPattern {
        scenario: scenario.clone(),
        flags,
    })
}

impl MissingPattern {
    pub fn complete(n: usize, n_modalities: usize) -> Self {
        Self {
            scenario: Scenario::Complete,
            flags: vec![vec![false; n_modalities]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Per-modality missing counts.
    pub fn counts(&self) -> Vec<usize> {
        let k = self.flags.first().map_or(0, Vec::len);
        let mut counts = vec![0; k];
        for row in &self.flags {
            for (c, &f) in counts.iter_mut().zip(row) {
                *c += usize::from(f);
            }
        }
        counts
    }

    /// Empirical per-modality missing rates.
    pub fn verify_missing_statistics(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Applies the pattern to `samples`, in order.
    pub fn apply(&self, samples: &[Sample], kinds: &[ModalityKind]) -> Result<Vec<Sample>> {
        if samples.len() != self.len() {
            return Err(Error::Shape {
                op: "apply_pattern",
                shapes: vec![vec![samples.len()], vec![self.len()]],
            });
        }
        samples
            .iter()
            .zip(&self.flags)
            .map(|(s, f)| apply_placeholder(s, f, kinds))
            .collect()
    }

    /// Writes one JSON object per sample: `{"sample": i, "missing": [...]}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            sample: usize,
            missing: &'a [bool],
        }
        for (i, flags) in self.flags.iter().enumerate() {
            serde_json::to_writer(&mut out, &Line { sample: i, missing: flags })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
