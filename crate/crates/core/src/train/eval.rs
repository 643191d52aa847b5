use serde::{Deserialize, Serialize};

use super::checkpoint::{count_trainable_fraction, sha256_hex, Checkpoint};
use super::tune::evaluate_scenario;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::missing::{ModalityKind, Scenario};
use crate::rng::SeedTree;

/// Metrics under one missing scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: String,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One entry per requested scenario, in request order.
    pub scenarios: Vec<ScenarioMetrics>,
    pub param_fraction: f64,
    pub seed: u64,
    /// SHA-256 of the model configs in the checkpoint.
    pub config_hash: String,
}

impl MetricsReport {
    pub fn get(&self, scenario: &Scenario) -> Option<&ScenarioMetrics> {
        let key = scenario.to_string();
        self.scenarios.iter().find(|s| s.scenario == key)
    }
}

/// Hash of the configs that define a checkpoint's model.
pub fn config_hash(checkpoint: &Checkpoint) -> Result<String> {
    let value = serde_json::json!({
        "backbone": checkpoint.backbone_config,
        "rep": checkpoint.rep_config,
    });
    Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
}

/// Evaluates a tuned checkpoint on `samples` once per scenario. Each
/// scenario's missing pattern is drawn from its own named stream of
/// `seeds`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    samples: &[Sample],
    scenarios: &[Scenario],
    kinds: &[ModalityKind],
    seeds: &SeedTree,
) -> Result<MetricsReport> {
    if scenarios.is_empty() {
        return Err(Error::EmptyScenarios);
    }
    let backbone = checkpoint.backbone()?;
    let rep = checkpoint.rep()?;
    let head = checkpoint.head()?;
    let mut out = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        scenario.validate(backbone.config.n_modalities())?;
        let m = evaluate_scenario(&backbone, &rep, &head, samples, scenario, kinds, seeds)?;
        out.push(ScenarioMetrics {
            scenario: scenario.to_string(),
            accuracy: m.accuracy,
            f1_macro: m.f1_macro,
            auroc: m.auroc,
        });
    }
    Ok(MetricsReport {
        scenarios: out,
        param_fraction: count_trainable_fraction(checkpoint),
        seed: seeds.root(),
        config_hash: config_hash(checkpoint)?,
    })
}

/// Outcome of a paired one-sided sign test of "a beats b".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Paired one-sided sign test: `p = P(X ≥ wins)` for `X ~ Binomial(wins +
/// losses, 1/2)`. Ties are dropped; with no untied pairs `p = 1`.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "paired samples");
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    SignTest {
        wins,
        losses,
        ties: a.len() - n,
        p_value: if n == 0 { 1.0 } else { p.min(1.0) },
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
