//! Prompt tuning of the replay buffers (and the head) on a frozen backbone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{probabilities, Metrics};
use super::optim::{OptimizerConfig, Sgd};
use crate::backbone::{BackboneWeights, Head};
use crate::data::{Sample, Splits};
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor};
use crate::missing::{sample_missing_pattern, ModalityKind, MissingPattern, Scenario};
use crate::rep::{rep_forward, RepConfig, RepState};
use crate::rng::SeedTree;

/// One row of the tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of `cross-entropy + λ·ortho` over the epoch.
    pub loss: f64,
    pub task_loss: f64,
    pub ortho_loss: f64,
    /// Private gates `α_m` at the end of the epoch.
    pub alpha: Vec<f64>,
    /// Shared gate `ε_s` at the end of the epoch.
    pub eps_shared: Option<f64>,
    pub beta_private: f64,
    pub beta_shared: f64,
    /// Orthogonality pairs skipped because a buffer had zero norm.
    pub degenerate_pairs: usize,
}

/// Tuned parameters and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub rep: RepState,
    pub head: Head,
    pub log: Vec<EpochLog>,
}

/// Where training samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    /// Train under the same missing scenario as evaluation.
    #[default]
    Matched,
    /// Train on complete data only.
    Complete,
}

/// Samples of `split` with a freshly drawn pattern of `scenario` applied.
/// The pattern stream is named after `tag` and the scenario.
pub fn apply_scenario(
    samples: &[Sample],
    scenario: &Scenario,
    kinds: &[ModalityKind],
    seeds: &SeedTree,
    tag: &str,
) -> Result<(Vec<Sample>, MissingPattern)> {
    let k = kinds.len();
    let mut rng = seeds.stream(&format!("pattern/{tag}/{scenario}"));
    let pattern = sample_missing_pattern(samples.len(), k, scenario, &mut rng)?;
    Ok((pattern.apply(samples, kinds)?, pattern))
}

fn snapshot(rep: &RepState, head: &Head, context: &str) -> String {
    let (alpha, eps) = rep.gates();
    let (bp, bs) = rep.betas();
    let head_norm = head.weight.norm();
    let buffer_norms: Vec<f64> = rep.private.iter().chain(rep.shared.iter()).map(Tensor::norm).collect();
    format!(
        "{context}; alpha={alpha:?} eps_shared={eps:?} beta=({bp}, {bs}) buffer_norms={buffer_norms:?} head_norm={head_norm}"
    )
}

/// Optimizes cross-entropy plus `λ`·orthogonality over the buffers, maps,
/// gates, replay weights and head. The backbone is only read.
///
/// A non-finite value anywhere in a step aborts with
/// [`Error::Diverged`] carrying a snapshot of the gates and buffer norms.
pub fn train_rep(
    backbone: &BackboneWeights,
    config: &RepConfig,
    splits: &Splits,
    scenario: &Scenario,
    regime: TrainRegime,
    kinds: &[ModalityKind],
    optimizer: &OptimizerConfig,
    seeds: &SeedTree,
) -> Result<TuneOutcome> {
    if !backbone.frozen {
        return Err(Error::Compatibility("backbone checkpoint is not marked frozen".into()));
    }
    config.check_backbone(&backbone.config)?;
    optimizer.validate("optimizer")?;
    scenario.validate(backbone.config.n_modalities())?;

    let mut rep = RepState::init(config, backbone, &splits.val, seeds)?;
    let mut head = backbone.head.clone();
    let train = match regime {
        TrainRegime::Matched => apply_scenario(&splits.train, scenario, kinds, seeds, "train")?.0,
        TrainRegime::Complete => splits.train.clone(),
    };
    let mut sgd = Sgd::new(optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(optimizer.epochs);
    let lambda = config.ortho_weight;

    for epoch in 0..optimizer.epochs {
        order.shuffle(&mut seeds.stream(&format!("shuffle/tune/{epoch}")));
        let (mut total, mut task, mut ortho, mut degenerate) = (0.0, 0.0, 0.0, 0);
        for (step, batch) in order.chunks(optimizer.batch_size).enumerate() {
            let diverged = |e: Error, rep: &RepState, head: &Head| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    step,
                    snapshot: snapshot(rep, head, &format!("non-finite value in {op}")),
                },
                other => other,
            };
            let grads = (|| -> Result<_> {
                let graph = Graph::new();
                let bb = backbone.bind(&graph, false);
                let bound_head = head.bind(&graph, true);
                let bound = rep.bind(&graph, true)?;
                let mut loss = graph.scalar(0.0);
                let (mut t_sum, mut o_sum) = (0.0, 0.0);
                for &i in batch {
                    let sample = &train[i];
                    let out = rep_forward(&bb, &bound_head, &bound, sample)?;
                    let ce = out.logits.cross_entropy(sample.label)?;
                    t_sum += ce.item();
                    let mut term = ce;
                    if let Some(o) = out.ortho {
                        o_sum += o.value.item();
                        degenerate += o.degenerate_pairs;
                        if lambda > 0.0 {
                            term = term.add(o.value.scale(lambda)?)?;
                        }
                    }
                    loss = loss.add(term)?;
                }
                let loss = loss.scale(1.0 / batch.len() as f64)?;
                let grads = graph.backward(loss)?;
                let rep_grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.of(v)).collect();
                let head_grads: Vec<Tensor> = bound_head.vars().into_iter().map(|v| grads.of(v)).collect();
                Ok((loss.item(), t_sum, o_sum, rep_grads, head_grads))
            })()
            .map_err(|e| diverged(e, &rep, &head))?;
            let (loss, t_sum, o_sum, rep_grads, head_grads) = grads;
            if !loss.is_finite() || rep_grads.iter().chain(&head_grads).any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    snapshot: snapshot(&rep, &head, "non-finite loss or gradient"),
                });
            }
            total += loss * batch.len() as f64;
            task += t_sum;
            ortho += o_sum;
            let mut params = rep.tensors_mut();
            params.extend(head.tensors_mut());
            let mut all = rep_grads;
            all.extend(head_grads);
            sgd.step(params, &all);
        }
        let n = train.len() as f64;
        let (alpha, eps_shared) = rep.gates();
        let (beta_private, beta_shared) = rep.betas();
        log.push(EpochLog {
            epoch,
            loss: total / n,
            task_loss: task / n,
            ortho_loss: ortho / n,
            alpha,
            eps_shared,
            beta_private,
            beta_shared,
            degenerate_pairs: degenerate,
        });
    }
    Ok(TuneOutcome { rep, head, log })
}

/// Class probabilities of the tuned model on already-masked samples.
pub fn rep_scores(backbone: &BackboneWeights, rep: &RepState, head: &Head, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let graph = Graph::new();
        let bb = backbone.bind(&graph, false);
        let bound_head = head.bind(&graph, false);
        let bound = rep.bind(&graph, false)?;
        for s in chunk {
            let logits = rep_forward(&bb, &bound_head, &bound, s)?.logits.value();
            out.push(probabilities(logits.data()));
        }
    }
    Ok(out)
}

/// Metrics of the tuned model on `samples` under one missing scenario.
pub fn evaluate_scenario(
    backbone: &BackboneWeights,
    rep: &RepState,
    head: &Head,
    samples: &[Sample],
    scenario: &Scenario,
    kinds: &[ModalityKind],
    seeds: &SeedTree,
) -> Result<Metrics> {
    let (masked, _) = apply_scenario(samples, scenario, kinds, seeds, "test")?;
    let scores = rep_scores(backbone, rep, head, &masked)?;
    let labels: Vec<usize> = masked.iter().map(|s| s.label).collect();
    Ok(Metrics::from_scores(&labels, &scores, backbone.config.n_classes))
}
