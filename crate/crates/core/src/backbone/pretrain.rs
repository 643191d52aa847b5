use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::forward::plain_logits;
use super::weights::BackboneWeights;
use crate::data::{Sample, Splits};
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor};
use crate::rng::SeedTree;
use crate::train::metrics::{accuracy, argmax};
use crate::train::optim::{OptimizerConfig, Sgd};

/// Record of a pretraining run, embedded in the backbone checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub threshold: f64,
    pub majority_rate: f64,
}

/// Predicted classes of the prompt-free backbone.
pub fn plain_predictions(weights: &BackboneWeights, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .chunks(64)
        .map(|chunk| {
            let graph = Graph::new();
            let bb = weights.bind(&graph, false);
            let head = weights.head.bind(&graph, false);
            chunk
                .iter()
                .map(|s| Ok(argmax(plain_logits(&bb, &head, s)?.value().data())))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

pub fn plain_accuracy(weights: &BackboneWeights, samples: &[Sample]) -> Result<f64> {
    let preds = plain_predictions(weights, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(accuracy(&labels, &preds))
}

fn majority_rate(samples: &[Sample], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes];
    for s in samples {
        counts[s.label] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / samples.len().max(1) as f64
}

/// Trains encoders and head jointly on complete-modality data.
///
/// Fails with [`Error::NonConvergence`] when held-out (validation) accuracy
/// ends below `threshold`. The returned weights are marked frozen, ready for
/// prompt tuning.
pub fn pretrain_backbone(
    config: &BackboneConfig,
    splits: &Splits,
    optimizer: &OptimizerConfig,
    threshold: f64,
    seeds: &SeedTree,
) -> Result<(BackboneWeights, PretrainReport)> {
    config.validate()?;
    optimizer.validate("pretrain")?;
    let mut weights = BackboneWeights::init(config, &mut seeds.stream("init/backbone"))?;
    let mut sgd = Sgd::new(optimizer);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(optimizer.epochs);

    for epoch in 0..optimizer.epochs {
        order.shuffle(&mut seeds.stream(&format!("shuffle/pretrain/{epoch}")));
        let mut total = 0.0;
        for batch in order.chunks(optimizer.batch_size) {
            let graph = Graph::new();
            let bb = weights.bind(&graph, true);
            let head = weights.head.bind(&graph, true);
            let mut loss = graph.scalar(0.0);
            for &i in batch {
                let sample = &splits.train[i];
                let ce = plain_logits(&bb, &head, sample)?.cross_entropy(sample.label)?;
                loss = loss.add(ce)?;
            }
            let loss = loss.scale(1.0 / batch.len() as f64)?;
            total += loss.item() * batch.len() as f64;
            let grads = graph.backward(loss)?;
            let grads: Vec<Tensor> = bb.vars().into_iter().chain(head.vars()).map(|v| grads.of(v)).collect();
            sgd.step(weights.tensors_mut(), &grads);
        }
        epoch_losses.push(total / splits.train.len() as f64);
    }

    let report = PretrainReport {
        epoch_losses,
        train_accuracy: plain_accuracy(&weights, &splits.train)?,
        val_accuracy: plain_accuracy(&weights, &splits.val)?,
        test_accuracy: plain_accuracy(&weights, &splits.test)?,
        threshold,
        majority_rate: majority_rate(&splits.train, config.n_classes),
    };
    if report.val_accuracy < threshold {
        return Err(Error::NonConvergence {
            accuracy: report.val_accuracy,
            threshold,
        });
    }
    weights.frozen = true;
    Ok((weights, report))
}
