#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rep_core::backbone::{embed_modality, encoder_layer_forward, BackboneConfig, BackboneWeights};
use rep_core::data::Sample;
use rep_core::math::{Graph, Tensor, Var};
use rep_core::rep::{
    compose_layer0_input, extract_layer_features, replay_inject, update_private_buffer, update_shared_buffer,
    Block, BoundRep, Components, RepConfig, RepState, Replay,
};
use rep_core::rng::SeedTree;

pub fn backbone_config(n_layers: usize, d_model: usize) -> BackboneConfig {
    BackboneConfig {
        feature_widths: vec![3, 5],
        d_model,
        n_layers,
        n_heads: 2,
        seq_len: 3,
        n_classes: 3,
        ffn_hidden: 2 * d_model,
    }
}

/// Randomly initialized weights, marked frozen.
pub fn backbone(n_layers: usize, d_model: usize, seed: u64) -> BackboneWeights {
    let cfg = backbone_config(n_layers, d_model);
    let mut w = BackboneWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    w.frozen = true;
    w
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn samples(cfg: &BackboneConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Sample {
            features: cfg
                .feature_widths
                .iter()
                .map(|&w| random_tensor(&[cfg.seq_len, w], &mut rng))
                .collect(),
            label: rng.random_range(0..cfg.n_classes),
        })
        .collect()
}

pub fn rep_config(width: usize, depth: usize, components: Components) -> RepConfig {
    RepConfig {
        buffer_width: width,
        replay_depth: depth,
        components,
        calibration_samples: 8,
        ..RepConfig::default()
    }
}

pub fn rep_state(config: &RepConfig, bb: &BackboneWeights, seed: u64) -> RepState {
    let calibration = samples(&bb.config, 8, seed + 1000);
    RepState::init(config, bb, &calibration, &SeedTree::new(seed)).unwrap()
}

/// Buffer trajectories and extracted features of one forward pass, rebuilt
/// from the individual operations.
pub struct Manual {
    pub private: Vec<Vec<Tensor>>,
    pub shared: Vec<Tensor>,
    /// `z[m][k - 1]` is the normalized private block after layer `k`.
    pub z: Vec<Vec<Tensor>>,
    pub content: Vec<Tensor>,
}

pub fn manual_forward<'g>(bb_w: &BackboneWeights, rep: &BoundRep<'g>, graph: &'g Graph, sample: &Sample) -> Manual {
    let bb = bb_w.bind(graph, false);
    let k = bb_w.config.n_modalities();
    let depth = rep.config.replay_depth;
    let mut states = Vec::new();
    let mut positions = Vec::new();
    for m in 0..k {
        let e0 = embed_modality(&bb, &sample.features[m], m).unwrap();
        let (h, p) = compose_layer0_input(rep.shared, rep.theta.get(m).copied(), rep.private.get(m).copied(), e0).unwrap();
        states.push(h);
        positions.push(p);
    }
    let mut private: Vec<Vec<Var>> = rep.private.iter().map(|&p| vec![p]).collect();
    let mut shared: Vec<Var> = rep.shared.into_iter().collect();
    let mut z: Vec<Vec<Tensor>> = vec![Vec::new(); k];
    for layer in 1..=bb_w.config.n_layers {
        for m in 0..k {
            if layer <= depth {
                let r = Replay {
                    beta_private: rep.beta_private,
                    beta_shared: rep.beta_shared,
                    private: Some(private[m][layer - 1]),
                    shared: Some(shared[layer - 1]),
                };
                states[m] = replay_inject(states[m], &positions[m], &r, layer, depth).unwrap();
            }
            states[m] = encoder_layer_forward(&bb, states[m], layer - 1, m).unwrap();
        }
        if layer <= depth {
            for m in 0..k {
                let zm = extract_layer_features(states[m], &positions[m], Block::Private).unwrap();
                z[m].push(zm.value());
                let next = update_private_buffer(zm, private[m][layer - 1], rep.alpha[m], &rep.g_maps[m]).unwrap();
                private[m].push(next);
            }
            let sources: Vec<Var> = private.iter().map(|t| t[layer]).collect();
            let next = update_shared_buffer(
                &sources,
                shared[layer - 1],
                rep.eps.unwrap(),
                rep.h_map.as_ref().unwrap(),
                k,
            )
            .unwrap();
            shared.push(next);
        }
    }
    Manual {
        private: private.iter().map(|t| t.iter().map(Var::value).collect()).collect(),
        shared: shared.iter().map(Var::value).collect(),
        z,
        content: states
            .iter()
            .zip(&positions)
            .map(|(h, p)| h.slice_rows(p.content.start, p.content.len()).unwrap().value())
            .collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
