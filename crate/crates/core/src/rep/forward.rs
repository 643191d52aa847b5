use super::buffers::{
    compose_layer0_input, extract_layer_features, orthogonality_loss, replay_inject, update_private_buffer,
    update_shared_buffer, Block, BlockPositions, OrthoLoss, Replay,
};
use super::state::BoundRep;
use crate::backbone::{embed_modality, encoder_layer_forward, fuse_and_classify, BoundBackbone, BoundHead};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::Var;

/// Result of one forward pass with buffers attached.
pub struct RepOutput<'g> {
    pub logits: Var<'g>,
    /// `private[m][k]` is `F_p^m[k]` for `k = 0..=d` (only `k = 0` when the
    /// buffers are static).
    pub private: Vec<Vec<Var<'g>>>,
    /// `shared[k]` is `F_s[k]`.
    pub shared: Vec<Var<'g>>,
    /// Present when the dual buffers are on.
    pub ortho: Option<OrthoLoss<'g>>,
}

fn compose_all<'g>(
    bb: &BoundBackbone<'g>,
    rep: &BoundRep<'g>,
    sample: &Sample,
) -> Result<(Vec<Var<'g>>, Vec<BlockPositions>)> {
    let k = bb.config.n_modalities();
    if sample.features.len() != k {
        return Err(Error::Shape {
            op: "rep_forward",
            shapes: sample.features.iter().map(|f| f.shape().to_vec()).collect(),
        });
    }
    let mut states = Vec::with_capacity(k);
    let mut positions = Vec::with_capacity(k);
    for m in 0..k {
        let e0 = embed_modality(bb, &sample.features[m], m)?;
        let (h, pos) = compose_layer0_input(
            rep.shared,
            rep.theta.get(m).copied(),
            rep.private.get(m).copied(),
            e0,
        )?;
        states.push(h);
        positions.push(pos);
    }
    Ok((states, positions))
}

fn classify<'g>(head: &BoundHead<'g>, states: &[Var<'g>], positions: &[BlockPositions]) -> Result<Var<'g>> {
    let content = states
        .iter()
        .zip(positions)
        .map(|(h, p)| h.slice_rows(p.content.start, p.content.len()))
        .collect::<Result<Vec<_>>>()?;
    fuse_and_classify(head, &content)
}

/// Full forward pass: compose the layer-0 sequences, then for each layer
/// `k` in `1..=d` inject the buffers from layer `k-1` onto the prompt rows,
/// run the layer, and refresh the buffers from its output. Layers past `d`
/// run untouched. The logits come from the content rows only.
///
/// Missing modalities must already be replaced by placeholders in `sample`.
pub fn rep_forward<'g>(
    bb: &BoundBackbone<'g>,
    head: &BoundHead<'g>,
    rep: &BoundRep<'g>,
    sample: &Sample,
) -> Result<RepOutput<'g>> {
    let cfg = &rep.config;
    let n_layers = bb.config.n_layers;
    let k_mod = bb.config.n_modalities();
    let depth = cfg.replay_depth;
    if depth > n_layers {
        return Err(Error::LayerOutOfRange {
            layer: depth,
            n_layers,
        });
    }
    let (mut states, positions) = compose_all(bb, rep, sample)?;
    let mut private: Vec<Vec<Var<'g>>> = rep.private.iter().map(|&p| vec![p]).collect();
    let mut shared: Vec<Var<'g>> = rep.shared.into_iter().collect();
    let replay = cfg.components.replay;
    let updates = cfg.updates_enabled();

    for layer in 1..=n_layers {
        for m in 0..k_mod {
            if replay && layer <= depth {
                let r = Replay {
                    beta_private: rep.beta_private,
                    beta_shared: rep.beta_shared,
                    private: private.get(m).map(|t| t[layer - 1]),
                    shared: shared.get(layer - 1).copied(),
                };
                states[m] = replay_inject(states[m], &positions[m], &r, layer, depth)?;
            }
            states[m] = encoder_layer_forward(bb, states[m], layer - 1, m)?;
        }
        if updates && layer <= depth {
            let sources = if cfg.has_private() {
                for m in 0..k_mod {
                    let z = extract_layer_features(states[m], &positions[m], Block::Private)?;
                    let next = update_private_buffer(z, private[m][layer - 1], rep.alpha[m], &rep.g_maps[m])?;
                    private[m].push(next);
                }
                private.iter().map(|t| t[layer]).collect::<Vec<_>>()
            } else {
                (0..k_mod)
                    .map(|m| extract_layer_features(states[m], &positions[m], Block::Shared))
                    .collect::<Result<Vec<_>>>()?
            };
            let (eps, h_map) = match (rep.eps, rep.h_map.as_ref()) {
                (Some(e), Some(h)) => (e, h),
                _ => return Err(Error::Compatibility("shared update needs a gate and a map".into())),
            };
            let next = update_shared_buffer(&sources, shared[layer - 1], eps, h_map, k_mod)?;
            shared.push(next);
        }
    }

    let ortho = if cfg.components.dual_buffers {
        let at = |k: usize| -> Result<OrthoLoss<'g>> {
            let ps: Vec<Var<'g>> = private.iter().map(|t| t[k]).collect();
            orthogonality_loss(shared.get(k).copied(), &ps)
        };
        let last = shared.len() - 1;
        if cfg.ortho_all_layers && last > 0 {
            let mut total = at(1)?;
            for k in 2..=last {
                let term = at(k)?;
                total = OrthoLoss {
                    value: total.value.add(term.value)?,
                    degenerate_pairs: total.degenerate_pairs + term.degenerate_pairs,
                };
            }
            Some(total)
        } else {
            Some(at(last)?)
        }
    } else {
        None
    };

    Ok(RepOutput {
        logits: classify(head, &states, &positions)?,
        private,
        shared,
        ortho,
    })
}

/// Prompt-tuning reference: the layer-0 buffers are prepended as static
/// prompts and every layer runs without updates or replay.
pub fn static_prompt_forward<'g>(
    bb: &BoundBackbone<'g>,
    head: &BoundHead<'g>,
    rep: &BoundRep<'g>,
    sample: &Sample,
) -> Result<Var<'g>> {
    let (mut states, positions) = compose_all(bb, rep, sample)?;
    for layer in 0..bb.config.n_layers {
        for (m, h) in states.iter_mut().enumerate() {
            *h = encoder_layer_forward(bb, *h, layer, m)?;
        }
    }
    classify(head, &states, &positions)
}
