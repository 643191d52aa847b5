use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::buffers::{PrivateMapVars, SharedMapVars};
use super::config::{PrivateMap, RepConfig, SharedMap, BETA_INIT, STATIC_INIT_STD};
use super::init::{embedding_summary, init_private_buffer, init_shared_buffer};
use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor, Var};
use crate::rng::SeedTree;

/// Weights of one private map `G_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateMlp {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Every trainable tensor of the mechanism. Which fields are populated
/// depends on the [`RepConfig`] the state was built for; the buffers held
/// here are the layer-0 values `F_p^m[0]` and `F_s[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepState {
    pub config: RepConfig,
    pub private: Vec<Tensor>,
    pub shared: Option<Tensor>,
    pub theta: Vec<Tensor>,
    pub private_maps: Vec<PrivateMlp>,
    pub shared_map: Option<Tensor>,
    /// Logits `a_m` of the private gates `α_m`.
    pub gate_private: Vec<Tensor>,
    /// Logit `e_s` of the shared gate `ε_s`.
    pub gate_shared: Option<Tensor>,
    pub beta_private: Option<Tensor>,
    pub beta_shared: Option<Tensor>,
}

struct Layout {
    private: bool,
    shared: bool,
    theta: bool,
    g: bool,
    h: bool,
    gates_private: bool,
    gate_shared: bool,
    beta_private: bool,
    beta_shared: bool,
}

fn layout(config: &RepConfig) -> Layout {
    let c = config.components;
    let updates = config.updates_enabled();
    Layout {
        private: c.private_buffer,
        shared: c.dual_buffers,
        theta: c.dual_buffers && config.theta_learnable,
        g: updates && c.private_buffer && config.private_map == PrivateMap::Mlp,
        h: updates && config.shared_map == SharedMap::Mlp,
        gates_private: updates && c.private_buffer,
        gate_shared: updates,
        beta_private: c.replay && c.private_buffer,
        beta_shared: c.replay,
    }
}

impl RepState {
    /// Fresh state. With dynamic init the private buffers start from the
    /// perturbed mean embedding of `calibration` and the shared buffer from
    /// a unit-norm Gaussian; otherwise both are small Gaussians.
    pub fn init(
        config: &RepConfig,
        backbone: &BackboneWeights,
        calibration: &[Sample],
        seeds: &SeedTree,
    ) -> Result<Self> {
        let bb = &backbone.config;
        config.check_backbone(bb)?;
        let lay = layout(config);
        let (l, d, k) = (config.buffer_width, bb.d_model, bb.n_modalities());
        let dynamic = config.components.dynamic_init;
        let calibration = &calibration[..calibration.len().min(config.calibration_samples)];

        let private = if lay.private {
            (0..k)
                .map(|m| {
                    if dynamic {
                        let summary = embedding_summary(backbone, calibration, m, l)?;
                        init_private_buffer(&summary, config.noise_intensity, config.noise_type, seeds, m)
                    } else {
                        let mut rng = seeds.stream(&format!("init/rep/private/{m}"));
                        Ok(Tensor::gaussian(&[l, d], STATIC_INIT_STD, &mut rng))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let shared = if lay.shared {
            let mut rng = seeds.stream("init/rep/shared");
            Some(if dynamic {
                init_shared_buffer(l, d, &mut rng)?
            } else {
                Tensor::gaussian(&[l, d], STATIC_INIT_STD, &mut rng)
            })
        } else {
            None
        };
        let theta = if lay.theta {
            vec![Tensor::identity(d); k]
        } else {
            Vec::new()
        };
        let hidden = RepConfig::private_hidden(d);
        let private_maps = if lay.g {
            (0..k)
                .map(|m| {
                    let mut rng = seeds.stream(&format!("init/rep/g/{m}"));
                    PrivateMlp {
                        w1: Tensor::gaussian(&[d, hidden], 1.0 / (d as f64).sqrt(), &mut rng),
                        w2: Tensor::gaussian(&[hidden, d], 1.0 / (hidden as f64).sqrt(), &mut rng),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let shared_map = lay.h.then(|| {
            let mut rng = seeds.stream("init/rep/h");
            Tensor::gaussian(&[k * d, d], 1.0 / ((k * d) as f64).sqrt(), &mut rng)
        });
        Ok(Self {
            config: config.clone(),
            private,
            shared,
            theta,
            private_maps,
            shared_map,
            gate_private: if lay.gates_private {
                vec![Tensor::scalar(0.0); k]
            } else {
                Vec::new()
            },
            gate_shared: lay.gate_shared.then(|| Tensor::scalar(0.0)),
            beta_private: lay.beta_private.then(|| Tensor::scalar(BETA_INIT)),
            beta_shared: lay.beta_shared.then(|| Tensor::scalar(BETA_INIT)),
        })
    }

    /// Parameter count implied by the config, without building a state.
    pub fn param_count_for(config: &RepConfig, backbone: &BackboneConfig) -> usize {
        let lay = layout(config);
        let (l, d, k) = (config.buffer_width, backbone.d_model, backbone.n_modalities());
        let h = RepConfig::private_hidden(d);
        let on = |flag: bool, n: usize| if flag { n } else { 0 };
        on(lay.private, k * l * d)
            + on(lay.shared, l * d)
            + on(lay.theta, k * d * d)
            + on(lay.g, k * 2 * d * h)
            + on(lay.h, k * d * d)
            + on(lay.gates_private, k)
            + on(lay.gate_shared, 1)
            + on(lay.beta_private, 1)
            + on(lay.beta_shared, 1)
    }

    /// Tensors with their checkpoint names, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, t) in self.private.iter().enumerate() {
            out.push((format!("private.{m}"), t));
        }
        if let Some(t) = &self.shared {
            out.push(("shared".to_string(), t));
        }
        for (m, t) in self.theta.iter().enumerate() {
            out.push((format!("theta.{m}"), t));
        }
        for (m, g) in self.private_maps.iter().enumerate() {
            out.push((format!("g.{m}.w1"), &g.w1));
            out.push((format!("g.{m}.w2"), &g.w2));
        }
        if let Some(t) = &self.shared_map {
            out.push(("h".to_string(), t));
        }
        for (m, t) in self.gate_private.iter().enumerate() {
            out.push((format!("gate.private.{m}"), t));
        }
        if let Some(t) = &self.gate_shared {
            out.push(("gate.shared".to_string(), t));
        }
        if let Some(t) = &self.beta_private {
            out.push(("beta.private".to_string(), t));
        }
        if let Some(t) = &self.beta_shared {
            out.push(("beta.shared".to_string(), t));
        }
        out
    }

    /// Mutable tensors in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.private.iter_mut().collect();
        out.extend(self.shared.as_mut());
        out.extend(self.theta.iter_mut());
        for g in &mut self.private_maps {
            out.push(&mut g.w1);
            out.push(&mut g.w2);
        }
        out.extend(self.shared_map.as_mut());
        out.extend(self.gate_private.iter_mut());
        out.extend(self.gate_shared.as_mut());
        out.extend(self.beta_private.as_mut());
        out.extend(self.beta_shared.as_mut());
        out
    }

    /// Number of scalars over all tensors.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a state from checkpoint tensors, checking names and shapes
    /// against a freshly laid-out state of the same config.
    pub fn from_named(config: &RepConfig, backbone: &BackboneConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.check_backbone(backbone)?;
        let mut state = Self::skeleton(config, backbone);
        let names: Vec<(String, Vec<usize>)> = state
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != tensors.len() {
            let expected: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
            return Err(Error::Checkpoint(format!(
                "rep namespace holds {} tensors, config expects {} ({expected:?})",
                tensors.len(),
                names.len()
            )));
        }
        for ((name, shape), slot) in names.into_iter().zip(state.tensors_mut()) {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(state)
    }

    /// Zero-filled state with the right layout.
    fn skeleton(config: &RepConfig, backbone: &BackboneConfig) -> Self {
        let lay = layout(config);
        let (l, d, k) = (config.buffer_width, backbone.d_model, backbone.n_modalities());
        let h = RepConfig::private_hidden(d);
        let zeros = |shape: &[usize]| Tensor::zeros(shape);
        let per = |flag: bool, shape: &[usize]| if flag { vec![zeros(shape); k] } else { Vec::new() };
        Self {
            config: config.clone(),
            private: per(lay.private, &[l, d]),
            shared: lay.shared.then(|| zeros(&[l, d])),
            theta: per(lay.theta, &[d, d]),
            private_maps: if lay.g {
                vec![
                    PrivateMlp {
                        w1: zeros(&[d, h]),
                        w2: zeros(&[h, d]),
                    };
                    k
                ]
            } else {
                Vec::new()
            },
            shared_map: lay.h.then(|| zeros(&[k * d, d])),
            gate_private: per(lay.gates_private, &[1]),
            gate_shared: lay.gate_shared.then(|| zeros(&[1])),
            beta_private: lay.beta_private.then(|| zeros(&[1])),
            beta_shared: lay.beta_shared.then(|| zeros(&[1])),
        }
    }

    /// Current gate values `(α_m, ε_s)` after the sigmoid.
    pub fn gates(&self) -> (Vec<f64>, Option<f64>) {
        let sig = |t: &Tensor| 1.0 / (1.0 + (-t.item()).exp());
        (self.gate_private.iter().map(sig).collect(), self.gate_shared.as_ref().map(sig))
    }

    /// Current replay weights `(β_p, β_s)`; zero when replay is off.
    pub fn betas(&self) -> (f64, f64) {
        (
            self.beta_private.as_ref().map_or(0.0, Tensor::item),
            self.beta_shared.as_ref().map_or(0.0, Tensor::item),
        )
    }

    /// Places the state on `graph`, as parameters when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Result<BoundRep<'g>> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let private: Vec<Var<'g>> = self.private.iter().map(leaf).collect();
        let shared = self.shared.as_ref().map(leaf);
        let theta: Vec<Var<'g>> = self.theta.iter().map(leaf).collect();
        let private_maps: Vec<(Var<'g>, Var<'g>)> =
            self.private_maps.iter().map(|g| (leaf(&g.w1), leaf(&g.w2))).collect();
        let shared_map = self.shared_map.as_ref().map(leaf);
        let gate_private: Vec<Var<'g>> = self.gate_private.iter().map(leaf).collect();
        let gate_shared = self.gate_shared.as_ref().map(leaf);
        let beta_private = self.beta_private.as_ref().map(leaf);
        let beta_shared = self.beta_shared.as_ref().map(leaf);

        let mut params = private.clone();
        params.extend(shared);
        params.extend(theta.iter().copied());
        for &(w1, w2) in &private_maps {
            params.extend([w1, w2]);
        }
        params.extend(shared_map);
        params.extend(gate_private.iter().copied());
        params.extend(gate_shared);
        params.extend(beta_private);
        params.extend(beta_shared);

        let g_maps = if self.config.private_map == PrivateMap::Identity {
            vec![PrivateMapVars::Identity; private.len()]
        } else {
            private_maps
                .iter()
                .map(|&(w1, w2)| PrivateMapVars::Mlp { w1, w2 })
                .collect()
        };
        let h_map = match (self.config.shared_map, shared_map) {
            (SharedMap::Mlp, Some(w)) => Some(SharedMapVars::Mlp { w }),
            (SharedMap::Mean, _) => Some(SharedMapVars::Mean),
            (SharedMap::Mlp, None) => None,
        };
        let zero = || graph.scalar(0.0);
        Ok(BoundRep {
            config: self.config.clone(),
            private,
            shared,
            theta,
            g_maps,
            h_map,
            alpha: gate_private.iter().map(|a| a.sigmoid()).collect::<Result<_>>()?,
            eps: gate_shared.map(|e| e.sigmoid()).transpose()?,
            beta_private: beta_private.unwrap_or_else(zero),
            beta_shared: beta_shared.unwrap_or_else(zero),
            params,
        })
    }
}

/// A [`RepState`] living on a graph, with the gate values precomputed.
pub struct BoundRep<'g> {
    pub config: RepConfig,
    pub private: Vec<Var<'g>>,
    pub shared: Option<Var<'g>>,
    pub theta: Vec<Var<'g>>,
    pub g_maps: Vec<PrivateMapVars<'g>>,
    pub h_map: Option<SharedMapVars<'g>>,
    pub alpha: Vec<Var<'g>>,
    pub eps: Option<Var<'g>>,
    pub beta_private: Var<'g>,
    pub beta_shared: Var<'g>,
    params: Vec<Var<'g>>,
}

impl<'g> BoundRep<'g> {
    /// Leaf vars in the order of [`RepState::named_tensors`].
    pub fn vars(&self) -> &[Var<'g>] {
        &self.params
    }
}
