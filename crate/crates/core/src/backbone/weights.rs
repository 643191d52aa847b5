use std::collections::BTreeMap;

use rand::Rng;

use super::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    /// `[feature_width, d_model]` token projection.
    pub embed: Tensor,
    /// `[seq_len, d_model]` learned positions for content tokens.
    pub pos: Tensor,
    pub layers: Vec<EncoderLayer>,
}

/// Linear classifier over the concatenated per-modality mean pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[n_modalities * d_model, n_classes]`
    pub weight: Tensor,
    /// `[1, n_classes]`
    pub bias: Tensor,
}

impl Head {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.weight".to_string(), &self.weight),
            ("head.bias".to_string(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundHead<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BoundHead {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    pub fn from_named(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            weight: take(tensors, "head.weight")?,
            bias: take(tensors, "head.bias")?,
        })
    }
}

/// Weights of the whole backbone.
///
/// `frozen` marks the encoder stacks as read-only for prompt tuning; the
/// head is copied out and trained separately, so it is unaffected by the
/// flag.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub encoders: Vec<ModalityEncoder>,
    pub head: Head,
    pub frozen: bool,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::gaussian(shape, std, rng)
}

fn take(tensors: &BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

impl BackboneWeights {
    /// Random initialization with `1/sqrt(fan_in)` scaled Gaussians.
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_hidden;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let encoders = config
            .feature_widths
            .iter()
            .map(|&w| ModalityEncoder {
                embed: gaussian(rng, &[w, d], inv(w)),
                pos: gaussian(rng, &[config.seq_len, d], 0.1),
                layers: (0..config.n_layers)
                    .map(|_| EncoderLayer {
                        wq: gaussian(rng, &[d, d], inv(d)),
                        wk: gaussian(rng, &[d, d], inv(d)),
                        wv: gaussian(rng, &[d, d], inv(d)),
                        wo: gaussian(rng, &[d, d], inv(d)),
                        w1: gaussian(rng, &[d, f], inv(d)),
                        w2: gaussian(rng, &[f, d], inv(f)),
                    })
                    .collect(),
            })
            .collect();
        let in_dim = config.n_modalities() * d;
        let head = Head {
            weight: gaussian(rng, &[in_dim, config.n_classes], inv(in_dim)),
            bias: Tensor::zeros(&[1, config.n_classes]),
        };
        Ok(Self {
            config: config.clone(),
            encoders,
            head,
            frozen: false,
        })
    }

    /// Encoder tensors in a fixed order, with their checkpoint names.
    pub fn encoder_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, enc) in self.encoders.iter().enumerate() {
            out.push((format!("enc{m}.embed"), &enc.embed));
            out.push((format!("enc{m}.pos"), &enc.pos));
            for (k, l) in enc.layers.iter().enumerate() {
                for (n, t) in [
                    ("wq", &l.wq),
                    ("wk", &l.wk),
                    ("wv", &l.wv),
                    ("wo", &l.wo),
                    ("w1", &l.w1),
                    ("w2", &l.w2),
                ] {
                    out.push((format!("enc{m}.layer{k}.{n}"), t));
                }
            }
        }
        out
    }

    /// All tensors (encoders then head) in the order used by [`Self::bind`]
    /// followed by [`Head::bind`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            out.push(&mut enc.embed);
            out.push(&mut enc.pos);
            for l in &mut enc.layers {
                out.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2]);
            }
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder_tensors();
        out.extend(self.head.named_tensors());
        out
    }

    pub fn from_named(config: BackboneConfig, tensors: &BTreeMap<String, Tensor>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let expect = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = take(tensors, &name)?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut encoders = Vec::new();
        for (m, &w) in config.feature_widths.iter().enumerate() {
            let mut layers = Vec::new();
            for k in 0..config.n_layers {
                let p = |n: &str| format!("enc{m}.layer{k}.{n}");
                layers.push(EncoderLayer {
                    wq: expect(p("wq"), &[d, d])?,
                    wk: expect(p("wk"), &[d, d])?,
                    wv: expect(p("wv"), &[d, d])?,
                    wo: expect(p("wo"), &[d, d])?,
                    w1: expect(p("w1"), &[d, config.ffn_hidden])?,
                    w2: expect(p("w2"), &[config.ffn_hidden, d])?,
                });
            }
            encoders.push(ModalityEncoder {
                embed: expect(format!("enc{m}.embed"), &[w, d])?,
                pos: expect(format!("enc{m}.pos"), &[config.seq_len, d])?,
                layers,
            });
        }
        let head = Head {
            weight: expect("head.weight".into(), &[config.n_modalities() * d, config.n_classes])?,
            bias: expect("head.bias".into(), &[1, config.n_classes])?,
        };
        Ok(Self {
            config,
            encoders,
            head,
            frozen,
        })
    }

    /// Squared L2 distance between the encoder weights of two backbones.
    pub fn encoder_distance_sq(&self, other: &BackboneWeights) -> f64 {
        self.encoder_tensors()
            .iter()
            .zip(other.encoder_tensors())
            .map(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Places the encoder weights on `graph`, as parameters when `trainable`
    /// and as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundBackbone<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let encoders = self
            .encoders
            .iter()
            .map(|enc| BoundEncoder {
                embed: leaf(&enc.embed),
                pos: leaf(&enc.pos),
                layers: enc
                    .layers
                    .iter()
                    .map(|l| BoundLayer {
                        wq: leaf(&l.wq),
                        wk: leaf(&l.wk),
                        wv: leaf(&l.wv),
                        wo: leaf(&l.wo),
                        w1: leaf(&l.w1),
                        w2: leaf(&l.w2),
                    })
                    .collect(),
            })
            .collect();
        BoundBackbone {
            config: self.config.clone(),
            encoders,
        }
    }
}

pub struct BoundLayer<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
    pub wo: Var<'g>,
    pub w1: Var<'g>,
    pub w2: Var<'g>,
}

pub struct BoundEncoder<'g> {
    pub embed: Var<'g>,
    pub pos: Var<'g>,
    pub layers: Vec<BoundLayer<'g>>,
}

/// Encoder weights living on a graph.
pub struct BoundBackbone<'g> {
    pub config: BackboneConfig,
    pub encoders: Vec<BoundEncoder<'g>>,
}

impl<'g> BoundBackbone<'g> {
    /// Encoder vars in the same order as [`BackboneWeights::encoder_tensors`].
    pub fn vars(&self) -> Vec<Var<'g>> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            out.push(enc.embed);
            out.push(enc.pos);
            for l in &enc.layers {
                out.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
            }
        }
        out
    }
}

pub struct BoundHead<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> BoundHead<'g> {
    pub fn vars(&self) -> Vec<Var<'g>> {
        vec![self.weight, self.bias]
    }
}
