use super::weights::{BoundBackbone, BoundHead, BoundLayer};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{Tensor, Var};

/// Layer-0 content embedding `raw · W_embed + pos` for one modality.
pub fn embed_modality<'g>(bb: &BoundBackbone<'g>, raw: &Tensor, modality: usize) -> Result<Var<'g>> {
    bb.config.check_modality(modality)?;
    let enc = &bb.encoders[modality];
    let width = bb.config.feature_widths[modality];
    if raw.shape() != [bb.config.seq_len, width] {
        return Err(Error::Shape {
            op: "embed_modality",
            shapes: vec![raw.shape().to_vec(), vec![bb.config.seq_len, width]],
        });
    }
    let graph = enc.embed.graph();
    graph.constant(raw.clone()).matmul(enc.embed)?.add(enc.pos)
}

/// Embeds several samples of one modality in a single product, returning the
/// `[batch * seq_len, d_model]` stack.
pub fn embed_batch<'g>(bb: &BoundBackbone<'g>, raws: &[&Tensor], modality: usize) -> Result<Var<'g>> {
    bb.config.check_modality(modality)?;
    let enc = &bb.encoders[modality];
    let graph = enc.embed.graph();
    let width = bb.config.feature_widths[modality];
    let mut data = Vec::with_capacity(raws.len() * bb.config.seq_len * width);
    for r in raws {
        if r.shape() != [bb.config.seq_len, width] {
            return Err(Error::Shape {
                op: "embed_batch",
                shapes: vec![r.shape().to_vec(), vec![bb.config.seq_len, width]],
            });
        }
        data.extend_from_slice(r.data());
    }
    let stacked = Tensor::new(vec![raws.len() * bb.config.seq_len, width], data)?;
    let pos = graph.concat_rows(&vec![enc.pos; raws.len()])?;
    graph.constant(stacked).matmul(enc.embed)?.add(pos)
}

fn attention<'g>(layer: &BoundLayer<'g>, x: Var<'g>, n_heads: usize) -> Result<Var<'g>> {
    let graph = x.graph();
    let d = x.shape()[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = x.layer_norm()?;
    let q = h.matmul(layer.wq)?;
    let k = h.matmul(layer.wk)?;
    let v = h.matmul(layer.wv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let (qi, ki, vi) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice_cols(i * dh, dh)?,
                k.slice_cols(i * dh, dh)?,
                v.slice_cols(i * dh, dh)?,
            )
        };
        let weights = qi.matmul(ki.transpose()?)?.scale(scale)?.softmax()?;
        heads.push(weights.matmul(vi)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { graph.concat_cols(&heads)? };
    merged.matmul(layer.wo)
}

/// One pre-norm transformer layer: self-attention then a GELU feed-forward
/// block, each wrapped in a residual connection. Sequence length is
/// preserved.
pub fn encoder_layer_forward<'g>(
    bb: &BoundBackbone<'g>,
    state: Var<'g>,
    layer: usize,
    modality: usize,
) -> Result<Var<'g>> {
    bb.config.check_modality(modality)?;
    bb.config.check_layer(layer)?;
    let shape = state.shape();
    if shape.len() != 2 || shape[1] != bb.config.d_model {
        return Err(Error::Shape {
            op: "encoder_layer_forward",
            shapes: vec![shape, vec![bb.config.d_model]],
        });
    }
    let l = &bb.encoders[modality].layers[layer];
    let x = state.add(attention(l, state, bb.config.n_heads)?)?;
    let ff = x.layer_norm()?.matmul(l.w1)?.gelu()?.matmul(l.w2)?;
    x.add(ff)
}

/// Mean-pools each modality's states over tokens, concatenates the pools
/// and applies the linear head.
pub fn fuse_and_classify<'g>(head: &BoundHead<'g>, final_states: &[Var<'g>]) -> Result<Var<'g>> {
    let in_dim = head.weight.shape()[0];
    let widths: usize = final_states.iter().map(|s| s.shape()[1]).sum();
    if final_states.is_empty() || widths != in_dim {
        return Err(Error::Shape {
            op: "fuse_and_classify",
            shapes: final_states.iter().map(Var::shape).chain([head.weight.shape()]).collect(),
        });
    }
    let graph = head.weight.graph();
    let pools = final_states
        .iter()
        .map(|s| s.mean_rows())
        .collect::<Result<Vec<_>>>()?;
    let fused = if pools.len() == 1 { pools[0] } else { graph.concat_cols(&pools)? };
    fused.matmul(head.weight)?.add(head.bias)
}

/// Runs every encoder stack over a sample's content tokens only.
pub fn encode_plain<'g>(bb: &BoundBackbone<'g>, sample: &Sample) -> Result<Vec<Var<'g>>> {
    if sample.features.len() != bb.config.n_modalities() {
        return Err(Error::Shape {
            op: "encode_plain",
            shapes: sample.features.iter().map(|f| f.shape().to_vec()).collect(),
        });
    }
    (0..bb.config.n_modalities())
        .map(|m| {
            let mut h = embed_modality(bb, &sample.features[m], m)?;
            for k in 0..bb.config.n_layers {
                h = encoder_layer_forward(bb, h, k, m)?;
            }
            Ok(h)
        })
        .collect()
}

/// Logits of the backbone without any prompt tokens.
pub fn plain_logits<'g>(bb: &BoundBackbone<'g>, head: &BoundHead<'g>, sample: &Sample) -> Result<Var<'g>> {
    let finals = encode_plain(bb, sample)?;
    fuse_and_classify(head, &finals)
}
