//! The per-layer buffer operations: composition of the layer-0 sequence,
//! feature extraction, gated residual updates, replay injection and the
//! orthogonality penalty.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::math::Var;

/// A prompt block inside a composed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Shared,
    Private,
}

/// Row ranges of the blocks in a composed sequence, in the order shared,
/// private, content. Absent blocks have no range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPositions {
    pub shared: Option<Range<usize>>,
    pub private: Option<Range<usize>>,
    pub content: Range<usize>,
}

impl BlockPositions {
    /// Total sequence length.
    pub fn len(&self) -> usize {
        self.content.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, block: Block) -> Result<Range<usize>> {
        match block {
            Block::Shared => self.shared.clone(),
            Block::Private => self.private.clone(),
        }
        .ok_or(Error::MissingBlockPositions)
    }
}

/// Builds `[F_s·Θ_m, F_p^m, E_m0]` along the sequence axis. A `None` theta
/// means the identity projection; absent buffers are left out.
pub fn compose_layer0_input<'g>(
    shared: Option<Var<'g>>,
    theta: Option<Var<'g>>,
    private: Option<Var<'g>>,
    content: Var<'g>,
) -> Result<(Var<'g>, BlockPositions)> {
    let width = content.shape()[1];
    let mut parts = Vec::with_capacity(3);
    let mut cursor = 0;
    let mut place = |v: Var<'g>, parts: &mut Vec<Var<'g>>| -> Result<Range<usize>> {
        let s = v.shape();
        if s.len() != 2 || s[1] != width {
            return Err(Error::Shape {
                op: "compose_layer0_input",
                shapes: vec![s, content.shape()],
            });
        }
        parts.push(v);
        let r = cursor..cursor + s[0];
        cursor += s[0];
        Ok(r)
    };
    let shared = match shared {
        Some(f_s) => {
            let projected = match theta {
                Some(t) => f_s.matmul(t)?,
                None => f_s,
            };
            Some(place(projected, &mut parts)?)
        }
        None => None,
    };
    let private = match private {
        Some(f_p) => Some(place(f_p, &mut parts)?),
        None => None,
    };
    let content_range = place(content, &mut parts)?;
    let graph = content.graph();
    let seq = if parts.len() == 1 { parts[0] } else { graph.concat_rows(&parts)? };
    Ok((
        seq,
        BlockPositions {
            shared,
            private,
            content: content_range,
        },
    ))
}

/// `LayerNorm` of the hidden states at `block`'s rows.
pub fn extract_layer_features<'g>(hidden: Var<'g>, positions: &BlockPositions, block: Block) -> Result<Var<'g>> {
    let range = positions.block(block)?;
    if hidden.shape()[0] != positions.len() {
        return Err(Error::MissingBlockPositions);
    }
    hidden.slice_rows(range.start, range.len())?.layer_norm()
}

/// The private map `G_m` bound to a graph.
#[derive(Debug, Clone, Copy)]
pub enum PrivateMapVars<'g> {
    Identity,
    Mlp { w1: Var<'g>, w2: Var<'g> },
}

impl<'g> PrivateMapVars<'g> {
    pub fn apply(&self, z: Var<'g>) -> Result<Var<'g>> {
        match *self {
            PrivateMapVars::Identity => Ok(z),
            PrivateMapVars::Mlp { w1, w2 } => z.matmul(w1)?.gelu()?.matmul(w2),
        }
    }
}

/// The shared map `H` bound to a graph.
#[derive(Debug, Clone, Copy)]
pub enum SharedMapVars<'g> {
    Mean,
    Mlp { w: Var<'g> },
}

impl<'g> SharedMapVars<'g> {
    pub fn apply(&self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        match *self {
            SharedMapVars::Mean => {
                let mut acc = parts[0];
                for p in &parts[1..] {
                    acc = acc.add(*p)?;
                }
                acc.scale(1.0 / parts.len() as f64)
            }
            SharedMapVars::Mlp { w } => {
                let c = if parts.len() == 1 {
                    parts[0]
                } else {
                    w.graph().concat_cols(parts)?
                };
                c.matmul(w)?.gelu()
            }
        }
    }
}

fn convex<'g>(gate: Var<'g>, new: Var<'g>, old: Var<'g>) -> Result<Var<'g>> {
    let keep = gate.scale(-1.0)?.add_const(1.0)?;
    gate.scalar_mul(new)?.add(keep.scalar_mul(old)?)
}

/// `α·G(Z) + (1−α)·F_prev`, where `alpha` already holds the gate value.
pub fn update_private_buffer<'g>(
    z: Var<'g>,
    previous: Var<'g>,
    alpha: Var<'g>,
    map: &PrivateMapVars<'g>,
) -> Result<Var<'g>> {
    if z.shape() != previous.shape() {
        return Err(Error::Shape {
            op: "update_private_buffer",
            shapes: vec![z.shape(), previous.shape()],
        });
    }
    convex(alpha, map.apply(z)?, previous)
}

/// `ε·H(C(F_p)) + (1−ε)·F_s_prev`, with `C` concatenating the private
/// buffers along the feature axis.
pub fn update_shared_buffer<'g>(
    private: &[Var<'g>],
    previous: Var<'g>,
    eps: Var<'g>,
    map: &SharedMapVars<'g>,
    n_modalities: usize,
) -> Result<Var<'g>> {
    if private.len() != n_modalities || private.iter().any(|p| p.shape() != previous.shape()) {
        return Err(Error::Shape {
            op: "update_shared_buffer",
            shapes: private.iter().map(Var::shape).chain([previous.shape()]).collect(),
        });
    }
    let fused = map.apply(private)?;
    if fused.shape() != previous.shape() {
        return Err(Error::Shape {
            op: "update_shared_buffer",
            shapes: vec![fused.shape(), previous.shape()],
        });
    }
    convex(eps, fused, previous)
}

/// Replay weights and the buffers to add at one layer.
#[derive(Debug, Clone, Copy)]
pub struct Replay<'g> {
    pub beta_private: Var<'g>,
    pub beta_shared: Var<'g>,
    pub private: Option<Var<'g>>,
    pub shared: Option<Var<'g>>,
}

/// Adds `β_p·F_p` onto the private rows and `β_s·F_s` onto the shared rows
/// of the input to `layer` (1-based). Content rows are copied untouched.
/// Layers deeper than `depth` get their input back unchanged.
pub fn replay_inject<'g>(
    input: Var<'g>,
    positions: &BlockPositions,
    replay: &Replay<'g>,
    layer: usize,
    depth: usize,
) -> Result<Var<'g>> {
    if layer == 0 {
        return Err(Error::LayerOutOfRange { layer, n_layers: depth });
    }
    if layer > depth {
        return Ok(input);
    }
    if input.shape()[0] != positions.len() {
        return Err(Error::MissingBlockPositions);
    }
    let mut blocks: Vec<(Range<usize>, Option<Var<'g>>)> = Vec::with_capacity(3);
    if let Some(f_s) = replay.shared {
        blocks.push((positions.block(Block::Shared)?, Some(replay.beta_shared.scalar_mul(f_s)?)));
    }
    if let Some(f_p) = replay.private {
        blocks.push((positions.block(Block::Private)?, Some(replay.beta_private.scalar_mul(f_p)?)));
    }
    if blocks.is_empty() {
        return Ok(input);
    }
    blocks.sort_by_key(|(r, _)| r.start);
    let mut parts = Vec::with_capacity(4);
    let mut cursor = 0;
    for (range, add) in blocks {
        if range.start > cursor {
            parts.push(input.slice_rows(cursor, range.start - cursor)?);
        }
        let rows = input.slice_rows(range.start, range.len())?;
        parts.push(match add {
            Some(a) => rows.add(a)?,
            None => rows,
        });
        cursor = range.end;
    }
    let total = positions.len();
    if cursor < total {
        parts.push(input.slice_rows(cursor, total - cursor)?);
    }
    input.graph().concat_rows(&parts)
}

/// The orthogonality penalty and the number of pairs skipped because one
/// side had zero norm.
#[derive(Debug, Clone, Copy)]
pub struct OrthoLoss<'g> {
    pub value: Var<'g>,
    pub degenerate_pairs: usize,
}

/// Sum of squared cosine similarities over (shared, private_m) for every
/// `m` and (private_m, private_m') for every unordered pair.
pub fn orthogonality_loss<'g>(shared: Option<Var<'g>>, private: &[Var<'g>]) -> Result<OrthoLoss<'g>> {
    let mut pairs = Vec::new();
    if let Some(s) = shared {
        for &p in private {
            pairs.push((s, p));
        }
    }
    for i in 0..private.len() {
        for j in i + 1..private.len() {
            pairs.push((private[i], private[j]));
        }
    }
    let graph = match (shared, private.first()) {
        (Some(s), _) => s.graph(),
        (None, Some(p)) => p.graph(),
        (None, None) => return Err(Error::Shape { op: "orthogonality_loss", shapes: vec![] }),
    };
    let mut total: Option<Var<'g>> = None;
    let mut degenerate = 0;
    for (a, b) in pairs {
        let aa = a.frobenius(a)?;
        let bb = b.frobenius(b)?;
        if aa.item() == 0.0 || bb.item() == 0.0 {
            degenerate += 1;
            continue;
        }
        let ab = a.frobenius(b)?;
        let term = ab.mul(ab)?.div(aa.mul(bb)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(OrthoLoss {
        value: total.unwrap_or_else(|| graph.scalar(0.0)),
        degenerate_pairs: degenerate,
    })
}
