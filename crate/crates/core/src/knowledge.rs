//! Description embeddings for domain keywords and their gated fusion
//! with the vanilla word embeddings.
//!
//! A response word that is a domain keyword gets a description embedding:
//! its dictionary description, run through a dedicated bidirectional GRU
//! whose concatenated final state has the word-embedding dimension. The
//! gate mixes that embedding with the vanilla one, componentwise, driven
//! by the context embedding and the word itself. Non-keywords keep their
//! vanilla embedding untouched (a literal reading that attenuates them by
//! `1 - beta` instead is available behind a flag).

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::corpus::KnowledgeBase;
use crate::encoders::{encode_bi, EncodeError, GruNodes};
use crate::matrix::Matrix;

pub type Result<T> = std::result::Result<T, EncodeError>;

/// Graph handles for the gate matrices: `u` maps the context embedding
/// and `v` the word embedding to gate logits. Transposes are built once
/// and shared across tokens.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub u: NodeId,
    pub v: NodeId,
    u_t: NodeId,
    v_t: NodeId,
}

impl GateNodes {
    pub fn new(g: &mut Graph, u: NodeId, v: NodeId) -> Self {
        GateNodes {
            u,
            v,
            u_t: g.transpose(u),
            v_t: g.transpose(v),
        }
    }
}

/// Encoded keyword description; exactly zero for non-keywords.
#[derive(Debug, Clone, Copy)]
pub struct DescriptionEmbedding {
    pub vector: NodeId,
    pub is_keyword: bool,
}

/// Per-graph memo for [`describe`]. A parameter update always means a
/// fresh graph and a fresh cache, so stale vectors cannot be served.
#[derive(Debug, Default)]
pub struct DescribeCache {
    hits: HashMap<u32, DescriptionEmbedding>,
    zero: Option<NodeId>,
}

impl DescribeCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Description embedding of `word_id`: the description token embeddings
/// run through the description biGRU for keywords, a zero vector for
/// everything else. Memoized per (word, graph).
#[allow(clippy::too_many_arguments)]
pub fn describe(
    g: &mut Graph,
    cache: &mut DescribeCache,
    word_id: u32,
    kb: &KnowledgeBase,
    desc_fwd: &GruNodes,
    desc_bwd: &GruNodes,
    embedding_table: NodeId,
    embed_dim: usize,
) -> Result<DescriptionEmbedding> {
    if let Some(hit) = cache.hits.get(&word_id) {
        return Ok(*hit);
    }
    let entry = match kb.description(word_id) {
        Some(tokens) => {
            let inputs: std::result::Result<Vec<NodeId>, _> = tokens
                .iter()
                .map(|&t| g.embed_row(embedding_table, t as usize))
                .collect();
            let inputs = inputs?;
            let mask = vec![true; inputs.len()];
            let enc = encode_bi(g, desc_fwd, desc_bwd, &inputs, &mask)?;
            DescriptionEmbedding {
                vector: enc.final_state,
                is_keyword: true,
            }
        }
        None => {
            let zero = match cache.zero {
                Some(z) => z,
                None => {
                    let z = g.leaf(Matrix::zeros(embed_dim, 1), false);
                    cache.zero = Some(z);
                    z
                }
            };
            DescriptionEmbedding {
                vector: zero,
                is_keyword: false,
            }
        }
    };
    cache.hits.insert(word_id, entry);
    Ok(entry)
}

/// Componentwise gate `beta = sigma(U' c + V' w_t)`, each entry in (0, 1).
pub fn gate_coefficients(
    g: &mut Graph,
    gate: &GateNodes,
    context_embedding: NodeId,
    w_t: NodeId,
) -> Result<NodeId> {
    let uc = g.matmul(gate.u_t, context_embedding)?;
    let vw = g.matmul(gate.v_t, w_t)?;
    let logits = g.add(uc, vw)?;
    g.sigmoid(logits).map_err(Into::into)
}

fn convex_mix(g: &mut Graph, beta: NodeId, h_d: NodeId, w_t: NodeId) -> Result<NodeId> {
    let gated_desc = g.hadamard(beta, h_d)?;
    let dim = g.value(beta).rows();
    let ones = g.leaf(Matrix::from_vec(dim, 1, vec![1.0; dim]), false);
    let complement = g.sub(ones, beta)?;
    let gated_word = g.hadamard(complement, w_t)?;
    g.add(gated_desc, gated_word).map_err(Into::into)
}

/// `w_hat = beta . h_d + (1 - beta) . w_t` for keywords; non-keywords
/// pass through unchanged.
pub fn fuse(
    g: &mut Graph,
    beta: NodeId,
    h_d: &DescriptionEmbedding,
    w_t: NodeId,
) -> Result<NodeId> {
    if !h_d.is_keyword {
        return Ok(w_t);
    }
    convex_mix(g, beta, h_d.vector, w_t)
}

/// The literal reading: the convex combination is applied to every word,
/// so non-keywords are attenuated by `1 - beta`.
pub fn fuse_literal(
    g: &mut Graph,
    beta: NodeId,
    h_d: &DescriptionEmbedding,
    w_t: NodeId,
) -> Result<NodeId> {
    convex_mix(g, beta, h_d.vector, w_t)
}

/// Ablation variant: plain addition of description and word embeddings
/// for keywords, pass-through for everything else.
pub fn simple_add_fuse(g: &mut Graph, h_d: &DescriptionEmbedding, w_t: NodeId) -> Result<NodeId> {
    if !h_d.is_keyword {
        return Ok(w_t);
    }
    g.add(h_d.vector, w_t).map_err(Into::into)
}
