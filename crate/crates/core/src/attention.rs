//! Bilinear cross-attention over encoder states.
//!
//! One operation serves both directions: attending over context states
//! with the response embedding as query, and over response states with
//! the context embedding as query. Logits are `h_t' W q`; weights are a
//! masked softmax over time steps, so the attended vector is a convex
//! combination of the unmasked per-step states.

use crate::autodiff::{Graph, NodeId, Result};
use crate::encoders::EncodedSequence;

/// A convex combination of per-step states plus the weights that built it.
#[derive(Debug, Clone, Copy)]
pub struct AttendedEmbedding {
    /// Attended embedding, same dim as each state.
    pub vector: NodeId,
    /// Column of attention weights, one per time step; masked steps are 0.
    pub weights: NodeId,
}

/// Attend over `states` with bilinear matrix `w` and the given query.
pub fn attend(
    g: &mut Graph,
    states: &EncodedSequence,
    query: NodeId,
    w: NodeId,
) -> Result<AttendedEmbedding> {
    let stacked = g.concat_cols(&states.states)?; // E x T
    let wq = g.matmul(w, query)?; // E x 1
    let stacked_t = g.transpose(stacked); // T x E
    let logits = g.matmul(stacked_t, wq)?; // T x 1
    let weights = g.softmax_normalize(logits, &states.mask)?;
    let vector = g.matmul(stacked, weights)?; // E x 1
    Ok(AttendedEmbedding { vector, weights })
}
