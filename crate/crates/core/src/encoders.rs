//! GRU cell and sequence encoders.
//!
//! The update equations carry no bias terms; an optional bias set can be
//! switched on for experimentation. A masked (PAD) step freezes the
//! recurrent state, so the sequence embedding reflects real tokens only,
//! and contributes a zero per-step state that downstream attention must
//! ignore.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId};
use crate::matrix::Matrix;

pub type Result<T> = std::result::Result<T, EncodeError>;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("encode: sequence is empty or fully masked")]
    EmptySequence,
}

/// The six weight matrices of a gated recurrent unit. `w_*` map the
/// input (H x D), `u_*` the previous hidden state (H x H).
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    /// Optional pre-activation biases (b_z, b_r, b_h), each H x 1.
    pub biases: Option<[Matrix; 3]>,
}

impl GruParams {
    /// Uniform init in +-1/sqrt(fan-in).
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, input: usize, with_biases: bool) -> Self {
        let wb = 1.0 / (input as f64).sqrt();
        let ub = 1.0 / (hidden as f64).sqrt();
        GruParams {
            w_z: Matrix::uniform(rng, hidden, input, -wb, wb),
            u_z: Matrix::uniform(rng, hidden, hidden, -ub, ub),
            w_r: Matrix::uniform(rng, hidden, input, -wb, wb),
            u_r: Matrix::uniform(rng, hidden, hidden, -ub, ub),
            w_h: Matrix::uniform(rng, hidden, input, -wb, wb),
            u_h: Matrix::uniform(rng, hidden, hidden, -ub, ub),
            biases: with_biases.then(|| {
                [
                    Matrix::zeros(hidden, 1),
                    Matrix::zeros(hidden, 1),
                    Matrix::zeros(hidden, 1),
                ]
            }),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_z: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            w_r: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            w_h: Matrix::zeros(hidden, input),
            u_h: Matrix::zeros(hidden, hidden),
            biases: None,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_z.cols()
    }

    /// Register the matrices as graph leaves.
    pub fn insert(&self, g: &mut Graph, trainable: bool) -> GruNodes {
        GruNodes {
            w_z: g.leaf(self.w_z.clone(), trainable),
            u_z: g.leaf(self.u_z.clone(), trainable),
            w_r: g.leaf(self.w_r.clone(), trainable),
            u_r: g.leaf(self.u_r.clone(), trainable),
            w_h: g.leaf(self.w_h.clone(), trainable),
            u_h: g.leaf(self.u_h.clone(), trainable),
            biases: self.biases.as_ref().map(|[z, r, h]| {
                [
                    g.leaf(z.clone(), trainable),
                    g.leaf(r.clone(), trainable),
                    g.leaf(h.clone(), trainable),
                ]
            }),
        }
    }
}

/// Graph handles for one GRU parameter set.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub w_h: NodeId,
    pub u_h: NodeId,
    pub biases: Option<[NodeId; 3]>,
}

impl GruNodes {
    pub fn hidden_size(&self, g: &Graph) -> usize {
        g.value(self.w_z).rows()
    }
}

fn gate_preactivation(
    g: &mut Graph,
    w: NodeId,
    x: NodeId,
    u: NodeId,
    h: NodeId,
    bias: Option<NodeId>,
) -> Result<NodeId> {
    let wx = g.matmul(w, x)?;
    let uh = g.matmul(u, h)?;
    let mut sum = g.add(wx, uh)?;
    if let Some(b) = bias {
        sum = g.add(sum, b)?;
    }
    Ok(sum)
}

/// One GRU update:
/// `z = sigma(W_z x + U_z h)`, `r = sigma(W_r x + U_r h)`,
/// `h~ = tanh(W_h x + U_h (r . h))`, `h' = z . h~ + (1 - z) . h`.
pub fn gru_step(g: &mut Graph, p: &GruNodes, x_t: NodeId, h_prev: NodeId) -> Result<NodeId> {
    let [bz, br, bh] = match p.biases {
        Some([z, r, h]) => [Some(z), Some(r), Some(h)],
        None => [None, None, None],
    };
    let z_pre = gate_preactivation(g, p.w_z, x_t, p.u_z, h_prev, bz)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate_preactivation(g, p.w_r, x_t, p.u_r, h_prev, br)?;
    let r = g.sigmoid(r_pre)?;

    let rh = g.hadamard(r, h_prev)?;
    let wx = g.matmul(p.w_h, x_t)?;
    let urh = g.matmul(p.u_h, rh)?;
    let mut cand_pre = g.add(wx, urh)?;
    if let Some(b) = bh {
        cand_pre = g.add(cand_pre, b)?;
    }
    let cand = g.tanh(cand_pre)?;

    let zc = g.hadamard(z, cand)?;
    let hidden = g.value(h_prev).rows();
    let ones = g.leaf(Matrix::from_vec(hidden, 1, vec![1.0; hidden]), false);
    let one_minus_z = g.sub(ones, z)?;
    let zh = g.hadamard(one_minus_z, h_prev)?;
    g.add(zc, zh).map_err(Into::into)
}

/// Per-step hidden states plus the sequence embedding.
///
/// `states[t]` has dim H for a GRU and 2H (forward then backward half)
/// for a biGRU; masked steps hold the zero vector. `final_state` is the
/// state after the last real token in each direction.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub states: Vec<NodeId>,
    pub final_state: NodeId,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Dimension of each per-step state.
    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.final_state).rows()
    }
}

fn directional_pass(
    g: &mut Graph,
    p: &GruNodes,
    inputs: &[NodeId],
    mask: &[bool],
    reverse: bool,
) -> Result<(Vec<NodeId>, NodeId)> {
    let hidden = p.hidden_size(g);
    let zero = g.leaf(Matrix::zeros(hidden, 1), false);
    let mut states = vec![zero; inputs.len()];
    let mut h = zero;
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        if mask[t] {
            h = gru_step(g, p, inputs[t], h)?;
            states[t] = h;
        }
        // PAD steps copy the previous state forward unchanged.
    }
    Ok((states, h))
}

/// Unidirectional encoding with `h_0 = 0`.
pub fn encode(
    g: &mut Graph,
    p: &GruNodes,
    inputs: &[NodeId],
    mask: &[bool],
) -> Result<EncodedSequence> {
    assert_eq!(inputs.len(), mask.len(), "one mask entry per input");
    if !mask.iter().any(|&m| m) {
        return Err(EncodeError::EmptySequence);
    }
    let (states, final_state) = directional_pass(g, p, inputs, mask, false)?;
    Ok(EncodedSequence {
        states,
        final_state,
        mask: mask.to_vec(),
    })
}

/// Bidirectional encoding. The backward pass consumes tokens in reverse
/// order; each per-step state is `[fwd_t, bwd_t]` and the sequence
/// embedding concatenates the two directions' last updates.
pub fn encode_bi(
    g: &mut Graph,
    p_fwd: &GruNodes,
    p_bwd: &GruNodes,
    inputs: &[NodeId],
    mask: &[bool],
) -> Result<EncodedSequence> {
    assert_eq!(inputs.len(), mask.len(), "one mask entry per input");
    if !mask.iter().any(|&m| m) {
        return Err(EncodeError::EmptySequence);
    }
    let (fwd_states, fwd_final) = directional_pass(g, p_fwd, inputs, mask, false)?;
    let (bwd_states, bwd_final) = directional_pass(g, p_bwd, inputs, mask, true)?;
    let zero2 = {
        let dim = p_fwd.hidden_size(g) + p_bwd.hidden_size(g);
        g.leaf(Matrix::zeros(dim, 1), false)
    };
    let mut states = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        if mask[t] {
            states.push(g.concat_rows(fwd_states[t], bwd_states[t])?);
        } else {
            states.push(zero2);
        }
    }
    let final_state = g.concat_rows(fwd_final, bwd_final)?;
    Ok(EncodedSequence {
        states,
        final_state,
        mask: mask.to_vec(),
    })
}
