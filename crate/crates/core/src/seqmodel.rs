//! Sequence aggregation: a bidirectional LSTM over the per-window embeddings
//! followed by additive attention, producing one global embedding c per
//! sequence, plus the linear embedding φ that matches window embeddings to
//! the critic's 200-dimensional space.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::encoder::{LinearParams, LinearVars, EMBED_DIM};
use crate::error::{MilcError, Result};

/// Hidden units per LSTM direction.
pub const LSTM_HIDDEN: usize = 100;

/// Width of the global embedding c (= 2 × LSTM_HIDDEN).
pub const GLOBAL_DIM: usize = 2 * LSTM_HIDDEN;

/// Width of the attention projection.
pub const ATTN_DIM: usize = 200;

/// One LSTM direction: input, recurrent, and bias parameters with gate
/// order [input, forget, cell, output].
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F: Scalar> {
    pub wx: Tensor<F>,
    pub wh: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub bias: Var,
}

impl<F: Scalar> LstmParams<F> {
    /// Uniform fan-in init; forget-gate bias starts at 1 so early training
    /// retains cell state.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bx = 1.0 / (input_dim as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for u in hidden..2 * hidden {
            bias.data_mut()[u] = F::ONE;
        }
        LstmParams {
            wx: Tensor::from_fn(&[input_dim, 4 * hidden], |_| F::from_f64(rng.gen_range(-bx..bx))),
            wh: Tensor::from_fn(&[hidden, 4 * hidden], |_| F::from_f64(rng.gen_range(-bh..bh))),
            bias,
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> LstmVars {
        LstmVars {
            wx: tape.leaf(self.wx.clone()),
            wh: tape.leaf(self.wh.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

/// Additive attention: score_t = vᵀ·tanh(W·h_t + b), softmax over time.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F: Scalar> {
    pub proj: LinearParams<F>,
    pub score: LinearParams<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub proj: LinearVars,
    pub score: LinearVars,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            proj: LinearParams::init(GLOBAL_DIM, ATTN_DIM, rng),
            score: LinearParams::init(ATTN_DIM, 1, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> AttentionVars {
        AttentionVars { proj: self.proj.register(tape), score: self.score.register(tape) }
    }
}

/// Everything `aggregate` needs on the tape.
#[derive(Clone, Debug)]
pub struct AggregateVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub attention: AttentionVars,
}

/// Output of one aggregation pass.
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// Global embeddings, (B, 200).
    pub c: Var,
    /// Attention weights, (T, B), each column summing to 1.
    pub alpha: Var,
    /// BiLSTM states, (T, B, 200), exposed for inspection.
    pub states: Var,
}

/// Run the biLSTM over local embeddings z (T, B, EMBED_DIM) and pool the
/// states with additive attention into c (B, GLOBAL_DIM).
pub fn aggregate<F: Scalar>(tape: &mut Tape<F>, vars: &AggregateVars, z: Var) -> Result<Aggregated> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 3 || shape[2] != EMBED_DIM {
        return Err(MilcError::ShapeMismatch {
            op: "aggregate",
            details: format!("want (T, B, {}), got {:?}", EMBED_DIM, shape),
        });
    }
    let (t_len, bsz) = (shape[0], shape[1]);
    if t_len == 0 {
        return Err(MilcError::InvalidArgument("cannot aggregate an empty window list".into()));
    }

    let fwd = tape.lstm_seq(z, vars.fwd.wx, vars.fwd.wh, vars.fwd.bias)?;
    let z_rev = tape.reverse_axis0(z)?;
    let bwd_rev = tape.lstm_seq(z_rev, vars.bwd.wx, vars.bwd.wh, vars.bwd.bias)?;
    let bwd = tape.reverse_axis0(bwd_rev)?;
    let states = tape.concat_last(&[fwd, bwd])?;

    let flat = tape.reshape(states, &[t_len * bsz, GLOBAL_DIM])?;
    let proj = tape.linear(flat, vars.attention.proj.weight, vars.attention.proj.bias)?;
    let act = tape.tanh(proj);
    let scores = tape.linear(act, vars.attention.score.weight, vars.attention.score.bias)?;
    let scores_tb = tape.reshape(scores, &[t_len, bsz])?;
    let alpha = tape.softmax_axis0(scores_tb)?;
    let c = tape.weighted_pool_time(states, alpha)?;
    Ok(Aggregated { c, alpha, states })
}

/// The critic's window-side embedding: one linear map 256 → 200.
pub fn phi_embed<F: Scalar>(tape: &mut Tape<F>, phi: &LinearVars, z: Var) -> Result<Var> {
    let shape = tape.value(z).shape();
    if shape.len() != 2 || shape[1] != EMBED_DIM {
        return Err(MilcError::ShapeMismatch {
            op: "phi",
            details: format!("want (rows, {}), got {:?}", EMBED_DIM, shape),
        });
    }
    tape.linear(z, phi.weight, phi.bias)
}

pub fn init_phi<F: Scalar>(rng: &mut ChaCha8Rng) -> LinearParams<F> {
    LinearParams::init(EMBED_DIM, GLOBAL_DIM, rng)
}
