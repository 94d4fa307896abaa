//! The contrastive objective: a separable bilinear critic scoring every
//! (window, sequence) pair in a batch, and the InfoNCE loss that pushes each
//! window toward its own sequence's global embedding and away from the
//! others'.

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{MilcError, Result};

/// Bilinear critic table: entry [(i·T + t), j] = u_{i,t} · c_j. Row order is
/// sequence-major, so row r belongs to sequence r / T.
pub fn critic_scores<F: Scalar>(
    tape: &mut Tape<F>,
    u: Var,
    cs: Var,
    t_per_seq: usize,
) -> Result<Var> {
    let (su, sc) = (tape.value(u).shape().to_vec(), tape.value(cs).shape().to_vec());
    if su.len() != 2 || sc.len() != 2 || su[1] != sc[1] {
        return Err(MilcError::ShapeMismatch {
            op: "critic_scores",
            details: format!("window embeddings {:?} vs global embeddings {:?}", su, sc),
        });
    }
    if t_per_seq == 0 || su[0] != sc[0] * t_per_seq {
        return Err(MilcError::ShapeMismatch {
            op: "critic_scores",
            details: format!("{} window rows ≠ {} sequences × T={}", su[0], sc[0], t_per_seq),
        });
    }
    tape.matmul_trans_b(u, cs)
}

/// Mean softmax cross-entropy of each row against its target column,
/// computed via overflow-safe log-sum-exp. Shared by the InfoNCE objective
/// (targets = own sequence) and the downstream classifier (targets = labels).
pub fn softmax_xent_rows<F: Scalar>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape();
    if shape.len() != 2 || targets.len() != shape[0] {
        return Err(MilcError::ShapeMismatch {
            op: "softmax_xent",
            details: format!("logits {:?} with {} targets", shape, targets.len()),
        });
    }
    let lse = tape.logsumexp_last(logits)?;
    let picked = tape.gather_cols(logits, targets.to_vec())?;
    let per_row = tape.sub(lse, picked)?;
    Ok(tape.mean_all(per_row))
}

/// InfoNCE loss over a critic table: −mean_{i,t} log softmax row (i·T+t)
/// at column i. Zero when N = 1 (degenerate bound), ln N for uniform scores.
pub fn infonce_loss<F: Scalar>(tape: &mut Tape<F>, scores: Var, t_per_seq: usize) -> Result<Var> {
    let shape = tape.value(scores).shape();
    if shape.len() != 2 || t_per_seq == 0 || shape[0] != shape[1] * t_per_seq {
        return Err(MilcError::ShapeMismatch {
            op: "infonce",
            details: format!("score table {:?} incompatible with T={}", shape, t_per_seq),
        });
    }
    if !tape.value(scores).all_finite() {
        return Err(MilcError::NonFinite("critic scores".into()));
    }
    let targets: Vec<usize> = (0..shape[0]).map(|r| r / t_per_seq).collect();
    softmax_xent_rows(tape, scores, &targets)
}

/// Fraction of rows whose argmax column is the row's own sequence; ties
/// break to the lowest column index. Chance level is 1/N.
pub fn assignment_accuracy<F: Scalar>(scores: &Tensor<F>, t_per_seq: usize) -> Result<f64> {
    let shape = scores.shape();
    if shape.len() != 2 || t_per_seq == 0 || shape[0] != shape[1] * t_per_seq {
        return Err(MilcError::ShapeMismatch {
            op: "assignment_accuracy",
            details: format!("score table {:?} incompatible with T={}", shape, t_per_seq),
        });
    }
    let (rows, n) = (shape[0], shape[1]);
    let mut hits = 0usize;
    for r in 0..rows {
        let mut best_col = 0usize;
        let mut best = scores.at2(r, 0);
        for c in 1..n {
            let v = scores.at2(r, c);
            if v > best {
                best = v;
                best_col = c;
            }
        }
        if best_col == r / t_per_seq {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}
