//! Central-difference verification of tape gradients.
//!
//! Checks run in f64: at the pinned step size the difference quotient has
//! roughly nine significant digits, so a backward-pass bug shows up orders of
//! magnitude above the tolerance instead of hiding in float noise.

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{MilcError, Result};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Maximum allowed relative error between analytic and numeric derivatives.
pub const REL_TOL: f64 = 1e-4;

/// Outcome of checking one scalar-valued graph against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest relative error seen over all probed coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates probed.
    pub checked: usize,
    /// Where the worst error occurred, e.g. `input 1, coord 7`.
    pub worst_at: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Relative error with a floor so near-zero derivative pairs are compared
/// absolutely at the same stringency.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Numeric partial derivative of `f` at `inputs`, w.r.t. coordinate `coord`
/// of input `input_idx`, by central differences.
pub fn central_diff<B>(build: &B, inputs: &[Tensor<f64>], input_idx: usize, coord: usize) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
        shifted[input_idx].data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.into_iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(MilcError::InvalidArgument("gradcheck loss must be scalar".into()));
        }
        Ok(tape.value(loss).data()[0].to_f64())
    };
    Ok((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP))
}

/// Compare the tape gradient of `build`'s scalar output against central
/// differences at every input.
///
/// For inputs larger than `max_coords` elements, an evenly strided subset of
/// coordinates is probed (always including the first and last), keeping the
/// check deterministic and fast on big parameter tensors.
pub fn check_gradient<B>(
    name: &str,
    inputs: &[Tensor<f64>],
    max_coords: usize,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        worst_at: String::new(),
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic_all = grads.get(vars[i]);
        for coord in sample_coords(input.len(), max_coords) {
            let analytic = analytic_all.map_or(0.0, |t| t.data()[coord].to_f64());
            let numeric = central_diff(&build, inputs, i, coord)?;
            let err = rel_err(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_at =
                    format!("input {}, coord {}: analytic {:.6e}, numeric {:.6e}", i, coord, analytic, numeric);
            }
        }
    }
    Ok(report)
}

fn sample_coords(len: usize, max_coords: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if max_coords == 0 || len <= max_coords {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..max_coords)
        .map(|i| i * (len - 1) / (max_coords - 1).max(1))
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_coords_cover_endpoints() {
        let c = sample_coords(1000, 10);
        assert_eq!(c.first(), Some(&0));
        assert_eq!(c.last(), Some(&999));
        assert!(c.len() <= 10);
        let all = sample_coords(5, 10);
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn flags_genuine_disagreement_at_a_relu_kink() {
        // At x = 0 the subgradient convention (0) and the central-difference
        // quotient (0.5) disagree; the check must report that loudly rather
        // than average it away.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = check_gradient("relu-at-kink", &[x], 0, |tape, vars| {
            let y = tape.relu(vars[0]);
            Ok(tape.mean_all(y))
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.4, "got {}", report.max_rel_err);
    }

    #[test]
    fn passes_on_simple_composites() {
        let x = Tensor::new(vec![4], vec![0.4, -0.9, 1.3, -0.2]).unwrap();
        let report = check_gradient("tanh-square", &[x], 0, |tape, vars| {
            let t = tape.tanh(vars[0]);
            let sq = tape.mul(t, t)?;
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(report.passed(), "{}: {}", report.max_rel_err, report.worst_at);
    }
}
