//! Input saliency for a trained classifier: the gradient of the predicted
//! class's logit with respect to every input time point. The model sees a
//! sample as overlapping windows, so per-window gradients are folded back
//! onto the original time axis by summing contributions wherever windows
//! overlap; the result is rectified and scaled so the strongest point is 1.

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{MilcError, Result};
use crate::model::{forward_global, head_logits, ModelBundle};
use crate::synth::SampleClass;
use crate::windows::WindowSpec;

/// Saliency of one sample under one model.
#[derive(Clone, Debug)]
pub struct SaliencyMap<F: Scalar> {
    /// |∂logit/∂x| per input point, peak-normalized to 1. Time points no
    /// window covers (the tail a non-dividing stride discards) are zero.
    pub map: Tensor<F>,
    /// The signed, unnormalized folded gradient, for numerical checks.
    pub raw: Tensor<F>,
    /// Class whose logit was differentiated (the model's prediction).
    pub predicted: SampleClass,
    /// Value of that logit.
    pub logit: f64,
    /// Caller-supplied sample identity, carried into reports.
    pub sample_id: usize,
}

/// Window a (channels, length) input exactly as the training pipeline does.
fn pack_input<F: Scalar>(input: &Tensor<F>, spec: &WindowSpec) -> Result<(Tensor<F>, usize)> {
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(MilcError::ShapeMismatch {
            op: "saliency",
            details: format!("input must be (channels, length), got {:?}", shape),
        });
    }
    let (channels, length) = (shape[0], shape[1]);
    let t = spec.count(length)?;
    let stride = spec.stride();
    let mut xw = Tensor::zeros(&[t, channels, spec.win_len]);
    for k in 0..t {
        let start = k * stride;
        for c in 0..channels {
            let src = &input.data()[c * length + start..c * length + start + spec.win_len];
            let dst = (k * channels + c) * spec.win_len;
            xw.data_mut()[dst..dst + spec.win_len].copy_from_slice(src);
        }
    }
    Ok((xw, t))
}

/// Forward one sample to its logits; returns the tape, the window leaf (the
/// differentiation target), and the (1, 2) logit node.
fn forward_one<F: Scalar>(
    bundle: &ModelBundle<F>,
    input: &Tensor<F>,
    spec: &WindowSpec,
) -> Result<(Tape<F>, Var, Var)> {
    let (xw, t) = pack_input(input, spec)?;
    let mut tape = Tape::new();
    let vars = bundle.register(&mut tape);
    let x = tape.leaf(xw);
    let fwd = forward_global(&mut tape, &vars, x, t)?;
    let logits = head_logits(&mut tape, &vars, fwd.c)?;
    Ok((tape, x, logits))
}

/// Logit of a fixed class for one sample — the scalar the saliency map
/// differentiates, exposed so finite differences can probe it directly.
pub fn class_logit<F: Scalar>(
    bundle: &ModelBundle<F>,
    input: &Tensor<F>,
    spec: &WindowSpec,
    class: usize,
) -> Result<f64> {
    if class >= crate::model::N_CLASSES {
        return Err(MilcError::InvalidArgument(format!("class {} out of range", class)));
    }
    let (tape, _, logits) = forward_one(bundle, input, spec)?;
    Ok(tape.value(logits).at2(0, class).to_f64())
}

/// Saliency of `input` under `bundle`: fold per-window gradients of the
/// predicted class's logit back onto the time axis, rectify, peak-normalize.
pub fn compute_saliency<F: Scalar>(
    bundle: &ModelBundle<F>,
    input: &Tensor<F>,
    spec: &WindowSpec,
    sample_id: usize,
) -> Result<SaliencyMap<F>> {
    let (mut tape, x, logits) = forward_one(bundle, input, spec)?;
    let lv = tape.value(logits);
    let predicted = if lv.at2(0, 1) > lv.at2(0, 0) { 1 } else { 0 };
    let logit = lv.at2(0, predicted).to_f64();

    let picked = tape.gather_cols(logits, vec![predicted])?;
    let target = tape.mean_all(picked);
    let mut grads = tape.backward(target)?;

    let shape = input.shape();
    let (channels, length) = (shape[0], shape[1]);
    let stride = spec.stride();
    let mut raw = Tensor::<F>::zeros(&[channels, length]);
    if let Some(g) = grads.take(x) {
        let gd = g.data();
        let rd = raw.data_mut();
        let t = g.shape()[0];
        for k in 0..t {
            for c in 0..channels {
                for j in 0..spec.win_len {
                    rd[c * length + k * stride + j] =
                        rd[c * length + k * stride + j] + gd[(k * channels + c) * spec.win_len + j];
                }
            }
        }
    }

    let mut map = Tensor::from_fn(&[channels, length], |i| raw.data()[i].abs());
    let peak = map.data().iter().fold(F::ZERO, |m, &v| if v > m { v } else { m });
    if peak > F::ZERO {
        let inv = F::ONE / peak;
        for v in map.data_mut() {
            *v = *v * inv;
        }
    }

    Ok(SaliencyMap {
        map,
        raw,
        predicted: SampleClass::from_index(predicted)?,
        logit,
        sample_id,
    })
}
