//! Numerical self-test battery: every differentiable op, plus composed
//! graphs shaped like the real training losses, verified against central
//! differences. Used by the test suite and by the `gradcheck` subcommand.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{check_gradient, GradCheckReport};
use crate::diffcore::Tensor;
use crate::encoder::EncoderVariant;
use crate::error::Result;
use crate::model::{forward_global, head_logits, BundleVars, ModelBundle};
use crate::objective::{critic_scores, infonce_loss, softmax_xent_rows};
use crate::seqmodel::phi_embed;

/// Coordinates probed per input tensor; large parameter matrices are strided.
const MAX_COORDS: usize = 24;

/// Tighter budget for the whole-model composites, whose input lists span
/// every parameter tensor.
const COMPOSITE_COORDS: usize = 6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}

/// Values with magnitude in [0.2, 1.0]: keeps finite differences away from
/// the ReLU kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}

/// Gradient checks for each tape op in isolation (routed through an
/// elementwise product with a second input where the raw op would otherwise
/// yield permutation-invariant, uninformative gradients).
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    {
        let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        reports.push(check_gradient("add-sub-scale", &[a, b], MAX_COORDS, |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let sc = t.scale(d, 1.7);
            let m = t.mul(sc, v[1])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = away_from_zero(&mut rng, &[3, 4]);
        let w = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        reports.push(check_gradient("relu", &[x, w], MAX_COORDS, |t, v| {
            let r = t.relu(v[0]);
            let m = t.mul(r, v[1])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = uniform(&mut rng, &[8], -2.0, 2.0);
        reports.push(check_gradient("tanh", &[x], MAX_COORDS, |t, v| {
            let y = t.tanh(v[0]);
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let x = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 5], -0.7, 0.7);
        let b = uniform(&mut rng, &[5], -0.5, 0.5);
        reports.push(check_gradient("linear", &[x, w, b], MAX_COORDS, |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
        reports.push(check_gradient("matmul", &[a, b], MAX_COORDS, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        reports.push(check_gradient("matmul-trans-b", &[a, b], MAX_COORDS, |t, v| {
            let y = t.matmul_trans_b(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        reports.push(check_gradient("reshape-swap-reverse", &[x, w], MAX_COORDS, |t, v| {
            let s = t.swap_axes_01(v[0])?;
            let r = t.reverse_axis0(s)?;
            let flat = t.reshape(r, &[3, 2, 4])?;
            let m = t.mul(flat, v[1])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[2, 2], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 5], -1.0, 1.0);
        reports.push(check_gradient("concat-last", &[a, b, w], MAX_COORDS, |t, v| {
            let c = t.concat_last(&[v[0], v[1]])?;
            let m = t.mul(c, v[2])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = uniform(&mut rng, &[2, 3, 8], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3], -0.5, 0.5);
        let b = uniform(&mut rng, &[4], -0.3, 0.3);
        reports.push(check_gradient("conv1d", &[x, w, b], MAX_COORDS, |t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            let a = t.tanh(y);
            let sq = t.mul(a, a)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let x = uniform(&mut rng, &[2, 3, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 3], -0.5, 0.5);
        let b = uniform(&mut rng, &[2], -0.3, 0.3);
        reports.push(check_gradient("conv-transpose1d", &[x, w, b], MAX_COORDS, |t, v| {
            let y = t.conv_transpose1d(v[0], v[1], v[2])?;
            let a = t.tanh(y);
            let sq = t.mul(a, a)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let x = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let wx = uniform(&mut rng, &[4, 12], -0.5, 0.5);
        let wh = uniform(&mut rng, &[3, 12], -0.5, 0.5);
        let b = uniform(&mut rng, &[12], -0.3, 0.3);
        let probe = uniform(&mut rng, &[3, 2, 3], -1.0, 1.0);
        reports.push(check_gradient("lstm", &[x, wx, wh, b, probe], MAX_COORDS, |t, v| {
            let h = t.lstm_seq(v[0], v[1], v[2], v[3])?;
            let m = t.mul(h, v[4])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let w = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        reports.push(check_gradient("softmax-last", &[x, w], MAX_COORDS, |t, v| {
            let s = t.softmax_last(v[0])?;
            let m = t.mul(s, v[1])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
        let w = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        reports.push(check_gradient("softmax-axis0", &[x, w], MAX_COORDS, |t, v| {
            let s = t.softmax_axis0(v[0])?;
            let m = t.mul(s, v[1])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        let x = uniform(&mut rng, &[3, 5], -3.0, 3.0);
        reports.push(check_gradient("logsumexp", &[x], MAX_COORDS, |t, v| {
            let l = t.logsumexp_last(v[0])?;
            let sq = t.mul(l, l)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let x = uniform(&mut rng, &[4, 5], -2.0, 2.0);
        reports.push(check_gradient("gather-cols", &[x], MAX_COORDS, |t, v| {
            let g = t.gather_cols(v[0], vec![1, 0, 3, 2])?;
            let sq = t.mul(g, g)?;
            Ok(t.mean_all(sq))
        })?);
    }

    {
        let h = uniform(&mut rng, &[3, 2, 4], -1.0, 1.0);
        let scores = uniform(&mut rng, &[3, 2], -2.0, 2.0);
        let probe = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        reports.push(check_gradient("weighted-pool", &[h, scores, probe], MAX_COORDS, |t, v| {
            let w = t.softmax_axis0(v[1])?;
            let pooled = t.weighted_pool_time(v[0], w)?;
            let m = t.mul(pooled, v[2])?;
            Ok(t.mean_all(m))
        })?);
    }

    {
        // Bidirectional recurrence with attention readout at toy size: the
        // same graph shape the sequence model builds, checked end to end.
        let x = uniform(&mut rng, &[4, 2, 3], -1.0, 1.0);
        let wx = uniform(&mut rng, &[3, 8], -0.5, 0.5);
        let wh = uniform(&mut rng, &[2, 8], -0.5, 0.5);
        let b = uniform(&mut rng, &[8], -0.2, 0.2);
        let wx_r = uniform(&mut rng, &[3, 8], -0.5, 0.5);
        let wh_r = uniform(&mut rng, &[2, 8], -0.5, 0.5);
        let b_r = uniform(&mut rng, &[8], -0.2, 0.2);
        let att_w = uniform(&mut rng, &[4, 4], -0.5, 0.5);
        let att_b = uniform(&mut rng, &[4], -0.2, 0.2);
        let att_v = uniform(&mut rng, &[4, 1], -0.5, 0.5);
        let att_vb = uniform(&mut rng, &[1], -0.1, 0.1);
        let inputs = vec![x, wx, wh, b, wx_r, wh_r, b_r, att_w, att_b, att_v, att_vb];
        reports.push(check_gradient(
            "bidir-attention-composite",
            &inputs,
            MAX_COORDS,
            |t, v| {
                let (t_len, bsz, hid2) = (4usize, 2usize, 4usize);
                let fwd = t.lstm_seq(v[0], v[1], v[2], v[3])?;
                let rev_in = t.reverse_axis0(v[0])?;
                let bwd_rev = t.lstm_seq(rev_in, v[4], v[5], v[6])?;
                let bwd = t.reverse_axis0(bwd_rev)?;
                let h = t.concat_last(&[fwd, bwd])?;
                let flat = t.reshape(h, &[t_len * bsz, hid2])?;
                let e1 = t.linear(flat, v[7], v[8])?;
                let e2 = t.tanh(e1);
                let scores = t.linear(e2, v[9], v[10])?;
                let scores_tb = t.reshape(scores, &[t_len, bsz])?;
                let att = t.softmax_axis0(scores_tb)?;
                let pooled = t.weighted_pool_time(h, att)?;
                let sq = t.mul(pooled, pooled)?;
                Ok(t.mean_all(sq))
            },
        )?);
    }

    {
        // The real training losses end to end, at the smallest window the
        // encoder accepts: two sequences of two windows each, every model
        // parameter probed.
        let (n_seq, t_per, win) = (2usize, 2usize, 10usize);
        let bundle = ModelBundle::<f64>::init(EncoderVariant::Simulation, win, seed ^ 0x5eed).unwrap();
        let n_convs = bundle.encoder.convs.len();
        let mut inputs = vec![away_from_zero(&mut rng, &[n_seq * t_per, 10, win])];
        inputs.extend(bundle.visit().into_iter().map(|(_, t)| t.clone()));

        reports.push(check_gradient("milc-loss-composite", &inputs, COMPOSITE_COORDS, |t, v| {
            let vars = BundleVars::from_slice(n_convs, &v[1..])?;
            let fwd = forward_global(t, &vars, v[0], t_per)?;
            let u = phi_embed(t, &vars.phi, fwd.z)?;
            let scores = critic_scores(t, u, fwd.c, t_per)?;
            infonce_loss(t, scores, t_per)
        })?);

        reports.push(check_gradient("classifier-composite", &inputs, COMPOSITE_COORDS, |t, v| {
            let vars = BundleVars::from_slice(n_convs, &v[1..])?;
            let fwd = forward_global(t, &vars, v[0], t_per)?;
            let logits = head_logits(t, &vars, fwd.c)?;
            softmax_xent_rows(t, logits, &[0, 1])
        })?);

        // Saliency path: gradient of a single class logit w.r.t. the input
        // windows themselves, parameters held constant.
        let xw = away_from_zero(&mut rng, &[t_per, 10, win]);
        reports.push(check_gradient("saliency-logit", &[xw], MAX_COORDS, |t, v| {
            let vars = bundle.register(t);
            let fwd = forward_global(t, &vars, v[0], t_per)?;
            let logits = head_logits(t, &vars, fwd.c)?;
            let picked = t.gather_cols(logits, vec![0])?;
            Ok(t.mean_all(picked))
        })?);
    }

    Ok(reports)
}

/// One status line per report, formatted for terminal output.
pub fn describe(report: &GradCheckReport) -> String {
    format!(
        "{:<28} {} (max rel err {:.3e} over {} coords)",
        report.name,
        if report.passed() { "ok" } else { "FAILED" },
        report.max_rel_err,
        report.checked
    )
}
