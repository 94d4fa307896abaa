//! Autoencoder baseline: the same window encoder trained to reconstruct its
//! input through a mirrored transposed-convolution decoder. Pre-training
//! this way (instead of contrastively) isolates how much of the transfer
//! gain comes from the mutual-information objective rather than from any
//! unsupervised warm start.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamConfig, AdamState, Real, Scalar, Tape, Tensor, Var};
use crate::encoder::{encode_windows, ConvParams, ConvVars, EncoderParams, EncoderVariant, EncoderVars, LinearParams, LinearVars, EMBED_DIM};
use crate::error::{MilcError, Result};
use crate::io::ExperimentConfig;
use crate::model::ModelBundle;
use crate::seeds::{derive, derive2, stream};
use crate::synth::PretrainSeries;

use super::pretrain::PretrainEpoch;
use super::{pack_runs, EarlyStop};

/// Decoder mirroring the window encoder: a linear lift back to the flattened
/// conv features, then the conv stack reversed as transposed convolutions.
/// Transposed weights are laid out (in_features, out_features, kernel).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<F: Scalar> {
    pub lin: LinearParams<F>,
    pub convs: Vec<ConvParams<F>>,
    /// (features, length) the flat vector reshapes into before the convs.
    pub bottleneck: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub lin: LinearVars,
    pub convs: Vec<ConvVars>,
}

impl<F: Scalar> DecoderParams<F> {
    pub fn init(variant: EncoderVariant, win_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let flat = variant.flat_dim(win_len)?;
        let lin = LinearParams::init(EMBED_DIM, flat, rng);

        // Encoder layers as (out, in, kernel), walked backwards: each becomes
        // a transposed conv taking `out` features back to `in`.
        let mut fwd = Vec::new();
        let mut in_ch = variant.in_channels();
        for &(out_ch, k) in variant.conv_shapes() {
            fwd.push((out_ch, in_ch, k));
            in_ch = out_ch;
        }
        let convs = fwd
            .iter()
            .rev()
            .map(|&(ci, co, k)| {
                let bound = 1.0 / ((ci * k) as f64).sqrt();
                ConvParams {
                    weight: Tensor::from_fn(&[ci, co, k], |_| {
                        F::from_f64(rng.gen_range(-bound..bound))
                    }),
                    bias: Tensor::zeros(&[co]),
                }
            })
            .collect();

        let bottleneck_len = win_len - variant.conv_shapes().iter().map(|&(_, k)| k - 1).sum::<usize>();
        let bottleneck = (in_ch, bottleneck_len);
        Ok(DecoderParams { lin, convs, bottleneck })
    }

    pub fn register(&self, tape: &mut Tape<F>) -> DecoderVars {
        DecoderVars {
            lin: self.lin.register(tape),
            convs: self.convs.iter().map(|c| c.register(tape)).collect(),
        }
    }

    fn visit_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.lin.weight, &mut self.lin.bias];
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    fn visit(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.lin.weight, &self.lin.bias];
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out
    }
}

fn decoder_var_list(vars: &DecoderVars) -> Vec<Var> {
    let mut out = vec![vars.lin.weight, vars.lin.bias];
    for c in &vars.convs {
        out.push(c.weight);
        out.push(c.bias);
    }
    out
}

fn encoder_var_list(vars: &EncoderVars) -> Vec<Var> {
    let mut out = Vec::new();
    for c in &vars.convs {
        out.push(c.weight);
        out.push(c.bias);
    }
    out.push(vars.out.weight);
    out.push(vars.out.bias);
    out
}

fn encoder_params_mut<F: Scalar>(enc: &mut EncoderParams<F>) -> Vec<&mut Tensor<F>> {
    let mut out = Vec::new();
    for c in &mut enc.convs {
        out.push(&mut c.weight);
        out.push(&mut c.bias);
    }
    out.push(&mut enc.out.weight);
    out.push(&mut enc.out.bias);
    out
}

fn encoder_params<F: Scalar>(enc: &EncoderParams<F>) -> Vec<&Tensor<F>> {
    let mut out = Vec::new();
    for c in &enc.convs {
        out.push(&c.weight);
        out.push(&c.bias);
    }
    out.push(&enc.out.weight);
    out.push(&enc.out.bias);
    out
}

/// Map embeddings (B, 256) back to windows (B, channels, win_len): linear
/// lift, ReLU, reshape to the bottleneck feature map, then transposed convs
/// with ReLU between layers and none after the last.
pub fn decode_windows<F: Scalar>(
    tape: &mut Tape<F>,
    params: &DecoderParams<F>,
    vars: &DecoderVars,
    z: Var,
) -> Result<Var> {
    let b = tape.value(z).shape()[0];
    let lifted = tape.linear(z, vars.lin.weight, vars.lin.bias)?;
    let mut h = tape.relu(lifted);
    let (feats, len) = params.bottleneck;
    h = tape.reshape(h, &[b, feats, len])?;
    for (i, conv) in vars.convs.iter().enumerate() {
        h = tape.conv_transpose1d(h, conv.weight, conv.bias)?;
        if i + 1 < vars.convs.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Mean squared error between two equal-shaped values.
fn mse<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Result of autoencoder pre-training: a bundle whose encoder carries the
/// trained weights (everything else stays at its fresh initialization), the
/// decoder itself, and the epoch log (val_assignment is unused and zero).
#[derive(Clone, Debug)]
pub struct AeOutcome {
    pub bundle: ModelBundle<Real>,
    pub decoder: DecoderParams<Real>,
    pub log: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

struct AeGraph {
    tape: Tape<Real>,
    loss: Var,
    vars: Vec<Var>,
}

fn ae_graph(
    enc: &EncoderParams<Real>,
    dec: &DecoderParams<Real>,
    xw: Tensor<Real>,
) -> Result<AeGraph> {
    let mut tape = Tape::new();
    let enc_vars = enc.register(&mut tape);
    let dec_vars = dec.register(&mut tape);
    let x = tape.leaf(xw);
    let z = encode_windows(&mut tape, &enc_vars, x)?;
    let xhat = decode_windows(&mut tape, dec, &dec_vars, z)?;
    let loss = mse(&mut tape, xhat, x)?;
    let mut vars = encoder_var_list(&enc_vars);
    vars.extend(decoder_var_list(&dec_vars));
    Ok(AeGraph { tape, loss, vars })
}

/// Train encoder + decoder to reconstruct window runs from the corpus, with
/// the same batching and early-stopping protocol as contrastive
/// pre-training. Only the simulation variant has a decoder, so other channel
/// counts are refused.
pub fn pretrain_autoencoder(
    corpus: &[PretrainSeries],
    cfg: &ExperimentConfig,
) -> Result<AeOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(MilcError::Train("empty corpus".into()));
    }
    let channels = corpus[0].series.channels();
    let variant = EncoderVariant::Simulation;
    if channels != variant.in_channels() {
        return Err(MilcError::Train(format!(
            "the autoencoder baseline is defined for the {}-channel simulation data, got {} channels",
            variant.in_channels(),
            channels
        )));
    }
    let t_per = cfg.pretrain_run_windows;
    let train_w = super::pretrain::window_slices(corpus, cfg, |ps| ps.slices.train.clone(), "train")?;
    let val_w =
        super::pretrain::window_slices(corpus, cfg, |ps| ps.slices.val.clone(), "validation")?;

    let bundle =
        ModelBundle::<Real>::init(variant, cfg.win_len, derive(cfg.seed, stream::MODEL_INIT))?;
    let mut enc = bundle.encoder.clone();
    let mut dec = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive2(cfg.seed, stream::MODEL_INIT, 1));
        DecoderParams::<Real>::init(variant, cfg.win_len, &mut rng)?
    };
    let mut adam = {
        let mut params = encoder_params(&enc);
        params.extend(dec.visit());
        AdamState::new(AdamConfig::with_lr(cfg.pretrain_lr), &params)
    };

    let n = corpus.len();
    let mut stop = EarlyStop::new(false);
    let mut best = (enc.clone(), dec.clone());
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(derive2(cfg.seed, stream::BATCH_ORDER, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng);
        let starts = super::pretrain::sample_starts(&train_w, &order, t_per, &mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (seqs, run_starts) in
            order.chunks(cfg.pretrain_batch).zip(starts.chunks(cfg.pretrain_batch))
        {
            let xw = pack_runs(&train_w, seqs, run_starts, t_per)?;
            let g = ae_graph(&enc, &dec, xw)?;
            let value = g.tape.value(g.loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(MilcError::NonFinite(format!("reconstruction loss at epoch {}", epoch)));
            }
            loss_sum += value;
            batches += 1;

            let mut grads = g.tape.backward(g.loss)?;
            let taken: Vec<Option<Tensor<Real>>> =
                g.vars.iter().map(|v| grads.take(*v)).collect();
            let mut params = encoder_params_mut(&mut enc);
            params.extend(dec.visit_mut());
            let grad_refs: Vec<Option<&Tensor<Real>>> = taken.iter().map(Option::as_ref).collect();
            adam.step(&mut params, &grad_refs)?;
        }
        let train_loss = loss_sum / batches as f64;

        let mut val_rng =
            ChaCha8Rng::seed_from_u64(derive2(cfg.seed, stream::VAL_RUNS, epoch as u64));
        let val_seqs: Vec<usize> = (0..n).collect();
        let val_starts = super::pretrain::sample_starts(&val_w, &val_seqs, t_per, &mut val_rng);
        let xw = pack_runs(&val_w, &val_seqs, &val_starts, t_per)?;
        let g = ae_graph(&enc, &dec, xw)?;
        let val_loss = g.tape.value(g.loss).data()[0] as f64;

        log.push(PretrainEpoch { epoch, train_loss, val_loss, val_assignment: 0.0 });
        if stop.observe(epoch, val_loss) {
            best = (enc.clone(), dec.clone());
        }
        if stop.should_stop(cfg.patience) {
            break;
        }
    }

    let mut out_bundle = bundle;
    out_bundle.encoder = best.0;
    Ok(AeOutcome {
        bundle: out_bundle,
        decoder: best.1,
        log,
        best_epoch: stop.best_epoch,
        best_val_mse: stop.best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_pretrain_corpus;

    #[test]
    fn decoder_restores_the_window_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderParams::<f64>::init(EncoderVariant::Simulation, 20, &mut rng).unwrap();
        let dec = DecoderParams::<f64>::init(EncoderVariant::Simulation, 20, &mut rng).unwrap();
        assert_eq!(dec.bottleneck, (64, 11));

        let mut tape = Tape::new();
        let ev = enc.register(&mut tape);
        let dv = dec.register(&mut tape);
        let x = tape.leaf(Tensor::from_fn(&[3, 10, 20], |i| (i as f64 * 0.37).sin()));
        let z = encode_windows(&mut tape, &ev, x).unwrap();
        let xhat = decode_windows(&mut tape, &dec, &dv, z).unwrap();
        assert_eq!(tape.value(xhat).shape(), &[3, 10, 20]);
    }

    #[test]
    fn zero_windows_reconstruct_to_exactly_zero_loss() {
        // All biases start at zero, so a zero input must flow through both
        // stacks unchanged and the loss must be exactly 0 — any stray
        // constant in the wiring would show up here.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderParams::<f64>::init(EncoderVariant::Simulation, 20, &mut rng).unwrap();
        let dec = DecoderParams::<f64>::init(EncoderVariant::Simulation, 20, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ev = enc.register(&mut tape);
        let dv = dec.register(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[2, 10, 20]));
        let z = encode_windows(&mut tape, &ev, x).unwrap();
        let xhat = decode_windows(&mut tape, &dec, &dv, z).unwrap();
        let loss = mse(&mut tape, xhat, x).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn reconstruction_error_falls_during_training() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 21;
        cfg.pretrain_series = 4;
        cfg.pretrain_len = 1000;
        // 4 sequences in one batch = one optimizer step per epoch, so give
        // the run enough epochs for Adam to make visible progress.
        cfg.max_epochs = 120;
        cfg.patience = 120;
        cfg.pretrain_lr = 3e-3;
        let corpus =
            make_pretrain_corpus(cfg.pretrain_series, cfg.pretrain_nodes, cfg.pretrain_len, cfg.seed)
                .unwrap();
        let out = pretrain_autoencoder(&corpus, &cfg).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let floor = out.log.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
        assert!(
            floor < 0.9 * first,
            "MSE should drop: first {:.4}, best {:.4}",
            first,
            floor
        );
        assert!(out.best_val_mse <= out.log[0].val_loss);
        // The returned bundle carries the trained encoder but an untouched head.
        let fresh = ModelBundle::<Real>::init(
            EncoderVariant::Simulation,
            cfg.win_len,
            derive(cfg.seed, stream::MODEL_INIT),
        )
        .unwrap();
        assert_ne!(out.bundle.encoder, fresh.encoder);
        assert_eq!(out.bundle.head_hidden, fresh.head_hidden);
        assert_eq!(out.bundle.lstm_fwd, fresh.lstm_fwd);
    }

    #[test]
    fn non_simulation_channel_counts_are_refused() {
        let cfg = ExperimentConfig::default();
        let corpus = make_pretrain_corpus(2, 5, 400, 9).unwrap();
        let err = pretrain_autoencoder(&corpus, &cfg).unwrap_err();
        assert!(err.to_string().contains("simulation"), "got: {}", err);
    }
}
