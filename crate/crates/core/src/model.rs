//! The complete model: window encoder, biLSTM+attention aggregator, the
//! critic embedding φ, and the two-layer classification head, bundled with
//! canonical parameter names for checkpointing and optimizer plumbing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::encoder::{encode_windows, EncoderParams, EncoderVariant, EncoderVars, LinearParams, LinearVars};
use crate::error::{MilcError, Result};
use crate::seqmodel::{aggregate, init_phi, AggregateVars, AttentionParams, LstmParams, GLOBAL_DIM, LSTM_HIDDEN};

/// Binary classification: VAR vs SVAR.
pub const N_CLASSES: usize = 2;

/// All learnable parameters. The backbone (encoder + biLSTM + attention) is
/// what pre-training transfers; φ only drives the InfoNCE critic and the
/// head only the downstream classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F: Scalar> {
    pub variant: EncoderVariant,
    pub win_len: usize,
    pub encoder: EncoderParams<F>,
    pub lstm_fwd: LstmParams<F>,
    pub lstm_bwd: LstmParams<F>,
    pub attention: AttentionParams<F>,
    pub phi: LinearParams<F>,
    pub head_hidden: LinearParams<F>,
    pub head_out: LinearParams<F>,
}

/// Tape handles for one registered bundle.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub encoder: EncoderVars,
    pub agg: AggregateVars,
    pub phi: LinearVars,
    pub head_hidden: LinearVars,
    pub head_out: LinearVars,
}

impl<F: Scalar> ModelBundle<F> {
    /// Fresh random parameters; every draw flows from `seed` in canonical
    /// order, so equal seeds give bit-identical bundles.
    pub fn init(variant: EncoderVariant, win_len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(variant, win_len, &mut rng)?;
        let lstm_fwd = LstmParams::init(crate::encoder::EMBED_DIM, LSTM_HIDDEN, &mut rng);
        let lstm_bwd = LstmParams::init(crate::encoder::EMBED_DIM, LSTM_HIDDEN, &mut rng);
        let attention = AttentionParams::init(&mut rng);
        let phi = init_phi(&mut rng);
        let head_hidden = LinearParams::init(GLOBAL_DIM, GLOBAL_DIM, &mut rng);
        let head_out = LinearParams::init(GLOBAL_DIM, N_CLASSES, &mut rng);
        Ok(ModelBundle {
            variant,
            win_len,
            encoder,
            lstm_fwd,
            lstm_bwd,
            attention,
            phi,
            head_hidden,
            head_out,
        })
    }

    /// Replace the classification head with fresh random parameters (each
    /// downstream trial starts from its own head).
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head_hidden = LinearParams::init(GLOBAL_DIM, GLOBAL_DIM, &mut rng);
        self.head_out = LinearParams::init(GLOBAL_DIM, N_CLASSES, &mut rng);
    }

    /// (name, tensor) pairs in canonical order.
    pub fn visit(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("encoder.conv{}.weight", i), &c.weight));
            out.push((format!("encoder.conv{}.bias", i), &c.bias));
        }
        out.push(("encoder.out.weight".into(), &self.encoder.out.weight));
        out.push(("encoder.out.bias".into(), &self.encoder.out.bias));
        for (dir, lstm) in [("fwd", &self.lstm_fwd), ("bwd", &self.lstm_bwd)] {
            out.push((format!("lstm.{}.wx", dir), &lstm.wx));
            out.push((format!("lstm.{}.wh", dir), &lstm.wh));
            out.push((format!("lstm.{}.bias", dir), &lstm.bias));
        }
        out.push(("attention.proj.weight".into(), &self.attention.proj.weight));
        out.push(("attention.proj.bias".into(), &self.attention.proj.bias));
        out.push(("attention.score.weight".into(), &self.attention.score.weight));
        out.push(("attention.score.bias".into(), &self.attention.score.bias));
        out.push(("phi.weight".into(), &self.phi.weight));
        out.push(("phi.bias".into(), &self.phi.bias));
        out.push(("head.hidden.weight".into(), &self.head_hidden.weight));
        out.push(("head.hidden.bias".into(), &self.head_hidden.bias));
        out.push(("head.out.weight".into(), &self.head_out.weight));
        out.push(("head.out.bias".into(), &self.head_out.bias));
        out
    }

    /// Same order as `visit`, mutable.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, c) in self.encoder.convs.iter_mut().enumerate() {
            out.push((format!("encoder.conv{}.weight", i), &mut c.weight));
            out.push((format!("encoder.conv{}.bias", i), &mut c.bias));
        }
        out.push(("encoder.out.weight".into(), &mut self.encoder.out.weight));
        out.push(("encoder.out.bias".into(), &mut self.encoder.out.bias));
        for (dir, lstm) in [("fwd", &mut self.lstm_fwd), ("bwd", &mut self.lstm_bwd)] {
            out.push((format!("lstm.{}.wx", dir), &mut lstm.wx));
            out.push((format!("lstm.{}.wh", dir), &mut lstm.wh));
            out.push((format!("lstm.{}.bias", dir), &mut lstm.bias));
        }
        out.push(("attention.proj.weight".into(), &mut self.attention.proj.weight));
        out.push(("attention.proj.bias".into(), &mut self.attention.proj.bias));
        out.push(("attention.score.weight".into(), &mut self.attention.score.weight));
        out.push(("attention.score.bias".into(), &mut self.attention.score.bias));
        out.push(("phi.weight".into(), &mut self.phi.weight));
        out.push(("phi.bias".into(), &mut self.phi.bias));
        out.push(("head.hidden.weight".into(), &mut self.head_hidden.weight));
        out.push(("head.hidden.bias".into(), &mut self.head_hidden.bias));
        out.push(("head.out.weight".into(), &mut self.head_out.weight));
        out.push(("head.out.bias".into(), &mut self.head_out.bias));
        out
    }

    /// Register every parameter as a tape leaf, in `visit` order.
    pub fn register(&self, tape: &mut Tape<F>) -> BundleVars {
        BundleVars {
            encoder: self.encoder.register(tape),
            agg: AggregateVars {
                fwd: self.lstm_fwd.register(tape),
                bwd: self.lstm_bwd.register(tape),
                attention: self.attention.register(tape),
            },
            phi: self.phi.register(tape),
            head_hidden: self.head_hidden.register(tape),
            head_out: self.head_out.register(tape),
        }
    }

    /// Convert element type (used to instantiate f64 copies for gradient
    /// checks of the composed losses).
    pub fn cast<G: Scalar>(&self) -> ModelBundle<G> {
        ModelBundle {
            variant: self.variant,
            win_len: self.win_len,
            encoder: EncoderParams {
                convs: self
                    .encoder
                    .convs
                    .iter()
                    .map(|c| crate::encoder::ConvParams { weight: c.weight.cast(), bias: c.bias.cast() })
                    .collect(),
                out: LinearParams { weight: self.encoder.out.weight.cast(), bias: self.encoder.out.bias.cast() },
            },
            lstm_fwd: cast_lstm(&self.lstm_fwd),
            lstm_bwd: cast_lstm(&self.lstm_bwd),
            attention: AttentionParams {
                proj: LinearParams {
                    weight: self.attention.proj.weight.cast(),
                    bias: self.attention.proj.bias.cast(),
                },
                score: LinearParams {
                    weight: self.attention.score.weight.cast(),
                    bias: self.attention.score.bias.cast(),
                },
            },
            phi: LinearParams { weight: self.phi.weight.cast(), bias: self.phi.bias.cast() },
            head_hidden: LinearParams {
                weight: self.head_hidden.weight.cast(),
                bias: self.head_hidden.bias.cast(),
            },
            head_out: LinearParams { weight: self.head_out.weight.cast(), bias: self.head_out.bias.cast() },
        }
    }
}

fn cast_lstm<F: Scalar, G: Scalar>(l: &LstmParams<F>) -> LstmParams<G> {
    LstmParams { wx: l.wx.cast(), wh: l.wh.cast(), bias: l.bias.cast() }
}

impl BundleVars {
    /// Inverse of [`BundleVars::var_list`]: reassemble handles laid out flat
    /// in `visit` order. `n_convs` is the encoder's conv-layer count.
    pub fn from_slice(n_convs: usize, vars: &[Var]) -> Result<Self> {
        let expected = 2 * n_convs + 18;
        if vars.len() != expected {
            return Err(MilcError::ShapeMismatch {
                op: "bundle_vars",
                details: format!("{} handles but layout needs {}", vars.len(), expected),
            });
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let convs = (0..n_convs)
            .map(|_| crate::encoder::ConvVars { weight: next(), bias: next() })
            .collect();
        let encoder = EncoderVars { convs, out: LinearVars { weight: next(), bias: next() } };
        let mut lstm = || crate::seqmodel::LstmVars { wx: next(), wh: next(), bias: next() };
        let fwd = lstm();
        let bwd = lstm();
        let attention = crate::seqmodel::AttentionVars {
            proj: LinearVars { weight: next(), bias: next() },
            score: LinearVars { weight: next(), bias: next() },
        };
        Ok(BundleVars {
            encoder,
            agg: AggregateVars { fwd, bwd, attention },
            phi: LinearVars { weight: next(), bias: next() },
            head_hidden: LinearVars { weight: next(), bias: next() },
            head_out: LinearVars { weight: next(), bias: next() },
        })
    }

    /// Var handles in `visit` order (for pairing analytic gradients with
    /// parameters after a backward pass).
    pub fn var_list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.encoder.convs {
            out.push(c.weight);
            out.push(c.bias);
        }
        out.push(self.encoder.out.weight);
        out.push(self.encoder.out.bias);
        for lstm in [&self.agg.fwd, &self.agg.bwd] {
            out.push(lstm.wx);
            out.push(lstm.wh);
            out.push(lstm.bias);
        }
        out.push(self.agg.attention.proj.weight);
        out.push(self.agg.attention.proj.bias);
        out.push(self.agg.attention.score.weight);
        out.push(self.agg.attention.score.bias);
        out.push(self.phi.weight);
        out.push(self.phi.bias);
        out.push(self.head_hidden.weight);
        out.push(self.head_hidden.bias);
        out.push(self.head_out.weight);
        out.push(self.head_out.bias);
        out
    }
}

/// Backbone parameters are the ones pre-training transfers and the frozen
/// regime pins.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("lstm.") || name.starts_with("attention.")
}

/// Everything the backbone produces for a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct GlobalForward {
    /// Window embeddings (B·T, 256), sequence-major rows — the contrastive
    /// objective embeds these through φ.
    pub z: Var,
    /// Global sequence embeddings (B, 200).
    pub c: Var,
    /// Attention weights (T, B); each column sums to one.
    pub alpha: Var,
    /// BiLSTM states (T, B, 200).
    pub states: Var,
}

/// Windows → encoder → biLSTM+attention. `xw` holds packed windows
/// (B·T, channels, win_len) in sequence-major row order (row = b·T + t);
/// returns both the window embeddings and the per-sequence aggregation
/// over T windows each.
pub fn forward_global<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &BundleVars,
    xw: Var,
    t_per_seq: usize,
) -> Result<GlobalForward> {
    let rows = tape.value(xw).shape()[0];
    if t_per_seq == 0 || rows % t_per_seq != 0 {
        return Err(MilcError::ShapeMismatch {
            op: "forward_global",
            details: format!("{} window rows not divisible by T={}", rows, t_per_seq),
        });
    }
    let b = rows / t_per_seq;
    let z = encode_windows(tape, &vars.encoder, xw)?;
    let z3 = tape.reshape(z, &[b, t_per_seq, crate::encoder::EMBED_DIM])?;
    let z_tb = tape.swap_axes_01(z3)?;
    let agg = aggregate(tape, &vars.agg, z_tb)?;
    Ok(GlobalForward { z, c: agg.c, alpha: agg.alpha, states: agg.states })
}

/// Classification head: 200 → 200 → 2 with a ReLU between.
pub fn head_logits<F: Scalar>(tape: &mut Tape<F>, vars: &BundleVars, c: Var) -> Result<Var> {
    let h = tape.linear(c, vars.head_hidden.weight, vars.head_hidden.bias)?;
    let a = tape.relu(h);
    tape.linear(a, vars.head_out.weight, vars.head_out.bias)
}
