//! Training orchestration: contrastive pre-training on the synthetic corpus,
//! the three downstream transfer regimes plus the autoencoder baseline, and
//! the multi-trial runner.

mod autoencoder;
mod downstream;
mod pretrain;
mod runner;

pub use autoencoder::{decode_windows, pretrain_autoencoder, AeOutcome, DecoderParams, DecoderVars};
pub use downstream::{train_downstream, DownstreamEpoch, DownstreamOutcome, InitArm, Regime};
pub use pretrain::{assignment_eval, pretrain, PretrainEpoch, PretrainOutcome};
pub use runner::{run_trials, trial_seeds, TrialBatch};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamState, Real, Tape, Tensor, Var};
use crate::encoder::EncoderVariant;
use crate::error::{MilcError, Result};
use crate::model::ModelBundle;
use crate::windows::WindowedSequence;

/// Encoder variant that accepts the given channel count.
pub fn variant_for_channels(channels: usize) -> Result<EncoderVariant> {
    for v in [EncoderVariant::Simulation, EncoderVariant::Real] {
        if v.in_channels() == channels {
            return Ok(v);
        }
    }
    Err(MilcError::Data(format!("no encoder variant takes {} input channels", channels)))
}

/// Stack windows into one (n, channels, win_len) batch tensor.
pub(crate) fn pack_windows(windows: &[&Tensor<Real>]) -> Result<Tensor<Real>> {
    let first = windows
        .first()
        .ok_or_else(|| MilcError::InvalidArgument("empty window batch".into()))?;
    let shape = first.shape();
    let per = first.len();
    let mut data = Vec::with_capacity(windows.len() * per);
    for w in windows {
        if w.shape() != shape {
            return Err(MilcError::ShapeMismatch {
                op: "pack_windows",
                details: format!("{:?} vs {:?}", w.shape(), shape),
            });
        }
        data.extend_from_slice(w.data());
    }
    Tensor::new(vec![windows.len(), shape[0], shape[1]], data)
}

/// A contiguous `t_per` windows from each listed sequence, packed
/// sequence-major: rows p·t_per .. (p+1)·t_per hold sequence `seqs[p]`.
pub(crate) fn pack_runs(
    windowed: &[WindowedSequence],
    seqs: &[usize],
    starts: &[usize],
    t_per: usize,
) -> Result<Tensor<Real>> {
    let mut refs = Vec::with_capacity(seqs.len() * t_per);
    for (&s, &start) in seqs.iter().zip(starts) {
        let ws = &windowed[s];
        if start + t_per > ws.len() {
            return Err(MilcError::InvalidArgument(format!(
                "run of {} windows at {} exceeds the {} available",
                t_per,
                start,
                ws.len()
            )));
        }
        for w in &ws.windows[start..start + t_per] {
            refs.push(w);
        }
    }
    pack_windows(&refs)
}

/// Apply one Adam update to `bundle` from gradients recorded on `tape`.
/// Parameters the loss never touched are skipped (their moments stay zero).
pub(crate) fn apply_step(
    bundle: &mut ModelBundle<Real>,
    adam: &mut AdamState<Real>,
    tape: Tape<Real>,
    loss: Var,
    vars_in_visit_order: &[Var],
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let taken: Vec<Option<Tensor<Real>>> =
        vars_in_visit_order.iter().map(|v| grads.take(*v)).collect();
    for (g, (name, _)) in taken.iter().zip(bundle.visit()) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(MilcError::NonFinite(format!("gradient of {}", name)));
            }
        }
    }
    let mut params: Vec<&mut Tensor<Real>> =
        bundle.visit_mut().into_iter().map(|(_, t)| t).collect();
    let grad_refs: Vec<Option<&Tensor<Real>>> = taken.iter().map(Option::as_ref).collect();
    adam.step(&mut params, &grad_refs)
}

/// Patience-based early stopping on a validation metric.
pub(crate) struct EarlyStop {
    higher_is_better: bool,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(higher_is_better: bool) -> Self {
        EarlyStop {
            higher_is_better,
            best: if higher_is_better { f64::NEG_INFINITY } else { f64::INFINITY },
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record this epoch's metric; returns true when it improves the best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = if self.higher_is_better { value > self.best } else { value < self.best };
        if improved {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.stale >= patience
    }
}

/// Deterministic per-epoch shuffle of `n` items.
pub(crate) fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// FNV-1a over the exact parameter bits of the pre-trained stack
/// (encoder + biLSTM + attention), for frozen-regime audits.
pub fn backbone_fingerprint(bundle: &ModelBundle<Real>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in bundle.visit() {
        if !crate::model::is_backbone(&name) {
            continue;
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}
