//! Contrastive pre-training. Each epoch samples one contiguous run of
//! windows per sequence from its training slice, batches the runs, and
//! minimizes InfoNCE so every window's embedding identifies its own
//! sequence's global embedding among the batch. Validation runs come from
//! the disjoint validation slices; early stopping watches validation loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::error::{MilcError, Result};
use crate::io::ExperimentConfig;
use crate::model::{forward_global, BundleVars, ModelBundle};
use crate::objective::{assignment_accuracy, critic_scores, infonce_loss};
use crate::seeds::{derive, derive2, stream};
use crate::seqmodel::phi_embed;
use crate::synth::PretrainSeries;
use crate::windows::{extract_windows, WindowedSequence};

use super::{apply_step, pack_runs, variant_for_channels, EarlyStop};

/// One pre-training epoch: mean InfoNCE over training batches, and loss plus
/// window-assignment accuracy on the validation slices.
#[derive(Clone, Copy, Debug)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_assignment: f64,
}

/// Result of a pre-training run: the parameters from the best validation
/// epoch, plus the full epoch log.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub bundle: ModelBundle<Real>,
    pub log: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct MilcGraph {
    tape: Tape<Real>,
    vars: BundleVars,
    loss: Var,
    scores: Var,
}

/// Build the full contrastive graph for one packed batch of window runs.
fn milc_graph(bundle: &ModelBundle<Real>, xw: Tensor<Real>, t_per: usize) -> Result<MilcGraph> {
    let mut tape = Tape::new();
    let vars = bundle.register(&mut tape);
    let x = tape.leaf(xw);
    let fwd = forward_global(&mut tape, &vars, x, t_per)?;
    let u = phi_embed(&mut tape, &vars.phi, fwd.z)?;
    let scores = critic_scores(&mut tape, u, fwd.c, t_per)?;
    let loss = infonce_loss(&mut tape, scores, t_per)?;
    Ok(MilcGraph { tape, vars, loss, scores })
}

/// Fixed batch-sized index spans that cover 0..n. Every span has exactly
/// min(batch, n) elements — the final one is right-aligned and may overlap
/// its predecessor — so each validation table offers the same number of
/// negatives and the loss stays comparable to the training batches.
fn covering_chunks(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let b = batch.min(n);
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + b >= n {
            out.push(n - b..n);
            return out;
        }
        out.push(start..start + b);
        start += b;
    }
}

/// Sample one run start per sequence, uniform over the valid range.
pub(super) fn sample_starts(
    windowed: &[WindowedSequence],
    seqs: &[usize],
    t_per: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    seqs.iter()
        .map(|&s| {
            let max = windowed[s].len() - t_per;
            if max == 0 { 0 } else { rng.gen_range(0..=max) }
        })
        .collect()
}

pub(super) fn window_slices(
    corpus: &[PretrainSeries],
    cfg: &ExperimentConfig,
    pick: impl Fn(&PretrainSeries) -> std::ops::Range<usize>,
    slice_name: &str,
) -> Result<Vec<WindowedSequence>> {
    let spec = cfg.window_spec();
    let t_per = cfg.pretrain_run_windows;
    let mut out = Vec::with_capacity(corpus.len());
    for (i, ps) in corpus.iter().enumerate() {
        let piece = ps.series.slice_time(pick(ps))?;
        let ws = extract_windows(&piece, &spec, i)?;
        if ws.len() < t_per {
            return Err(MilcError::Train(format!(
                "{} slice of sequence {} yields {} windows; runs need {}",
                slice_name,
                i,
                ws.len(),
                t_per
            )));
        }
        out.push(ws);
    }
    Ok(out)
}

/// Mean loss and assignment accuracy over covering validation batches
/// (forward only). Rows are weighted equally across batches.
fn eval_batches(
    bundle: &ModelBundle<Real>,
    windowed: &[WindowedSequence],
    starts: &[usize],
    batch: usize,
    t_per: usize,
) -> Result<(f64, f64)> {
    let n = windowed.len();
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut rows = 0usize;
    for span in covering_chunks(n, batch) {
        let seqs: Vec<usize> = span.clone().collect();
        let xw = pack_runs(windowed, &seqs, &starts[span], t_per)?;
        let g = milc_graph(bundle, xw, t_per)?;
        let table = g.tape.value(g.scores);
        let r = table.shape()[0];
        loss_sum += g.tape.value(g.loss).data()[0] as f64 * r as f64;
        acc_sum += assignment_accuracy(table, t_per)? * r as f64;
        rows += r;
    }
    Ok((loss_sum / rows as f64, acc_sum / rows as f64))
}

/// Pre-train a fresh model on the corpus. Returns the parameters from the
/// epoch with the lowest validation loss; stops early once validation fails
/// to improve for `cfg.patience` epochs.
pub fn pretrain(corpus: &[PretrainSeries], cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(MilcError::Train(format!(
            "contrastive pre-training needs at least 2 sequences, got {}",
            corpus.len()
        )));
    }
    let channels = corpus[0].series.channels();
    if corpus.iter().any(|ps| ps.series.channels() != channels) {
        return Err(MilcError::Data("corpus mixes channel counts".into()));
    }
    let variant = variant_for_channels(channels)?;
    let t_per = cfg.pretrain_run_windows;

    let train_w = window_slices(corpus, cfg, |ps| ps.slices.train.clone(), "train")?;
    let val_w = window_slices(corpus, cfg, |ps| ps.slices.val.clone(), "validation")?;

    let mut bundle =
        ModelBundle::<Real>::init(variant, cfg.win_len, derive(cfg.seed, stream::MODEL_INIT))?;
    let mut adam = {
        let params: Vec<&Tensor<Real>> = bundle.visit().into_iter().map(|(_, t)| t).collect();
        AdamState::new(AdamConfig::with_lr(cfg.pretrain_lr), &params)
    };

    let n = corpus.len();
    let mut stop = EarlyStop::new(false);
    let mut best = bundle.clone();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(derive2(cfg.seed, stream::BATCH_ORDER, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng);
        let starts = sample_starts(&train_w, &order, t_per, &mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for (seqs, run_starts) in
            order.chunks(cfg.pretrain_batch).zip(starts.chunks(cfg.pretrain_batch))
        {
            // A lone sequence offers no negatives; skip the remainder chunk.
            if seqs.len() < 2 {
                continue;
            }
            let xw = pack_runs(&train_w, seqs, run_starts, t_per)?;
            let g = milc_graph(&bundle, xw, t_per)?;
            let value = g.tape.value(g.loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(MilcError::NonFinite(format!("training loss at epoch {}", epoch)));
            }
            let r = seqs.len() * t_per;
            loss_sum += value * r as f64;
            rows += r;
            apply_step(&mut bundle, &mut adam, g.tape, g.loss, &g.vars.var_list())?;
        }
        let train_loss = loss_sum / rows as f64;

        let mut val_rng =
            ChaCha8Rng::seed_from_u64(derive2(cfg.seed, stream::VAL_RUNS, epoch as u64));
        let val_seqs: Vec<usize> = (0..n).collect();
        let val_starts = sample_starts(&val_w, &val_seqs, t_per, &mut val_rng);
        let (val_loss, val_assignment) =
            eval_batches(&bundle, &val_w, &val_starts, cfg.pretrain_batch, t_per)?;

        log.push(PretrainEpoch { epoch, train_loss, val_loss, val_assignment });
        if stop.observe(epoch, val_loss) {
            best = bundle.clone();
        }
        if stop.should_stop(cfg.patience) {
            break;
        }
    }

    Ok(PretrainOutcome {
        bundle: best,
        log,
        best_epoch: stop.best_epoch,
        best_val_loss: stop.best,
    })
}

/// Window-assignment accuracy on the held-out test slices, scored in one
/// critic table over the whole corpus so chance level is 1/N. Run starts are
/// sampled from `seed`. Intended as a one-shot final evaluation.
pub fn assignment_eval(
    bundle: &ModelBundle<Real>,
    corpus: &[PretrainSeries],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(MilcError::InvalidArgument("empty corpus".into()));
    }
    let test_w = window_slices(corpus, cfg, |ps| ps.slices.test.clone(), "test")?;
    let t_per = cfg.pretrain_run_windows;
    let seqs: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = sample_starts(&test_w, &seqs, t_per, &mut rng);
    let xw = pack_runs(&test_w, &seqs, &starts, t_per)?;
    let g = milc_graph(bundle, xw, t_per)?;
    assignment_accuracy(g.tape.value(g.scores), t_per)
}
