//! Downstream VAR-vs-SVAR classification under the transfer regimes: train
//! from scratch, fine-tune a pre-trained model, or freeze the pre-trained
//! stack and fit only the head. Each trial subsamples its own stratified
//! training set, early-stops on validation AUC, and reads the hold-out
//! split exactly once.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::error::{MilcError, Result};
use crate::eval::TrialReport;
use crate::io::ExperimentConfig;
use crate::model::{forward_global, head_logits, ModelBundle};
use crate::objective::softmax_xent_rows;
use crate::seeds::{derive, derive2, stream};
use crate::seqmodel::GLOBAL_DIM;
use crate::synth::{LabeledDataset, SampleClass};
use crate::windows::{extract_windows, WindowedSequence};

use super::{apply_step, backbone_fingerprint, pack_runs, variant_for_channels, EarlyStop};

/// The three transfer regimes compared on the learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Not pre-trained: random init, everything trainable.
    Npt,
    /// Unfrozen pre-trained: checkpoint init, everything trainable.
    Ufpt,
    /// Frozen pre-trained: checkpoint backbone fixed, head only.
    Fpt,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::Npt => "npt",
            Regime::Ufpt => "ufpt",
            Regime::Fpt => "fpt",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "npt" => Ok(Regime::Npt),
            "ufpt" => Ok(Regime::Ufpt),
            "fpt" => Ok(Regime::Fpt),
            other => Err(MilcError::Config(format!(
                "unknown regime '{}', expected npt, ufpt, or fpt",
                other
            ))),
        }
    }
}

/// How one trial initializes its parameters.
#[derive(Clone, Copy)]
pub enum InitArm<'a> {
    /// Fresh random parameters (NPT).
    Npt,
    /// Start from contrastive pre-training, all parameters trainable (UFPT).
    Ufpt(&'a ModelBundle<Real>),
    /// Start from contrastive pre-training with the backbone frozen (FPT).
    Fpt(&'a ModelBundle<Real>),
    /// Fresh parameters except the encoder, copied from autoencoder
    /// pre-training; all trainable. The ablation baseline.
    AeSwap(&'a ModelBundle<Real>),
}

impl<'a> InitArm<'a> {
    pub fn tag(&self) -> &'static str {
        match self {
            InitArm::Npt => "npt",
            InitArm::Ufpt(_) => "ufpt",
            InitArm::Fpt(_) => "fpt",
            InitArm::AeSwap(_) => "ae",
        }
    }

    fn head_only(&self) -> bool {
        matches!(self, InitArm::Fpt(_))
    }
}

/// One downstream epoch: mean cross-entropy over training batches and AUC
/// on the validation split.
#[derive(Clone, Copy, Debug)]
pub struct DownstreamEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// A finished trial: the best-validation parameters, its report row, the
/// epoch log, and backbone fingerprints from before and after training
/// (equal by construction in the frozen regime).
#[derive(Debug)]
pub struct DownstreamOutcome {
    pub bundle: ModelBundle<Real>,
    pub report: TrialReport,
    pub log: Vec<DownstreamEpoch>,
    pub backbone_before: u64,
    pub backbone_after: u64,
}

/// Class-stratified subsample of the training split: n/2 SVAR (rounded
/// down) and the rest VAR, drawn without replacement.
pub(crate) fn stratified_subset(
    data: &LabeledDataset,
    n_train: usize,
    trial_seed: u64,
) -> Result<Vec<usize>> {
    let train = data.train_indices();
    if n_train < 2 {
        return Err(MilcError::Train(format!(
            "n_train must be at least 2 so both classes appear, got {}",
            n_train
        )));
    }
    if n_train > train.len() {
        return Err(MilcError::Train(format!(
            "n_train {} exceeds the {}-sample training split",
            n_train,
            train.len()
        )));
    }
    let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in train {
        per_class[data.label(i).index()].push(i);
    }
    let want = [n_train - n_train / 2, n_train / 2];
    let mut subset = Vec::with_capacity(n_train);
    for (class, (pool, want)) in per_class.iter_mut().zip(want).enumerate() {
        if pool.len() < want {
            return Err(MilcError::Train(format!(
                "training split has only {} samples of class {}, need {}",
                pool.len(),
                class,
                want
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive2(trial_seed, stream::SUBSET, class as u64));
        pool.shuffle(&mut rng);
        subset.extend_from_slice(&pool[..want]);
    }
    subset.sort_unstable();
    Ok(subset)
}

/// Window each listed sample over its full extent.
fn window_set(
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &ExperimentConfig,
) -> Result<Vec<WindowedSequence>> {
    let spec = cfg.window_spec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        out.push(extract_windows(data.sample(i), &spec, i)?);
    }
    Ok(out)
}

struct ClassifierGraph {
    tape: Tape<Real>,
    var_list: Vec<Var>,
    loss: Var,
    logits: Var,
}

/// Full forward: windows → backbone → head → cross-entropy on `targets`.
fn classifier_graph(
    bundle: &ModelBundle<Real>,
    xw: Tensor<Real>,
    t_per: usize,
    targets: &[usize],
) -> Result<ClassifierGraph> {
    let mut tape = Tape::new();
    let vars = bundle.register(&mut tape);
    let x = tape.leaf(xw);
    let fwd = forward_global(&mut tape, &vars, x, t_per)?;
    let logits = head_logits(&mut tape, &vars, fwd.c)?;
    let loss = softmax_xent_rows(&mut tape, logits, targets)?;
    Ok(ClassifierGraph { tape, var_list: vars.var_list(), loss, logits })
}

/// Head-only forward on cached global embeddings (the frozen-regime path).
fn head_graph(
    bundle: &ModelBundle<Real>,
    c_batch: Tensor<Real>,
    targets: Option<&[usize]>,
) -> Result<ClassifierGraph> {
    let mut tape = Tape::new();
    let hh = bundle.head_hidden.register(&mut tape);
    let ho = bundle.head_out.register(&mut tape);
    let c = tape.leaf(c_batch);
    let pre = tape.linear(c, hh.weight, hh.bias)?;
    let act = tape.relu(pre);
    let logits = tape.linear(act, ho.weight, ho.bias)?;
    let loss = match targets {
        Some(t) => softmax_xent_rows(&mut tape, logits, t)?,
        None => logits,
    };
    Ok(ClassifierGraph {
        tape,
        var_list: vec![hh.weight, hh.bias, ho.weight, ho.bias],
        loss,
        logits,
    })
}

/// SVAR-vs-VAR score per row of a logit tensor: logit₁ − logit₀, monotone
/// in the softmax probability of class 1.
fn logit_margins(logits: &Tensor<Real>) -> Vec<f64> {
    let n = logits.shape()[0];
    (0..n).map(|r| (logits.at2(r, 1) - logits.at2(r, 0)) as f64).collect()
}

/// Global embeddings (n, 200) for the listed windowed samples, computed in
/// forward-only chunks.
fn global_embeddings(
    bundle: &ModelBundle<Real>,
    windowed: &[WindowedSequence],
    t_per: usize,
    chunk: usize,
) -> Result<Tensor<Real>> {
    let mut rows = Vec::with_capacity(windowed.len() * GLOBAL_DIM);
    let positions: Vec<usize> = (0..windowed.len()).collect();
    for span in positions.chunks(chunk) {
        let xw = pack_runs(windowed, span, &vec![0; span.len()], t_per)?;
        let mut tape = Tape::new();
        let vars = bundle.register(&mut tape);
        let x = tape.leaf(xw);
        let fwd = forward_global(&mut tape, &vars, x, t_per)?;
        rows.extend_from_slice(tape.value(fwd.c).data());
    }
    Tensor::new(vec![windowed.len(), GLOBAL_DIM], rows)
}

/// Scores for the listed windowed samples under the current parameters,
/// full forward in chunks.
fn score_set(
    bundle: &ModelBundle<Real>,
    windowed: &[WindowedSequence],
    t_per: usize,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(windowed.len());
    let positions: Vec<usize> = (0..windowed.len()).collect();
    for span in positions.chunks(chunk) {
        let xw = pack_runs(windowed, span, &vec![0; span.len()], t_per)?;
        let g = classifier_graph(bundle, xw, t_per, &vec![0; span.len()])?;
        scores.extend(logit_margins(g.tape.value(g.logits)));
    }
    Ok(scores)
}

fn rows_of(c_all: &Tensor<Real>, rows: &[usize]) -> Result<Tensor<Real>> {
    let dim = c_all.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend_from_slice(&c_all.data()[r * dim..(r + 1) * dim]);
    }
    Tensor::new(vec![rows.len(), dim], data)
}

/// Run one downstream trial. `trial_seed` drives the subsample, the head
/// (and NPT backbone) initialization, and the batch order; the provided
/// checkpoint bundles are never mutated.
pub fn train_downstream(
    data: &LabeledDataset,
    arm: InitArm,
    n_train: usize,
    cfg: &ExperimentConfig,
    trial_seed: u64,
) -> Result<DownstreamOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    if data.is_empty() {
        return Err(MilcError::Train("empty dataset".into()));
    }
    let variant = variant_for_channels(data.sample(0).channels())?;
    let spec = cfg.window_spec();
    let t_per = spec.count(data.sample(0).length())?;

    // Initialize per the regime. Pre-trained checkpoints always get a fresh
    // head: only the backbone transfers.
    let init_seed = derive(trial_seed, stream::MODEL_INIT);
    let mut bundle = match arm {
        InitArm::Npt => ModelBundle::<Real>::init(variant, cfg.win_len, init_seed)?,
        InitArm::Ufpt(ckpt) | InitArm::Fpt(ckpt) => {
            if ckpt.variant != variant || ckpt.win_len != cfg.win_len {
                return Err(MilcError::Train(format!(
                    "checkpoint is {} win_len {}, but this run needs {} win_len {}",
                    ckpt.variant.tag(),
                    ckpt.win_len,
                    variant.tag(),
                    cfg.win_len
                )));
            }
            let mut b = ckpt.clone();
            b.reset_head(init_seed);
            b
        }
        InitArm::AeSwap(ae) => {
            if ae.variant != variant || ae.win_len != cfg.win_len {
                return Err(MilcError::Train(format!(
                    "autoencoder checkpoint is {} win_len {}, but this run needs {} win_len {}",
                    ae.variant.tag(),
                    ae.win_len,
                    variant.tag(),
                    cfg.win_len
                )));
            }
            let mut b = ModelBundle::<Real>::init(variant, cfg.win_len, init_seed)?;
            b.encoder = ae.encoder.clone();
            b
        }
    };
    let backbone_before = backbone_fingerprint(&bundle);

    let subset = stratified_subset(data, n_train, trial_seed)?;
    let sub_w = window_set(data, &subset, cfg)?;
    let sub_targets: Vec<usize> = subset.iter().map(|&i| data.label(i).index()).collect();
    let val_idx = data.val_indices().to_vec();
    let val_w = window_set(data, &val_idx, cfg)?;
    let val_labels: Vec<bool> =
        val_idx.iter().map(|&i| data.label(i) == SampleClass::Svar).collect();

    // Frozen regime: the backbone never changes, so featurize train and
    // validation once and fit the head on cached embeddings.
    let cached: Option<(Tensor<Real>, Tensor<Real>)> = if arm.head_only() {
        Some((
            global_embeddings(&bundle, &sub_w, t_per, cfg.downstream_batch)?,
            global_embeddings(&bundle, &val_w, t_per, cfg.downstream_batch)?,
        ))
    } else {
        None
    };

    let mut adam = {
        if arm.head_only() {
            let params = vec![
                &bundle.head_hidden.weight,
                &bundle.head_hidden.bias,
                &bundle.head_out.weight,
                &bundle.head_out.bias,
            ];
            AdamState::new(AdamConfig::with_lr(cfg.downstream_lr), &params)
        } else {
            let params: Vec<&Tensor<Real>> = bundle.visit().into_iter().map(|(_, t)| t).collect();
            AdamState::new(AdamConfig::with_lr(cfg.downstream_lr), &params)
        }
    };

    let mut stop = EarlyStop::new(true);
    let mut best = bundle.clone();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let order = super::shuffled_indices(
            subset.len(),
            derive2(trial_seed, stream::BATCH_ORDER, epoch as u64),
        );

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.downstream_batch) {
            let targets: Vec<usize> = batch.iter().map(|&p| sub_targets[p]).collect();
            let g = match &cached {
                Some((c_train, _)) => head_graph(&bundle, rows_of(c_train, batch)?, Some(&targets))?,
                None => {
                    let xw = pack_runs(&sub_w, batch, &vec![0; batch.len()], t_per)?;
                    classifier_graph(&bundle, xw, t_per, &targets)?
                }
            };
            let value = g.tape.value(g.loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(MilcError::NonFinite(format!("training loss at epoch {}", epoch)));
            }
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            if arm.head_only() {
                apply_head_step(&mut bundle, &mut adam, g)?;
            } else {
                apply_step(&mut bundle, &mut adam, g.tape, g.loss, &g.var_list)?;
            }
        }
        let train_loss = loss_sum / seen as f64;

        let val_scores = match &cached {
            Some((_, c_val)) => {
                let g = head_graph(&bundle, c_val.clone(), None)?;
                logit_margins(g.tape.value(g.logits))
            }
            None => score_set(&bundle, &val_w, t_per, cfg.downstream_batch)?,
        };
        let val_auc = crate::eval::roc_auc(&val_scores, &val_labels)?;

        log.push(DownstreamEpoch { epoch, train_loss, val_auc });
        if stop.observe(epoch, val_auc) {
            best = bundle.clone();
        }
        if stop.should_stop(cfg.patience) {
            break;
        }
    }
    let bundle = best;

    // The single hold-out read of this trial.
    let test_idx = data.test_indices().to_vec();
    let test_w = window_set(data, &test_idx, cfg)?;
    let test_labels: Vec<bool> =
        test_idx.iter().map(|&i| data.label(i) == SampleClass::Svar).collect();
    let test_scores = score_set(&bundle, &test_w, t_per, cfg.downstream_batch)?;
    let test_auc = crate::eval::roc_auc(&test_scores, &test_labels)?;

    let backbone_after = backbone_fingerprint(&bundle);
    if arm.head_only() && backbone_after != backbone_before {
        return Err(MilcError::Train(
            "frozen backbone drifted during head training".into(),
        ));
    }

    let report = TrialReport {
        seed: trial_seed,
        regime: arm.tag().to_string(),
        n_train,
        epochs_run: log.len(),
        val_auc: stop.best,
        test_auc,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(DownstreamOutcome { bundle, report, log, backbone_before, backbone_after })
}

/// Adam update for the head-only graph (its var list is just the four head
/// tensors, in the same order the optimizer was built with).
fn apply_head_step(
    bundle: &mut ModelBundle<Real>,
    adam: &mut AdamState<Real>,
    g: ClassifierGraph,
) -> Result<()> {
    let mut grads = g.tape.backward(g.loss)?;
    let taken: Vec<Option<Tensor<Real>>> = g.var_list.iter().map(|v| grads.take(*v)).collect();
    let mut params = vec![
        &mut bundle.head_hidden.weight,
        &mut bundle.head_hidden.bias,
        &mut bundle.head_out.weight,
        &mut bundle.head_out.bias,
    ];
    let grad_refs: Vec<Option<&Tensor<Real>>> = taken.iter().map(Option::as_ref).collect();
    adam.step(&mut params, &grad_refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderVariant;
    use crate::synth::make_downstream_dataset;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 13;
        cfg.downstream_samples = 40;
        cfg.sample_len = 40;
        cfg.downstream_batch = 8;
        cfg.max_epochs = 3;
        cfg.patience = 3;
        cfg.n_train_grid = vec![4, 8];
        cfg
    }

    fn tiny_data(cfg: &ExperimentConfig) -> LabeledDataset {
        make_downstream_dataset(cfg.downstream_samples, cfg.sample_len, cfg.seed).unwrap()
    }

    #[test]
    fn stratified_subsets_balance_classes_and_respect_bounds() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let subset = stratified_subset(&data, 9, 42).unwrap();
        assert_eq!(subset.len(), 9);
        let svar = subset.iter().filter(|&&i| data.label(i) == SampleClass::Svar).count();
        assert_eq!(svar, 4, "9 samples stratify as 5 VAR + 4 SVAR");
        assert!(subset.iter().all(|i| data.train_indices().contains(i)));

        let err = stratified_subset(&data, data.train_indices().len() + 1, 42).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "got: {}", err);
        assert!(stratified_subset(&data, 1, 42).is_err());

        // Different streams per class, so the two draws are independent;
        // same seed must reproduce the same subset.
        assert_eq!(subset, stratified_subset(&data, 9, 42).unwrap());
        assert_ne!(subset, stratified_subset(&data, 9, 43).unwrap());
    }

    #[test]
    fn scratch_training_runs_and_reports_one_test_read() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let out = train_downstream(&data, InitArm::Npt, 8, &cfg, 1001).unwrap();
        assert_eq!(out.report.regime, "npt");
        assert_eq!(out.report.n_train, 8);
        assert_eq!(out.report.epochs_run, out.log.len());
        assert!(out.report.epochs_run >= 1 && out.report.epochs_run <= cfg.max_epochs);
        assert!((0.0..=1.0).contains(&out.report.val_auc));
        assert!((0.0..=1.0).contains(&out.report.test_auc));
        assert!(out.report.wall_time_s > 0.0);
        assert_eq!(data.test_read_count(), 1, "training must touch the hold-out once");
    }

    #[test]
    fn identical_trial_seeds_reproduce_bit_identical_trials() {
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 2;
        let data = tiny_data(&cfg);
        let a = train_downstream(&data, InitArm::Npt, 8, &cfg, 7).unwrap();
        let b = train_downstream(&data, InitArm::Npt, 8, &cfg, 7).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.report.test_auc, b.report.test_auc);
        assert_eq!(a.report.val_auc, b.report.val_auc);
    }

    #[test]
    fn frozen_regime_trains_the_head_without_touching_the_backbone() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let ckpt =
            ModelBundle::<Real>::init(EncoderVariant::Simulation, cfg.win_len, 555).unwrap();
        let out = train_downstream(&data, InitArm::Fpt(&ckpt), 8, &cfg, 1002).unwrap();
        assert_eq!(out.report.regime, "fpt");
        assert_eq!(out.backbone_before, out.backbone_after);
        assert_eq!(out.backbone_after, backbone_fingerprint(&ckpt));
        assert_eq!(out.bundle.encoder, ckpt.encoder);
        assert_eq!(out.bundle.lstm_fwd, ckpt.lstm_fwd);
        assert_eq!(out.bundle.attention, ckpt.attention);
        // The head must actually have moved off its fresh initialization.
        let mut fresh = ckpt.clone();
        fresh.reset_head(derive(1002, stream::MODEL_INIT));
        assert_ne!(out.bundle.head_hidden, fresh.head_hidden);
    }

    #[test]
    fn unfrozen_regime_moves_the_backbone() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let ckpt =
            ModelBundle::<Real>::init(EncoderVariant::Simulation, cfg.win_len, 556).unwrap();
        let out = train_downstream(&data, InitArm::Ufpt(&ckpt), 8, &cfg, 1003).unwrap();
        assert_eq!(out.report.regime, "ufpt");
        assert_ne!(out.backbone_before, out.backbone_after);
        // The source checkpoint itself must be untouched.
        let again = backbone_fingerprint(&ckpt);
        assert_eq!(out.backbone_before, again);
    }

    #[test]
    fn encoder_swap_arm_starts_from_the_donor_encoder() {
        let cfg = tiny_cfg();
        let mut cfg2 = cfg.clone();
        cfg2.max_epochs = 1;
        let data = tiny_data(&cfg);
        let donor =
            ModelBundle::<Real>::init(EncoderVariant::Simulation, cfg.win_len, 557).unwrap();
        let out = train_downstream(&data, InitArm::AeSwap(&donor), 8, &cfg2, 1004).unwrap();
        assert_eq!(out.report.regime, "ae");
        // Backbone trains, so it ends away from both the donor and a fresh init.
        assert_ne!(out.bundle.encoder, donor.encoder);
    }

    #[test]
    fn mismatched_checkpoints_are_refused() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg);
        let wrong =
            ModelBundle::<Real>::init(EncoderVariant::Simulation, 30, 558).unwrap();
        let err = train_downstream(&data, InitArm::Ufpt(&wrong), 8, &cfg, 1).unwrap_err();
        assert!(err.to_string().contains("win_len"), "got: {}", err);
    }
}
