//! Multi-trial driver: one derived seed per trial, optional worker threads,
//! and reports merged back in trial order so results never depend on
//! scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::diffcore::Real;
use crate::error::{MilcError, Result};
use crate::eval::TrialReport;
use crate::io::ExperimentConfig;
use crate::model::ModelBundle;
use crate::seeds::{derive2, stream};
use crate::synth::LabeledDataset;

use super::downstream::{train_downstream, DownstreamEpoch, InitArm};

/// The per-trial seeds a master seed expands into. Trial `i` always gets the
/// same seed no matter how many trials run or on how many threads.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    (0..trials).map(|i| derive2(master, stream::TRIAL, i as u64)).collect()
}

/// Everything a batch of trials produces, ordered by trial index.
#[derive(Debug)]
pub struct TrialBatch {
    pub reports: Vec<TrialReport>,
    /// Per-trial epoch logs, parallel to `reports`.
    pub epoch_logs: Vec<Vec<DownstreamEpoch>>,
    /// Trial 0's trained parameters, when requested.
    pub first_model: Option<ModelBundle<Real>>,
}

/// Run independent downstream trials at one (arm, n_train) grid cell.
/// `parallel` > 1 spreads trials over that many worker threads pulling from
/// a shared queue; results come back ordered by trial index either way, and
/// trial `i` is bit-identical across thread counts because all randomness
/// flows from its own seed. Set `keep_first_model` to also get trial 0's
/// trained parameters (for saving or inspection).
pub fn run_trials(
    data: &LabeledDataset,
    arm: InitArm,
    n_train: usize,
    cfg: &ExperimentConfig,
    trials: usize,
    parallel: usize,
    keep_first_model: bool,
) -> Result<TrialBatch> {
    if trials == 0 {
        return Err(MilcError::InvalidArgument("need at least one trial".into()));
    }
    let seeds = trial_seeds(cfg.seed, trials);
    let mut slots: Vec<Option<(TrialReport, Vec<DownstreamEpoch>)>> =
        (0..trials).map(|_| None).collect();
    let mut first_model = None;

    if parallel <= 1 {
        for (i, &seed) in seeds.iter().enumerate() {
            let outcome = train_downstream(data, arm, n_train, cfg, seed)?;
            if i == 0 && keep_first_model {
                first_model = Some(outcome.bundle);
            }
            slots[i] = Some((outcome.report, outcome.log));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared: Mutex<(
            &mut Vec<Option<(TrialReport, Vec<DownstreamEpoch>)>>,
            &mut Option<ModelBundle<Real>>,
            Option<MilcError>,
        )> = Mutex::new((&mut slots, &mut first_model, None));
        std::thread::scope(|scope| {
            for _ in 0..parallel.min(trials) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= trials {
                        break;
                    }
                    match train_downstream(data, arm, n_train, cfg, seeds[i]) {
                        Ok(outcome) => {
                            let mut guard = shared.lock().unwrap();
                            if i == 0 && keep_first_model {
                                *guard.1 = Some(outcome.bundle);
                            }
                            guard.0[i] = Some((outcome.report, outcome.log));
                        }
                        Err(e) => {
                            let mut guard = shared.lock().unwrap();
                            if guard.2.is_none() {
                                guard.2 = Some(e);
                            }
                            // Let remaining queued trials drain; the error
                            // surfaces after the scope joins.
                        }
                    }
                });
            }
        });
        if let Some(e) = shared.into_inner().expect("no worker panicked holding the lock").2 {
            return Err(e);
        }
    }

    let mut reports = Vec::with_capacity(trials);
    let mut epoch_logs = Vec::with_capacity(trials);
    for slot in slots {
        let (r, l) = slot.ok_or_else(|| MilcError::Train("a trial produced no report".into()))?;
        reports.push(r);
        epoch_logs.push(l);
    }
    Ok(TrialBatch { reports, epoch_logs, first_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_downstream_dataset;

    #[test]
    fn per_trial_seeds_are_distinct_and_stable() {
        let seeds = trial_seeds(7, 10);
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 10, "derived trial seeds must not collide");
        assert_eq!(seeds[..4], trial_seeds(7, 4)[..], "prefix stability across trial counts");
        assert_ne!(trial_seeds(7, 4), trial_seeds(8, 4));
    }

    #[test]
    fn parallel_workers_match_the_sequential_run() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 31;
        cfg.downstream_samples = 40;
        cfg.sample_len = 40;
        cfg.downstream_batch = 8;
        cfg.max_epochs = 2;
        cfg.patience = 2;
        cfg.n_train_grid = vec![4, 8];
        let data = make_downstream_dataset(cfg.downstream_samples, cfg.sample_len, cfg.seed).unwrap();

        let seq = run_trials(&data, InitArm::Npt, 4, &cfg, 3, 1, true).unwrap();
        let par = run_trials(&data, InitArm::Npt, 4, &cfg, 3, 2, true).unwrap();
        assert_eq!(seq.reports.len(), 3);
        assert_eq!(seq.epoch_logs.len(), 3);
        assert!(seq.epoch_logs.iter().all(|l| !l.is_empty()));
        let strip = |mut r: TrialReport| {
            r.wall_time_s = 0.0;
            r
        };
        for (a, b) in seq.reports.iter().zip(&par.reports) {
            assert_eq!(strip(a.clone()), strip(b.clone()), "scheduling must not leak into results");
        }
        assert_eq!(
            seq.first_model.unwrap(),
            par.first_model.unwrap(),
            "trial 0's model must not depend on scheduling"
        );
        assert_eq!(data.test_read_count(), 6, "one hold-out read per trial, both runs");
    }

    #[test]
    fn zero_trials_is_an_argument_error() {
        let cfg = ExperimentConfig::default();
        let data = make_downstream_dataset(20, 40, 1).unwrap();
        assert!(run_trials(&data, InitArm::Npt, 4, &cfg, 0, 1, false).is_err());
    }
}
