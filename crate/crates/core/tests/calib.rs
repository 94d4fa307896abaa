//! Throwaway timing calibration (not part of the suite).

use std::time::Instant;

use milc_core::io::ExperimentConfig;
use milc_core::synth::{make_downstream_dataset, make_pretrain_corpus};
use milc_core::train::{pretrain, pretrain_autoencoder, run_trials, InitArm};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

#[test]
#[ignore]
fn calibrate_transfer() {
    let mut cfg = ExperimentConfig::quick();
    cfg.downstream_samples = 2000;
    cfg.n_train_grid = vec![16, 32, 64, 1600];
    cfg.max_epochs = 30;
    cfg.patience = 6;

    let t = Instant::now();
    let corpus = make_pretrain_corpus(cfg.pretrain_series, cfg.pretrain_nodes, cfg.pretrain_len, cfg.seed).unwrap();
    let milc = pretrain(&corpus, &cfg).unwrap();
    println!("milc pretrain: {} epochs, best val {:.4}, {:.2?}", milc.log.len(), milc.best_val_loss, t.elapsed());

    let t = Instant::now();
    let ae = pretrain_autoencoder(&corpus, &cfg).unwrap();
    println!("ae pretrain: {} epochs, best val {:.4}, {:.2?}", ae.log.len(), ae.best_val_mse, t.elapsed());

    let data = make_downstream_dataset(cfg.downstream_samples, cfg.sample_len, cfg.seed).unwrap();

    for &n in &[16usize, 32, 64, 1600] {
        let mut ncfg = cfg.clone();
        if n >= 1600 {
            ncfg.max_epochs = 15;
        }
        for (tag, arm) in [
            ("npt", InitArm::Npt),
            ("ufpt", InitArm::Ufpt(&milc.bundle)),
            ("fpt", InitArm::Fpt(&milc.bundle)),
            ("ae", InitArm::AeSwap(&ae.bundle)),
        ] {
            let t = Instant::now();
            let batch = run_trials(&data, arm, n, &ncfg, 3, 1, false).unwrap();
            let aucs: Vec<f64> = batch.reports.iter().map(|r| r.test_auc).collect();
            let epochs: Vec<usize> = batch.reports.iter().map(|r| r.epochs_run).collect();
            println!(
                "n={:<5} {:<4} median {:.3} (aucs {:?}, epochs {:?}) {:.2?}",
                n, tag, median(aucs.clone()), aucs, epochs, t.elapsed()
            );
        }
    }
}
