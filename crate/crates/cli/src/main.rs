//! `milc` — batch driver for the window/sequence contrastive pre-training
//! experiments: generate synthetic data, pre-train, transfer downstream,
//! summarize learning curves, render saliency maps, and audit gradients.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use milc_core::encoder::EncoderVariant;
use milc_core::error::{MilcError, Result};
use milc_core::eval::{append_reports, build_learning_curve, curve_to_csv, read_reports, TrialReport};
use milc_core::io::{
    atomic_write, load_checkpoint, load_config, load_downstream_dataset, load_pretrain_corpus,
    save_checkpoint, write_downstream_dataset, write_pretrain_corpus, CheckpointKind,
    CheckpointMeta, ExperimentConfig, GenParams,
};
use milc_core::saliency::compute_saliency;
use milc_core::selftest::{describe, gradient_suite};
use milc_core::synth::{make_downstream_dataset, make_pretrain_corpus, LabeledDataset, SampleClass};
use milc_core::train::{
    pretrain, pretrain_autoencoder, run_trials, variant_for_channels, InitArm,
};

#[derive(Parser)]
#[command(name = "milc", version, about = "Contrastive pre-training experiments on synthetic multivariate time series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration shared by every command that trains or generates data.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; omit for built-in defaults.
    #[arg(long, conflicts_with = "quick")]
    config: Option<PathBuf>,
    /// Use the small CI-speed profile (10×10×2000 corpus, 200 samples).
    #[arg(long)]
    quick: bool,
    /// Master seed; overrides the config file and the MILC_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Resolve precedence (flag > MILC_SEED > file/profile), validate, and
    /// log the result before any work starts.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None if self.quick => ExperimentConfig::quick(),
            None => ExperimentConfig::default(),
        };
        if let Ok(value) = std::env::var("MILC_SEED") {
            cfg.seed = value.parse().map_err(|_| {
                MilcError::InvalidArgument(format!("MILC_SEED must be an unsigned integer, got '{}'", value))
            })?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        eprintln!("config: {}", serde_json::to_string(&cfg)?);
        eprintln!("seed: {}", cfg.seed);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the pre-training corpus and the labeled downstream dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; pretrain/ and downstream/ land inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on a generated corpus and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory from `milc synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Objective: contrastive (milc) or reconstruction (ae).
        #[arg(long, default_value = "milc", value_parser = ["milc", "ae"])]
        objective: String,
        /// Optional per-epoch CSV log (epoch, train_loss, val_metric).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train downstream classifiers under one regime and append reports.
    Downstream {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory from `milc synth`.
        #[arg(long)]
        data: PathBuf,
        /// npt, ufpt, fpt, or ae.
        #[arg(long)]
        regime: String,
        /// Pre-trained checkpoint (required for ufpt/fpt/ae; invalid for npt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Labeled training samples per trial.
        #[arg(long)]
        train_n: usize,
        /// Independent trials; defaults to the config's value.
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads for the trials.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// JSONL report sink, appended one line per trial.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch CSV log (trial, epoch, train_loss, val_metric).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also save trial 0's trained model here.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Merge trial reports into a learning-curve table.
    Eval {
        /// JSONL report files from `milc downstream`.
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// CSV output (regime, n_train, trials, median/min/max AUC).
        #[arg(long)]
        out: PathBuf,
    },
    /// Saliency map of one dataset sample under a trained model.
    Saliency {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory from `milc synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint with the model to inspect.
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample index within the dataset.
        #[arg(long)]
        sample: usize,
        /// CSV output (channel, t, saliency); a .json sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audit of every differentiable op and composed loss.
    Gradcheck {
        /// Seed for the probe tensors.
        #[arg(long, default_value_t = 4242)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some variants already lead with their category ("data: ...");
            // strip it so the line reads `error: data: ...` exactly once.
            let cat = e.category();
            let msg = e.to_string();
            let msg = msg.strip_prefix(&format!("{}: ", cat)).map(str::to_owned).unwrap_or(msg);
            eprintln!("error: {}: {}", cat, msg);
            if cat == "usage" {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { cfg, out } => cmd_synth(&cfg.resolve()?, &out),
        Cmd::Pretrain { cfg, data, out, objective, log } => {
            cmd_pretrain(&cfg.resolve()?, &data, &out, &objective, log.as_deref())
        }
        Cmd::Downstream { cfg, data, regime, ckpt, train_n, trials, parallel, out, log, save_model } => {
            cmd_downstream(
                &cfg.resolve()?,
                &data,
                &regime,
                ckpt.as_deref(),
                train_n,
                trials,
                parallel,
                &out,
                log.as_deref(),
                save_model.as_deref(),
            )
        }
        Cmd::Eval { reports, out } => cmd_eval(&reports, &out),
        Cmd::Saliency { cfg, data, ckpt, sample, out } => {
            cmd_saliency(&cfg.resolve()?, &data, &ckpt, sample, &out)
        }
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let pretrain_dir = out.join("pretrain");
    let downstream_dir = out.join("downstream");
    std::fs::create_dir_all(&pretrain_dir)?;
    std::fs::create_dir_all(&downstream_dir)?;

    let corpus =
        make_pretrain_corpus(cfg.pretrain_series, cfg.pretrain_nodes, cfg.pretrain_len, cfg.seed)?;
    write_pretrain_corpus(
        &pretrain_dir,
        &corpus,
        GenParams {
            seed: cfg.seed,
            count: cfg.pretrain_series,
            nodes: cfg.pretrain_nodes,
            length: cfg.pretrain_len,
        },
    )?;
    println!(
        "wrote {} pre-training series ({} nodes × {} steps) to {}",
        corpus.len(),
        cfg.pretrain_nodes,
        cfg.pretrain_len,
        pretrain_dir.display()
    );

    let data = make_downstream_dataset(cfg.downstream_samples, cfg.sample_len, cfg.seed)?;
    let nodes = data.sample(0).channels();
    write_downstream_dataset(
        &downstream_dir,
        &data,
        GenParams { seed: cfg.seed, count: data.len(), nodes, length: cfg.sample_len },
    )?;
    println!(
        "wrote {} labeled samples ({} nodes × {} steps) to {}",
        data.len(),
        nodes,
        cfg.sample_len,
        downstream_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    objective: &str,
    log: Option<&Path>,
) -> Result<()> {
    let corpus = load_pretrain_corpus(&data.join("pretrain"))?;
    let (bundle, kind, epochs, best_epoch, best_val, rows) = match objective {
        "ae" => {
            let o = pretrain_autoencoder(&corpus, cfg)?;
            let rows: Vec<(usize, f64, f64)> =
                o.log.iter().map(|e| (e.epoch, e.train_loss, e.val_loss)).collect();
            (o.bundle, CheckpointKind::Autoencoder, o.log.len(), o.best_epoch, o.best_val_mse, rows)
        }
        _ => {
            let o = pretrain(&corpus, cfg)?;
            let rows: Vec<(usize, f64, f64)> =
                o.log.iter().map(|e| (e.epoch, e.train_loss, e.val_loss)).collect();
            (o.bundle, CheckpointKind::MilcPretrain, o.log.len(), o.best_epoch, o.best_val_loss, rows)
        }
    };

    if let Some(log_path) = log {
        let mut csv = String::from("epoch,train_loss,val_metric\n");
        for (epoch, train, val) in &rows {
            csv.push_str(&format!("{},{:.6},{:.6}\n", epoch, train, val));
        }
        write_text(log_path, &csv)?;
    }

    let mut meta = CheckpointMeta::for_bundle(&bundle, kind, cfg.seed);
    meta.epochs_trained = epochs;
    meta.best_val_metric = best_val;
    save_checkpoint(out, &bundle, &meta)?;
    println!(
        "{} pre-training: {} epochs, best val {:.4} at epoch {}; checkpoint {}",
        kind,
        epochs,
        best_val,
        best_epoch,
        out.display()
    );
    Ok(())
}

/// Enforce the regime/--ckpt pairing before any file is read, so flag
/// mistakes surface as usage errors (exit 2) rather than dataset errors.
fn validate_regime_flags(regime: &str, ckpt: Option<&Path>) -> Result<()> {
    match (regime, ckpt) {
        ("npt", None) | ("ufpt" | "fpt" | "ae", Some(_)) => Ok(()),
        ("npt", Some(_)) => Err(MilcError::InvalidArgument(
            "regime npt trains from scratch and takes no --ckpt".into(),
        )),
        ("ufpt" | "fpt" | "ae", None) => Err(MilcError::InvalidArgument(format!(
            "regime {} needs --ckpt with a pre-trained checkpoint",
            regime
        ))),
        (other, _) => Err(MilcError::InvalidArgument(format!(
            "unknown regime '{}', expected npt, ufpt, fpt, or ae",
            other
        ))),
    }
}

fn load_arm_checkpoint(
    regime: &str,
    ckpt: Option<&Path>,
    data: &LabeledDataset,
    cfg: &ExperimentConfig,
) -> Result<Option<(milc_core::model::ModelBundle<milc_core::diffcore::Real>, CheckpointMeta)>> {
    let Some(path) = ckpt else { return Ok(None) };
    let variant = variant_for_channels(data.sample(0).channels())?;
    let (bundle, meta) = load_checkpoint(path, variant)?;
    let want = if regime == "ae" { CheckpointKind::Autoencoder } else { CheckpointKind::MilcPretrain };
    if meta.kind != want {
        return Err(MilcError::Train(format!(
            "regime {} expects a {} checkpoint, found {}",
            regime, want, meta.kind
        )));
    }
    check_ckpt_shape(&meta, cfg)?;
    Ok(Some((bundle, meta)))
}

fn check_ckpt_shape(meta: &CheckpointMeta, cfg: &ExperimentConfig) -> Result<()> {
    if meta.win_len != cfg.win_len {
        return Err(MilcError::Train(format!(
            "checkpoint win_len {} does not match the configured {}",
            meta.win_len, cfg.win_len
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_downstream(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    regime: &str,
    ckpt: Option<&Path>,
    train_n: usize,
    trials: Option<usize>,
    parallel: usize,
    out: &Path,
    log: Option<&Path>,
    save_model: Option<&Path>,
) -> Result<()> {
    validate_regime_flags(regime, ckpt)?;
    let data = load_downstream_dataset(&data_dir.join("downstream"))?;
    let loaded = load_arm_checkpoint(regime, ckpt, &data, cfg)?;
    let arm = match (regime, &loaded) {
        ("npt", _) => InitArm::Npt,
        ("ufpt", Some((b, _))) => InitArm::Ufpt(b),
        ("fpt", Some((b, _))) => InitArm::Fpt(b),
        ("ae", Some((b, _))) => InitArm::AeSwap(b),
        _ => unreachable!("load_arm_checkpoint enforces the regime/ckpt pairing"),
    };
    let trials = trials.unwrap_or(cfg.trials);

    let batch = run_trials(&data, arm, train_n, cfg, trials, parallel, save_model.is_some())?;

    if let Some(log_path) = log {
        let mut csv = String::from("trial,epoch,train_loss,val_metric\n");
        for (trial, epochs) in batch.epoch_logs.iter().enumerate() {
            for e in epochs {
                csv.push_str(&format!("{},{},{:.6},{:.6}\n", trial, e.epoch, e.train_loss, e.val_auc));
            }
        }
        write_text(log_path, &csv)?;
    }

    if let Some(model_path) = save_model {
        let bundle = batch.first_model.as_ref().expect("requested model was kept");
        let mut meta = CheckpointMeta::for_bundle(bundle, CheckpointKind::Downstream, cfg.seed);
        meta.epochs_trained = batch.reports[0].epochs_run;
        meta.best_val_metric = batch.reports[0].val_auc;
        save_checkpoint(model_path, bundle, &meta)?;
        println!("saved trial 0's model to {}", model_path.display());
    }

    append_reports(out, &batch.reports)?;
    for r in &batch.reports {
        println!(
            "trial seed {:>20}  {}  n_train {:>5}  epochs {:>3}  val AUC {:.4}  test AUC {:.4}",
            r.seed, r.regime, r.n_train, r.epochs_run, r.val_auc, r.test_auc
        );
    }
    Ok(())
}

fn cmd_eval(report_paths: &[PathBuf], out: &Path) -> Result<()> {
    let mut reports: Vec<TrialReport> = Vec::new();
    for path in report_paths {
        reports.extend(read_reports(path)?);
    }
    if reports.is_empty() {
        return Err(MilcError::Data("no trial reports found".into()));
    }
    let curve = build_learning_curve(&reports);
    for w in &curve.warnings {
        eprintln!("warning: {}", w);
    }
    write_text(out, &curve_to_csv(&curve))?;
    println!("summarized {} reports into {} cells: {}", reports.len(), curve.cells.len(), out.display());
    Ok(())
}

fn cmd_saliency(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    ckpt: &Path,
    sample: usize,
    out: &Path,
) -> Result<()> {
    let data = load_downstream_dataset(&data_dir.join("downstream"))?;
    if sample >= data.len() {
        return Err(MilcError::InvalidArgument(format!(
            "sample {} out of range (dataset has {})",
            sample,
            data.len()
        )));
    }
    let variant: EncoderVariant = variant_for_channels(data.sample(sample).channels())?;
    let (bundle, meta) = load_checkpoint(ckpt, variant)?;
    check_ckpt_shape(&meta, cfg)?;

    let ts = data.sample(sample);
    let map = compute_saliency(&bundle, ts.data(), &cfg.window_spec(), sample)?;

    let shape = map.map.shape().to_vec();
    let mut csv = String::from("channel,t,saliency\n");
    for c in 0..shape[0] {
        for t in 0..shape[1] {
            csv.push_str(&format!("{},{},{:.6}\n", c, t, map.map.at2(c, t)));
        }
    }
    write_text(out, &csv)?;

    let label = match data.label(sample) {
        SampleClass::Var => "var",
        SampleClass::Svar => "svar",
    };
    let predicted = match map.predicted {
        SampleClass::Var => "var",
        SampleClass::Svar => "svar",
    };
    let sidecar = serde_json::json!({
        "sample_id": sample,
        "label": label,
        "predicted": predicted,
        "logit": map.logit,
        "channels": shape[0],
        "length": shape[1],
        "checkpoint_kind": meta.kind.to_string(),
        "peak_normalized": true,
    });
    let sidecar_path = out.with_extension("json");
    write_text(&sidecar_path, &format!("{:#}\n", sidecar))?;
    println!(
        "sample {} (label {}): predicted {} with logit {:.4}; map {} sidecar {}",
        sample,
        label,
        predicted,
        map.logit,
        out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    eprintln!("seed: {}", seed);
    let reports = gradient_suite(seed)?;
    let mut all_ok = true;
    for r in &reports {
        println!("{}", describe(r));
        all_ok &= r.passed();
    }
    if !all_ok {
        return Err(MilcError::NonFinite("gradient check failures above".into()));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
