//! Metrics and experiment aggregation: ROC AUC, per-trial reports, and
//! learning curves over training-set size.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MilcError, Result};

/// Probability that a random positive outscores a random negative, ties
/// counted half (the Mann–Whitney U formulation, computed via average ranks).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MilcError::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MilcError::NonFinite("classifier scores".into()));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MilcError::InvalidArgument(
            "ROC AUC needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finiteness checked"));

    // Average rank within each tied run (1-based ranks).
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }

    let rank_sum_pos: f64 = (0..n).filter(|&k| labels[k]).map(|k| rank[k]).sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Outcome of one downstream training trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialReport {
    pub seed: u64,
    /// npt | ufpt | fpt | ae
    pub regime: String,
    pub n_train: usize,
    pub epochs_run: usize,
    pub val_auc: f64,
    pub test_auc: f64,
    pub wall_time_s: f64,
}

/// Median/min/max of test AUC for one (regime, n_train) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub regime: String,
    pub n_train: usize,
    pub trials: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Learning-curve table, cells ordered by (regime, n_train).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub cells: Vec<CurveCell>,
    /// Reports excluded from aggregation, with reasons.
    pub warnings: Vec<String>,
}

/// Median by partial selection; even counts average the two middle order
/// statistics.
fn median_inplace(v: &mut [f64]) -> f64 {
    let n = v.len();
    let (lo_part, upper, _) =
        v.select_nth_unstable_by(n / 2, |a, b| a.partial_cmp(b).expect("finite AUCs"));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = lo_part.iter().cloned().fold(f64::MIN, f64::max);
        (lower + upper) / 2.0
    }
}

/// Aggregate trial reports into a learning curve. Reports with non-finite
/// or out-of-range AUC are skipped with a warning rather than poisoning a
/// cell.
pub fn build_learning_curve(reports: &[TrialReport]) -> LearningCurve {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in reports {
        if !r.test_auc.is_finite() || !(0.0..=1.0).contains(&r.test_auc) {
            warnings.push(format!(
                "skipping trial seed {} ({}, n_train {}): test AUC {} out of range",
                r.seed, r.regime, r.n_train, r.test_auc
            ));
            continue;
        }
        groups.entry((r.regime.clone(), r.n_train)).or_default().push(r.test_auc);
    }
    let cells = groups
        .into_iter()
        .map(|((regime, n_train), mut aucs)| {
            let min = aucs.iter().cloned().fold(f64::MAX, f64::min);
            let max = aucs.iter().cloned().fold(f64::MIN, f64::max);
            let trials = aucs.len();
            CurveCell { regime, n_train, trials, median: median_inplace(&mut aucs), min, max }
        })
        .collect();
    LearningCurve { cells, warnings }
}

/// CSV table: one row per (regime, n_train) cell.
pub fn curve_to_csv(curve: &LearningCurve) -> String {
    let mut out = String::from("regime,n_train,trials,median_auc,min_auc,max_auc\n");
    for c in &curve.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.regime, c.n_train, c.trials, c.median, c.min, c.max
        ));
    }
    out
}

/// Plot-ready JSON: per regime, x = n_train, y = median, band = min/max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub regime: String,
    pub n_train: Vec<usize>,
    pub median: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn curve_to_plot_series(curve: &LearningCurve) -> Vec<PlotSeries> {
    let mut by_regime: BTreeMap<&str, PlotSeries> = BTreeMap::new();
    for c in &curve.cells {
        let s = by_regime.entry(&c.regime).or_insert_with(|| PlotSeries {
            regime: c.regime.clone(),
            n_train: Vec::new(),
            median: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        });
        s.n_train.push(c.n_train);
        s.median.push(c.median);
        s.lo.push(c.min);
        s.hi.push(c.max);
    }
    by_regime.into_values().collect()
}

/// Append reports to a JSON-lines file (one JSON object per line); safe to
/// call repeatedly on the same path.
pub fn append_reports(path: &Path, reports: &[TrialReport]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<TrialReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(MilcError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal definition: average over all (positive, negative) pairs of
    /// 1 if the positive wins, ½ on a tie.
    fn pairwise_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    total += 1.0;
                } else if scores[i] == scores[j] {
                    total += 0.5;
                }
            }
        }
        total / pairs as f64
    }

    #[test]
    fn four_point_example_scores_three_quarters() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15, "{}", auc);
    }

    #[test]
    fn separation_and_ties_hit_the_endpoints() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.9, 0.1, 0.2], &labels).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn matches_the_exhaustive_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let n = rng.gen_range(2..25);
            // Coarse grid scores force plenty of exact ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[n - 1] = false;
            let got = roc_auc(&scores, &labels).unwrap();
            let want = pairwise_auc_oracle(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn negating_scores_mirrors_the_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let b = roc_auc(&neg, &labels).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12, "{} + {} != 1", a, b);
        }
    }

    #[test]
    fn strictly_increasing_transforms_leave_auc_unchanged() {
        let scores = [0.1, -2.0, 0.35, 0.35, 3.0, 0.2];
        let labels = [false, false, true, false, true, true];
        let base = roc_auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s * 100.0 + 7.0).collect();
        assert_eq!(roc_auc(&cubed, &labels).unwrap(), base);
        assert_eq!(roc_auc(&shifted, &labels).unwrap(), base);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(roc_auc(&[0.3, 0.4], &[true, true]).is_err());
        assert!(roc_auc(&[0.3, 0.4], &[false, false]).is_err());
        assert!(roc_auc(&[0.3, f64::NAN], &[true, false]).is_err());
        assert!(roc_auc(&[0.3], &[true, false]).is_err());
    }

    fn report(regime: &str, n_train: usize, seed: u64, test_auc: f64) -> TrialReport {
        TrialReport {
            seed,
            regime: regime.into(),
            n_train,
            epochs_run: 5,
            val_auc: test_auc,
            test_auc,
            wall_time_s: 0.1,
        }
    }

    #[test]
    fn curve_cells_match_a_sort_based_median_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut reports = Vec::new();
        for (i, n_train) in [(0u64, 16usize), (1, 32)] {
            for t in 0..9 + i as usize {
                reports.push(report("ufpt", n_train, t as u64, rng.gen_range(0.4..1.0)));
            }
        }
        let curve = build_learning_curve(&reports);
        assert_eq!(curve.cells.len(), 2);
        for cell in &curve.cells {
            let mut aucs: Vec<f64> = reports
                .iter()
                .filter(|r| r.n_train == cell.n_train)
                .map(|r| r.test_auc)
                .collect();
            aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = aucs.len();
            let want = if n % 2 == 1 { aucs[n / 2] } else { (aucs[n / 2 - 1] + aucs[n / 2]) / 2.0 };
            assert_eq!(cell.median, want);
            assert_eq!(cell.min, aucs[0]);
            assert_eq!(cell.max, aucs[n - 1]);
            assert!(cell.min <= cell.median && cell.median <= cell.max);
        }
    }

    #[test]
    fn single_trial_and_constant_cells_collapse() {
        let one = build_learning_curve(&[report("npt", 16, 0, 0.7)]);
        assert_eq!((one.cells[0].median, one.cells[0].min, one.cells[0].max), (0.7, 0.7, 0.7));

        let constant: Vec<TrialReport> = (0..10).map(|t| report("fpt", 64, t, 0.9)).collect();
        let curve = build_learning_curve(&constant);
        assert_eq!((curve.cells[0].median, curve.cells[0].min, curve.cells[0].max), (0.9, 0.9, 0.9));
    }

    #[test]
    fn out_of_range_reports_are_skipped_with_a_warning() {
        let reports = vec![report("npt", 16, 0, 0.7), report("npt", 16, 1, f64::NAN)];
        let curve = build_learning_curve(&reports);
        assert_eq!(curve.cells[0].trials, 1);
        assert_eq!(curve.warnings.len(), 1);
        assert!(curve.warnings[0].contains("seed 1"), "{}", curve.warnings[0]);
    }

    #[test]
    fn csv_and_plot_series_cover_every_cell_in_order() {
        let reports = vec![
            report("npt", 32, 0, 0.6),
            report("npt", 16, 1, 0.5),
            report("ufpt", 16, 2, 0.8),
        ];
        let curve = build_learning_curve(&reports);
        let csv = curve_to_csv(&curve);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "regime,n_train,trials,median_auc,min_auc,max_auc");
        assert!(lines[1].starts_with("npt,16,"));
        assert!(lines[2].starts_with("npt,32,"));
        assert!(lines[3].starts_with("ufpt,16,"));

        let series = curve_to_plot_series(&curve);
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].regime, "npt");
        assert_eq!(series[0].n_train, vec![16, 32]);
        assert_eq!(series[1].regime, "ufpt");
    }

    #[test]
    fn jsonl_reports_append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        let first = vec![report("npt", 16, 0, 0.61), report("ufpt", 16, 1, 0.72)];
        append_reports(&path, &first).unwrap();
        append_reports(&path, &[report("fpt", 16, 2, 0.83)]).unwrap();
        let back = read_reports(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], first[0]);
        assert_eq!(back[2].regime, "fpt");
    }
}
