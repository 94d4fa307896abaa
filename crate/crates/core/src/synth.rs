//! Synthetic corpus generation: stable vector-autoregressive (VAR)
//! processes, structural VAR (SVAR) counterparts obtained by randomly
//! dropping time points, the multi-sequence pre-training corpus, and the
//! labeled VAR-vs-SVAR downstream dataset.
//!
//! Everything here is a pure function of (parameters, seed); equal inputs
//! give bit-identical outputs.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Real, Tensor};
use crate::error::{MilcError, Result};
use crate::seeds;

/// Spectral radius every generated transition matrix is scaled to: stable,
/// but close enough to 1 that trajectories keep rich temporal structure.
pub const TARGET_RADIUS: f64 = 0.9;

/// Fraction of nonzero couplings in a generated transition matrix.
pub const GRAPH_DENSITY: f64 = 0.3;

/// Standard deviation of the isotropic Gaussian innovation noise.
pub const NOISE_STD: f64 = 1.0;

/// Distinct transition matrices shared across a labeled dataset (capped at
/// one per VAR/SVAR pair for tiny sets).
pub const DOWNSTREAM_MATRIX_POOL: usize = 10;

/// Fraction of time points removed when deriving an SVAR series from a VAR
/// series.
pub const SVAR_DROP_FRAC: f64 = 0.2;

/// Contiguous train/val/test slice proportions for pre-training series.
pub const SLICE_RATIO: (usize, usize, usize) = (70, 15, 15);

/// ceil(x) for products of decimal fractions with integers, guarded against
/// binary representation error: 0.8·250 evaluates to 200.0000000000000111 in
/// f64 and a bare ceil would return 201 where the exact value is 200.
fn ceil_decimal(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// A square coupling matrix with its spectral radius computed at
/// construction, so stability is checked once and carried with the value.
#[derive(Clone, Debug)]
pub struct TransitionMatrix {
    a: Tensor<f64>,
    radius: f64,
}

impl TransitionMatrix {
    pub fn new(a: Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(MilcError::Data(format!(
                "transition matrix must be square, got {:?}",
                a.shape()
            )));
        }
        if !a.all_finite() {
            return Err(MilcError::NonFinite("transition matrix".into()));
        }
        let radius = spectral_radius(&a);
        Ok(TransitionMatrix { a, radius })
    }

    pub fn n_nodes(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn is_stable(&self) -> bool {
        self.radius < 1.0
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.a
    }
}

/// Largest eigenvalue magnitude, from the full complex eigenvalue set.
pub fn spectral_radius(a: &Tensor<f64>) -> f64 {
    let n = a.shape()[0];
    let m = DMatrix::from_row_slice(n, n, a.data());
    m.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Sample a sparse random coupling matrix and rescale it to the requested
/// spectral radius. Deterministic per rng state.
pub fn gen_stable_transition(
    n_nodes: usize,
    density: f64,
    target_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TransitionMatrix> {
    if n_nodes == 0 {
        return Err(MilcError::InvalidArgument("n_nodes must be positive".into()));
    }
    if !(0.0 < target_radius && target_radius < 1.0) {
        return Err(MilcError::InvalidArgument(format!(
            "target spectral radius must lie in (0, 1), got {}",
            target_radius
        )));
    }
    if !(0.0 < density && density <= 1.0) {
        return Err(MilcError::InvalidArgument(format!(
            "graph density must lie in (0, 1], got {}",
            density
        )));
    }

    // Sparse patterns can be nilpotent (radius exactly 0) and cannot be
    // rescaled; resample until the radius is usable.
    for _ in 0..100 {
        let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
        for v in a.data_mut() {
            if rng.gen_bool(density) {
                *v = StandardNormal.sample(rng);
            }
        }
        let radius = spectral_radius(&a);
        if radius > 1e-9 {
            let scale = target_radius / radius;
            let scaled = a.map(|x| x * scale);
            return TransitionMatrix::new(scaled);
        }
    }
    Err(MilcError::Data(format!(
        "could not draw a rescalable {}-node coupling matrix at density {}",
        n_nodes, density
    )))
}

/// A channels × length real-valued signal.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    data: Tensor<Real>,
}

impl TimeSeries {
    pub fn new(data: Tensor<Real>) -> Result<Self> {
        if data.rank() != 2 || data.shape()[0] == 0 || data.shape()[1] == 0 {
            return Err(MilcError::Data(format!(
                "time series must be channels × length with both positive, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(MilcError::NonFinite("time series".into()));
        }
        Ok(TimeSeries { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn length(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor<Real> {
        &self.data
    }

    /// Copy of a contiguous time span, all channels.
    pub fn slice_time(&self, span: Range<usize>) -> Result<TimeSeries> {
        if span.start >= span.end || span.end > self.length() {
            return Err(MilcError::InvalidArgument(format!(
                "slice {:?} out of bounds for length {}",
                span,
                self.length()
            )));
        }
        let (c, l) = (self.channels(), self.length());
        let n = span.end - span.start;
        let mut out = Tensor::zeros(&[c, n]);
        for ch in 0..c {
            out.data_mut()[ch * n..(ch + 1) * n]
                .copy_from_slice(&self.data.data()[ch * l + span.start..ch * l + span.end]);
        }
        TimeSeries::new(out)
    }
}

/// Simulate x_t = a·x_{t−1} + ε_t with ε_t ~ N(0, noise_std²·I), from a
/// Gaussian initial state of the same scale.
pub fn simulate_var(
    a: &TransitionMatrix,
    length: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TimeSeries> {
    let n = a.n_nodes();
    let x0: Vec<f64> = (0..n).map(|_| noise_std * sample_normal(rng)).collect();
    simulate_var_from(a, &x0, length, noise_std, rng)
}

/// Same recursion with a caller-fixed initial state.
pub fn simulate_var_from(
    a: &TransitionMatrix,
    x0: &[f64],
    length: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TimeSeries> {
    if length == 0 {
        return Err(MilcError::InvalidArgument("series length must be positive".into()));
    }
    if noise_std < 0.0 {
        return Err(MilcError::InvalidArgument(format!("noise std must be ≥ 0, got {}", noise_std)));
    }
    if !a.is_stable() {
        return Err(MilcError::Data(format!(
            "transition matrix has spectral radius {:.6} ≥ 1; trajectories may diverge",
            a.radius()
        )));
    }
    let n = a.n_nodes();
    if x0.len() != n {
        return Err(MilcError::ShapeMismatch {
            op: "simulate_var",
            details: format!("x0 has {} entries for {} nodes", x0.len(), n),
        });
    }

    let mut out = Tensor::zeros(&[n, length]);
    let mut x = x0.to_vec();
    let mut next = vec![0.0f64; n];
    let am = a.matrix().data();
    for t in 0..length {
        if t > 0 {
            for (r, nx) in next.iter_mut().enumerate() {
                let row = &am[r * n..(r + 1) * n];
                let mut acc = 0.0;
                for (c, &w) in row.iter().enumerate() {
                    acc += w * x[c];
                }
                *nx = acc + noise_std * sample_normal(rng);
            }
            x.copy_from_slice(&next);
        }
        for (c, &v) in x.iter().enumerate() {
            out.data_mut()[c * length + t] = v as Real;
        }
    }
    TimeSeries::new(out)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Keep a uniformly random, order-preserving subset of
/// ⌈(1−drop_frac)·length⌉ time points.
pub fn subsample_drop(ts: &TimeSeries, drop_frac: f64, rng: &mut ChaCha8Rng) -> Result<TimeSeries> {
    if !(0.0..1.0).contains(&drop_frac) {
        return Err(MilcError::InvalidArgument(format!(
            "drop fraction must lie in [0, 1), got {}",
            drop_frac
        )));
    }
    let keep = ceil_decimal((1.0 - drop_frac) * ts.length() as f64);
    if keep == ts.length() {
        return Ok(ts.clone());
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, ts.length(), keep).into_vec();
    idx.sort_unstable();

    let (c, l) = (ts.channels(), ts.length());
    let mut out = Tensor::zeros(&[c, keep]);
    for ch in 0..c {
        let src = &ts.data().data()[ch * l..(ch + 1) * l];
        let dst = &mut out.data_mut()[ch * keep..(ch + 1) * keep];
        for (j, &i) in idx.iter().enumerate() {
            dst[j] = src[i];
        }
    }
    TimeSeries::new(out)
}

/// Per-series contiguous time spans for pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// One pre-training sequence: the full series plus its slice bounds. The
/// series index doubles as the sequence identity label for InfoNCE.
#[derive(Clone, Debug)]
pub struct PretrainSeries {
    pub series: TimeSeries,
    pub slices: SliceBounds,
}

/// Shortest slice that still yields one window under the default spec.
const MIN_SLICE_LEN: usize = 20;

/// Contiguous train/val/test time spans for a series of the given length,
/// split by [`SLICE_RATIO`]. Each slice must fit at least one window.
pub fn slice_bounds(length: usize) -> Result<SliceBounds> {
    let (tr, va, _te) = SLICE_RATIO;
    let train_end = length * tr / 100;
    let val_end = train_end + length * va / 100;
    let slices = SliceBounds { train: 0..train_end, val: train_end..val_end, test: val_end..length };
    for (name, r) in [("train", &slices.train), ("val", &slices.val), ("test", &slices.test)] {
        if r.end - r.start < MIN_SLICE_LEN {
            return Err(MilcError::Data(format!(
                "length {} leaves {} slice too short for one window ({} < {})",
                length,
                name,
                r.end - r.start,
                MIN_SLICE_LEN
            )));
        }
    }
    Ok(slices)
}

/// Generate `n_series` independent VAR sequences, each with a fresh
/// transition matrix and contiguous 70/15/15 train/val/test time slices.
pub fn make_pretrain_corpus(
    n_series: usize,
    n_nodes: usize,
    length: usize,
    master_seed: u64,
) -> Result<Vec<PretrainSeries>> {
    if n_series == 0 {
        return Err(MilcError::InvalidArgument("need at least one series".into()));
    }
    let slices = slice_bounds(length)?;

    let mut corpus = Vec::with_capacity(n_series);
    for i in 0..n_series {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
            master_seed,
            seeds::stream::PRETRAIN_CORPUS,
            i as u64,
        ));
        let a = gen_stable_transition(n_nodes, GRAPH_DENSITY, TARGET_RADIUS, &mut rng)?;
        let series = simulate_var(&a, length, NOISE_STD, &mut rng)?;
        corpus.push(PretrainSeries { series, slices: slices.clone() });
    }
    Ok(corpus)
}

/// Class of a downstream sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleClass {
    Var,
    Svar,
}

impl SampleClass {
    pub fn index(self) -> usize {
        match self {
            SampleClass::Var => 0,
            SampleClass::Svar => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(SampleClass::Var),
            1 => Ok(SampleClass::Svar),
            other => Err(MilcError::Data(format!("unknown class index {}", other))),
        }
    }
}

/// Disjoint, covering index partitions of a dataset.
#[derive(Clone, Debug, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Labeled samples with fixed splits and an access counter on the hold-out
/// split, so tests can assert the test set is touched exactly once per trial.
#[derive(Debug)]
pub struct LabeledDataset {
    samples: Vec<TimeSeries>,
    labels: Vec<SampleClass>,
    split: SplitIndices,
    test_reads: AtomicU32,
}

impl LabeledDataset {
    pub fn new(samples: Vec<TimeSeries>, labels: Vec<SampleClass>, split: SplitIndices) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(MilcError::Data(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(first) = samples.first() {
            let (c, l) = (first.channels(), first.length());
            if let Some(bad) = samples.iter().find(|s| s.channels() != c || s.length() != l) {
                return Err(MilcError::Data(format!(
                    "inconsistent sample shapes: {}×{} vs {}×{}",
                    c,
                    l,
                    bad.channels(),
                    bad.length()
                )));
            }
        }
        let mut seen: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        seen.sort_unstable();
        let expected: Vec<usize> = (0..samples.len()).collect();
        if seen != expected {
            return Err(MilcError::Data(
                "splits must partition the sample indices exactly".into(),
            ));
        }
        Ok(LabeledDataset { samples, labels, split, test_reads: AtomicU32::new(0) })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &TimeSeries {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> SampleClass {
        self.labels[i]
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.split.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.split.val
    }

    /// Hold-out indices. Each call is counted; evaluation code must call
    /// this exactly once per trial, after training halts.
    pub fn test_indices(&self) -> &[usize] {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.split.test
    }

    /// How many times the hold-out split has been read.
    pub fn test_read_count(&self) -> u32 {
        self.test_reads.load(Ordering::Relaxed)
    }

    /// Split tag per sample index, for persistence and reporting. Does not
    /// count as a hold-out read: no sample data flows through this.
    pub fn split_tags(&self) -> Vec<&'static str> {
        let mut tags = vec![""; self.samples.len()];
        for &i in &self.split.train {
            tags[i] = "train";
        }
        for &i in &self.split.val {
            tags[i] = "val";
        }
        for &i in &self.split.test {
            tags[i] = "test";
        }
        tags
    }
}

/// Pre-drop run length whose post-drop keep count is exactly `target`.
/// Anchored at ⌈target/(1−drop)⌉ (250 for the default 200 at 20%), then
/// nudged by whole steps when the ceilings don't invert each other — the
/// keep count moves by at most one per step, so a hit always exists.
fn svar_raw_length(target: usize, drop_frac: f64) -> usize {
    let kept = |raw: usize| ceil_decimal(raw as f64 * (1.0 - drop_frac));
    let mut raw = ceil_decimal(target as f64 / (1.0 - drop_frac)).max(target);
    while kept(raw) > target {
        raw -= 1;
    }
    while kept(raw) < target {
        raw += 1;
    }
    raw
}

/// Generate a class-balanced VAR-vs-SVAR dataset with stratified 80/10/10
/// splits. SVAR samples come from a longer VAR run with 20% of time points
/// dropped, landing at exactly `sample_len`.
pub fn make_downstream_dataset(
    n_samples: usize,
    sample_len: usize,
    master_seed: u64,
) -> Result<LabeledDataset> {
    if n_samples < 2 || n_samples % 2 != 0 {
        return Err(MilcError::InvalidArgument(format!(
            "need an even, positive sample count for class balance, got {}",
            n_samples
        )));
    }
    if sample_len < MIN_SLICE_LEN {
        return Err(MilcError::InvalidArgument(format!(
            "sample length {} shorter than one window ({})",
            sample_len, MIN_SLICE_LEN
        )));
    }

    let n_nodes = 10;
    let svar_raw_len = svar_raw_length(sample_len, SVAR_DROP_FRAC);

    // All samples draw their dynamics from a shared pool of graphs — the
    // same graphs that open the pre-training corpus for this master seed
    // (derivation matches make_pretrain_corpus), so a model pre-trained on
    // the corpus has seen these dynamics at length. Both classes see every
    // matrix (consecutive VAR/SVAR pairs share one), so dynamics identity
    // carries no label information and the only systematic class difference
    // is the time-point drop. A per-sample fresh matrix would bury that
    // difference: across random matrices the drop shifts lag statistics in
    // either direction, and the classes become nearly inseparable in
    // distribution.
    let pool: Vec<TransitionMatrix> = (0..DOWNSTREAM_MATRIX_POOL.min(n_samples / 2))
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
                master_seed,
                seeds::stream::PRETRAIN_CORPUS,
                k as u64,
            ));
            gen_stable_transition(n_nodes, GRAPH_DENSITY, TARGET_RADIUS, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
            master_seed,
            seeds::stream::DOWNSTREAM_DATA,
            i as u64,
        ));
        let a = &pool[(i / 2) % pool.len()];
        // Alternate classes so any index prefix stays balanced.
        if i % 2 == 0 {
            samples.push(simulate_var(a, sample_len, NOISE_STD, &mut rng)?);
            labels.push(SampleClass::Var);
        } else {
            let raw = simulate_var(a, svar_raw_len, NOISE_STD, &mut rng)?;
            let dropped = subsample_drop(&raw, SVAR_DROP_FRAC, &mut rng)?;
            if dropped.length() != sample_len {
                return Err(MilcError::Data(format!(
                    "SVAR subsampling produced length {}, wanted {}",
                    dropped.length(),
                    sample_len
                )));
            }
            samples.push(dropped);
            labels.push(SampleClass::Svar);
        }
    }

    let split = stratified_split(&labels, 80, 10);
    LabeledDataset::new(samples, labels, split)
}

/// Per-class contiguous 80/10/10 split; samples are i.i.d. so no extra
/// shuffle is needed, and determinism stays trivial.
fn stratified_split(labels: &[SampleClass], train_pct: usize, val_pct: usize) -> SplitIndices {
    let mut split = SplitIndices::default();
    for class in [SampleClass::Var, SampleClass::Svar] {
        let of_class: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = of_class.len();
        let tr = n * train_pct / 100;
        let va = n * val_pct / 100;
        split.train.extend(&of_class[..tr]);
        split.val.extend(&of_class[tr..tr + va]);
        split.test.extend(&of_class[tr + va..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}
