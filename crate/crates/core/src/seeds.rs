//! Deterministic seed derivation.
//!
//! Every random decision in the crate flows from one master seed through
//! `derive` with a domain stream, so distinct concerns (corpus generation,
//! weight init, batch shuffling, trials) get decorrelated, reproducible
//! streams that never collide even when they share the master seed.

/// Domain streams. Values are arbitrary but fixed forever; changing one
/// changes every downstream random draw.
pub mod stream {
    pub const PRETRAIN_CORPUS: u64 = 1;
    pub const DOWNSTREAM_DATA: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
    pub const TRIAL: u64 = 5;
    pub const GRADCHECK: u64 = 6;
    /// Choosing the class-stratified n_train subsample within a trial.
    pub const SUBSET: u64 = 7;
    /// Sampling validation window runs during pre-training.
    pub const VAL_RUNS: u64 = 8;
}

/// splitmix64 finalizer over (master, stream): high-quality 64-bit mixing so
/// nearby masters or streams still yield unrelated generator states.
pub fn derive(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level derivation for per-item seeds inside a domain (series index,
/// sample index, trial index).
pub fn derive2(master: u64, stream: u64, index: u64) -> u64 {
    derive(derive(master, stream), index.wrapping_add(1))
}
