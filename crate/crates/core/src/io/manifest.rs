//! Dataset directories: one time-series container per sample plus a JSON
//! manifest listing files, labels, split assignments, and the generation
//! parameters. Ingestion validates everything before handing the training
//! code a dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, load_timeseries, save_timeseries};
use crate::error::{MilcError, Result};
use crate::synth::{slice_bounds, LabeledDataset, PretrainSeries, SampleClass, SplitIndices};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    /// Class label, 0 or 1; absent for pre-training series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// train | val | test; absent for pre-training series (those are sliced
    /// by time, not by file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Generation parameters recorded alongside the files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub seed: u64,
    pub count: usize,
    pub nodes: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// "pretrain" or "downstream".
    pub kind: String,
    pub generated: GenParams,
    pub entries: Vec<ManifestEntry>,
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| MilcError::Data(format!("cannot read {}: {}", path.display(), e)))?;
    Ok(serde_json::from_str(&text)?)
}

fn save_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    atomic_write(&dir.join(MANIFEST_NAME), |w| {
        use std::io::Write;
        w.write_all(&serde_json::to_vec_pretty(manifest)?)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Write a pre-training corpus as one container file per series.
pub fn write_pretrain_corpus(dir: &Path, corpus: &[PretrainSeries], gen: GenParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, ps) in corpus.iter().enumerate() {
        let file = format!("series_{:04}.milcts", i);
        save_timeseries(&dir.join(&file), &ps.series)?;
        entries.push(ManifestEntry { file, label: None, split: None });
    }
    save_manifest(dir, &DatasetManifest { kind: "pretrain".into(), generated: gen, entries })
}

/// Load a pre-training corpus, recomputing the per-series time slices from
/// the configured ratio.
pub fn load_pretrain_corpus(dir: &Path) -> Result<Vec<PretrainSeries>> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "pretrain" {
        return Err(MilcError::Data(format!("manifest kind '{}' is not a pre-training corpus", manifest.kind)));
    }
    let mut corpus = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(MilcError::Data(format!("manifest references absent file {}", path.display())));
        }
        let series = load_timeseries(&path)?;
        let slices = slice_bounds(series.length())?;
        corpus.push(PretrainSeries { series, slices });
    }
    Ok(corpus)
}

/// Write a labeled downstream dataset as one container file per sample.
pub fn write_downstream_dataset(dir: &Path, data: &LabeledDataset, gen: GenParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tags = data.split_tags();
    let mut entries = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let file = format!("sample_{:05}.milcts", i);
        save_timeseries(&dir.join(&file), data.sample(i))?;
        entries.push(ManifestEntry {
            file,
            label: Some(data.label(i).index() as u8),
            split: Some(tags[i].to_string()),
        });
    }
    save_manifest(dir, &DatasetManifest { kind: "downstream".into(), generated: gen, entries })
}

/// Assemble a labeled dataset from container files under `dir` as directed
/// by the manifest: labels in {0,1}, a split tag per entry, consistent
/// channel counts, and no missing files.
pub fn ingest_timecourses(dir: &Path, manifest: &DatasetManifest) -> Result<LabeledDataset> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut split = SplitIndices::default();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(MilcError::Data(format!("manifest references absent file {}", path.display())));
        }
        let label = entry
            .label
            .ok_or_else(|| MilcError::Data(format!("{} has no label", entry.file)))?;
        labels.push(SampleClass::from_index(label as usize)?);
        match entry.split.as_deref() {
            Some("train") => split.train.push(i),
            Some("val") => split.val.push(i),
            Some("test") => split.test.push(i),
            other => {
                return Err(MilcError::Data(format!(
                    "{} has split {:?}, expected train|val|test",
                    entry.file, other
                )))
            }
        }
        samples.push(load_timeseries(&path)?);
    }
    LabeledDataset::new(samples, labels, split)
}

/// Convenience: manifest + ingest in one call.
pub fn load_downstream_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "downstream" {
        return Err(MilcError::Data(format!("manifest kind '{}' is not a downstream dataset", manifest.kind)));
    }
    ingest_timecourses(dir, &manifest)
}
