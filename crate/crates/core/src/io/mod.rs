//! Persistence and interchange: the binary time-series container, the
//! checkpoint format, dataset manifests, and experiment configuration.
//!
//! All binary formats are little-endian and versioned by a magic string; any
//! format change requires a new magic. Tensors are stored as f32 (the
//! training precision) regardless of the in-memory element type used for
//! gradient checking.

mod checkpoint;
mod config;
mod container;
mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, CheckpointMeta, CKPT_MAGIC};
pub use config::{load_config, ExperimentConfig};
pub use container::{load_timeseries, save_timeseries, TS_MAGIC};
pub use manifest::{
    ingest_timecourses, load_downstream_dataset, load_manifest, load_pretrain_corpus,
    write_downstream_dataset, write_pretrain_corpus, DatasetManifest, GenParams, ManifestEntry,
    MANIFEST_NAME,
};

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MilcError, Result};

/// Write through a sibling temp file and rename into place, so readers never
/// observe a partially written file.
pub fn atomic_write(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| MilcError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    let mut w = BufWriter::new(File::create(&tmp)?);
    body(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// `what` names the field being read so truncation errors say where.
pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            MilcError::Format(format!("truncated reading {}", what))
        } else {
            MilcError::Io(e)
        }
    })
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8], format_name: &str) -> Result<()> {
    let mut got = vec![0u8; magic.len()];
    read_exact(r, &mut got, "magic")?;
    if got != magic {
        return Err(MilcError::Format(format!(
            "not a {} file (magic {:?}, expected {:?})",
            format_name,
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
