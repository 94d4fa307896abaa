//! Model checkpoints.
//!
//! Layout: magic `MILCCK1`, tensor count u32 LE, then per tensor
//! {name_len u16, name UTF-8, rank u8, dims u32 LE × rank, data f32 LE},
//! then a trailing JSON metadata blob running to end of file. Every model
//! parameter appears exactly once under its canonical name, and a load
//! reproduces all parameters bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, write_f32s, write_u16, write_u32};
use crate::diffcore::{Real, Tensor};
use crate::encoder::EncoderVariant;
use crate::error::{MilcError, Result};
use crate::model::ModelBundle;

pub const CKPT_MAGIC: &[u8; 7] = b"MILCCK1";

/// What produced a checkpoint; downstream regimes gate on this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    MilcPretrain,
    Autoencoder,
    Downstream,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CheckpointKind::MilcPretrain => "milc-pretrain",
            CheckpointKind::Autoencoder => "autoencoder",
            CheckpointKind::Downstream => "downstream",
        };
        f.write_str(s)
    }
}

/// Trailing metadata blob: architecture gates plus training provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Encoder variant tag; must match the loader's expectation.
    pub variant: String,
    pub win_len: usize,
    /// Master seed of the run that produced the checkpoint.
    pub seed: u64,
    pub epochs_trained: usize,
    /// Validation metric at the checkpointed epoch (InfoNCE loss for
    /// pre-training, AUC downstream, MSE for the autoencoder).
    pub best_val_metric: f64,
}

impl CheckpointMeta {
    pub fn for_bundle<F: crate::diffcore::Scalar>(bundle: &ModelBundle<F>, kind: CheckpointKind, seed: u64) -> Self {
        CheckpointMeta {
            kind,
            variant: bundle.variant.tag().to_string(),
            win_len: bundle.win_len,
            seed,
            epochs_trained: 0,
            best_val_metric: f64::NAN,
        }
    }
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle<Real>, meta: &CheckpointMeta) -> Result<()> {
    if meta.variant != bundle.variant.tag() || meta.win_len != bundle.win_len {
        return Err(MilcError::InvalidArgument(format!(
            "metadata says {}/win {} but bundle is {}/win {}",
            meta.variant,
            meta.win_len,
            bundle.variant.tag(),
            bundle.win_len
        )));
    }
    let params = bundle.visit();
    atomic_write(path, |w| {
        use std::io::Write;
        w.write_all(CKPT_MAGIC)?;
        write_u32(w, params.len() as u32)?;
        for (name, t) in &params {
            if !t.all_finite() {
                return Err(MilcError::NonFinite(format!("tensor {}", name)));
            }
            let name_bytes = name.as_bytes();
            write_u16(w, u16::try_from(name_bytes.len()).map_err(|_| {
                MilcError::InvalidArgument(format!("tensor name too long: {}", name))
            })?)?;
            w.write_all(name_bytes)?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| MilcError::InvalidArgument(format!("tensor {} rank too large", name)))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                write_u32(
                    w,
                    u32::try_from(d).map_err(|_| {
                        MilcError::InvalidArgument(format!("tensor {} dim too large", name))
                    })?,
                )?;
            }
            write_f32s(w, t.data())?;
        }
        w.write_all(&serde_json::to_vec_pretty(meta)?)?;
        Ok(())
    })
}

/// Byte cursor over the checkpoint image; errors name the field being read.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MilcError::Format(format!("truncated reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn rest(self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

pub fn load_checkpoint(path: &Path, expected_variant: EncoderVariant) -> Result<(ModelBundle<Real>, CheckpointMeta)> {
    let image = std::fs::read(path)?;
    let mut cur = Cursor { buf: &image, pos: 0 };
    if cur.take(CKPT_MAGIC.len(), "magic")? != CKPT_MAGIC {
        return Err(MilcError::Format(format!("not a checkpoint file: {}", path.display())));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut loaded: BTreeMap<String, Tensor<Real>> = BTreeMap::new();
    for i in 0..count {
        let name_len = cur.u16(&format!("name length of tensor {}", i))? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &format!("name of tensor {}", i))?)
            .map_err(|_| MilcError::Format(format!("tensor {} name is not UTF-8", i)))?
            .to_string();
        let rank = cur.u8(&format!("rank of tensor {}", name))? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = cur.u32(&format!("dims of tensor {}", name))? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| MilcError::Format(format!("tensor {} size overflows", name)))?;
            shape.push(d);
        }
        let raw = cur.take(len * 4, &format!("data of tensor {}", name))?;
        let data: Vec<Real> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data)?;
        if !t.all_finite() {
            return Err(MilcError::NonFinite(format!("tensor {}", name)));
        }
        if loaded.insert(name.clone(), t).is_some() {
            return Err(MilcError::Format(format!("name collision: tensor {} appears twice", name)));
        }
    }
    let meta: CheckpointMeta = serde_json::from_slice(cur.rest())?;

    if meta.variant != expected_variant.tag() {
        return Err(MilcError::Format(format!(
            "variant mismatch: checkpoint is '{}' but '{}' expected",
            meta.variant,
            expected_variant.tag()
        )));
    }

    // Pour the tensors into a canonical skeleton; every parameter must
    // appear exactly once with its recorded shape.
    let mut bundle = ModelBundle::<Real>::init(expected_variant, meta.win_len, 0)?;
    for (name, slot) in bundle.visit_mut() {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| MilcError::Format(format!("missing tensor {}", name)))?;
        if t.shape() != slot.shape() {
            return Err(MilcError::Format(format!(
                "tensor {} has dims {:?}, expected {:?}",
                name,
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(name) = loaded.keys().next() {
        return Err(MilcError::Format(format!("unexpected tensor {}", name)));
    }
    Ok((bundle, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle_and_meta(seed: u64) -> (ModelBundle<Real>, CheckpointMeta) {
        let bundle = ModelBundle::<Real>::init(EncoderVariant::Simulation, 20, seed).unwrap();
        let mut meta = CheckpointMeta::for_bundle(&bundle, CheckpointKind::MilcPretrain, seed);
        meta.epochs_trained = 42;
        meta.best_val_metric = 1.25;
        (bundle, meta)
    }

    #[test]
    fn save_load_save_is_byte_identical_and_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.milcck");
        let p2 = dir.path().join("b.milcck");
        let (bundle, meta) = bundle_and_meta(3);
        save_checkpoint(&p1, &bundle, &meta).unwrap();
        let (back, meta_back) = load_checkpoint(&p1, EncoderVariant::Simulation).unwrap();
        assert_eq!(back, bundle, "parameters must round-trip bit-exactly");
        assert_eq!(meta_back, meta);
        save_checkpoint(&p2, &back, &meta_back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn variant_gate_rejects_simulation_checkpoint_as_real() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.milcck");
        let (bundle, meta) = bundle_and_meta(4);
        save_checkpoint(&path, &bundle, &meta).unwrap();
        let err = load_checkpoint(&path, EncoderVariant::Real).unwrap_err();
        assert!(err.to_string().contains("variant mismatch"), "{}", err);
    }

    #[test]
    fn swapped_dim_fields_name_the_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tamper.milcck");
        let (bundle, meta) = bundle_and_meta(5);
        save_checkpoint(&path, &bundle, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First record: magic(7) count(4) name_len(2) name(20) rank(1), then
        // dims of encoder.conv0.weight = [32, 10, 4]. Swapping the first two
        // keeps the stream parseable but breaks the recorded shape.
        let dims_at = 7 + 4 + 2 + "encoder.conv0.weight".len() + 1;
        let (d0, d1) = (dims_at, dims_at + 4);
        for k in 0..4 {
            bytes.swap(d0 + k, d1 + k);
        }
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, EncoderVariant::Simulation).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("encoder.conv0.weight"), "{}", msg);
        assert!(msg.contains("[10, 32, 4]"), "{}", msg);
    }

    #[test]
    fn grown_dim_field_misaligns_and_still_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grow.milcck");
        let (bundle, meta) = bundle_and_meta(6);
        save_checkpoint(&path, &bundle, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let dims_at = 7 + 4 + 2 + "encoder.conv0.weight".len() + 1;
        bytes[dims_at] = bytes[dims_at].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, EncoderVariant::Simulation).is_err());
    }

    #[test]
    fn truncated_file_names_the_tensor_being_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.milcck");
        let (bundle, meta) = bundle_and_meta(7);
        save_checkpoint(&path, &bundle, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut inside the very first tensor's payload.
        std::fs::write(&path, &bytes[..7 + 4 + 2 + 20 + 1 + 12 + 100]).unwrap();
        let err = load_checkpoint(&path, EncoderVariant::Simulation).unwrap_err();
        assert!(err.to_string().contains("encoder.conv0.weight"), "{}", err);
    }

    #[test]
    fn metadata_with_unknown_keys_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.milcck");
        let (bundle, meta) = bundle_and_meta(8);
        save_checkpoint(&path, &bundle, &meta).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The JSON blob is the file tail; splice in an extra key.
        let tail = bytes.split_off(bytes.len() - 1);
        assert_eq!(tail, b"}");
        bytes.extend_from_slice(b",\"surprise\":1}");
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, EncoderVariant::Simulation).is_err());
    }

    #[test]
    fn inconsistent_meta_is_rejected_at_save_time() {
        let dir = tempfile::tempdir().unwrap();
        let (bundle, mut meta) = bundle_and_meta(9);
        meta.variant = "real".into();
        let err = save_checkpoint(&dir.path().join("x"), &bundle, &meta).unwrap_err();
        assert!(matches!(err, MilcError::InvalidArgument(_)), "{}", err);
    }
}
