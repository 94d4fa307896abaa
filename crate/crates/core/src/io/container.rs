//! Binary container for one multichannel time series.
//!
//! Layout: magic `MILCTS1`, channels u32 LE, length u32 LE, then
//! channels·length f32 LE values in row-major (channel-major) order.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::{atomic_write, expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::diffcore::Tensor;
use crate::error::{MilcError, Result};
use crate::synth::TimeSeries;

pub const TS_MAGIC: &[u8; 7] = b"MILCTS1";

pub fn save_timeseries(path: &Path, ts: &TimeSeries) -> Result<()> {
    atomic_write(path, |w| {
        use std::io::Write;
        w.write_all(TS_MAGIC)?;
        write_u32(w, ts.channels() as u32)?;
        write_u32(w, ts.length() as u32)?;
        write_f32s(w, ts.data().data())
    })
}

pub fn load_timeseries(path: &Path) -> Result<TimeSeries> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, TS_MAGIC, "time-series")?;
    let channels = read_u32(&mut r, "channel count")? as usize;
    let length = read_u32(&mut r, "series length")? as usize;
    let n = channels
        .checked_mul(length)
        .ok_or_else(|| MilcError::Format("channels*length overflows".into()))?;
    let data = read_f32s(&mut r, n, "series payload")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(MilcError::Format(format!(
            "trailing bytes after {}x{} payload in {}",
            channels,
            length,
            path.display()
        )));
    }
    TimeSeries::new(Tensor::new(vec![channels, length], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_series(channels: usize, length: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * length).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        TimeSeries::new(Tensor::new(vec![channels, length], data).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.milcts");
        let ts = random_series(10, 200, 1);
        save_timeseries(&path, &ts).unwrap();
        let back = load_timeseries(&path).unwrap();
        assert_eq!(back.data(), ts.data());
    }

    #[test]
    fn real_data_shape_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.milcts");
        let ts = random_series(53, 150, 2);
        save_timeseries(&path, &ts).unwrap();
        let back = load_timeseries(&path).unwrap();
        assert_eq!(back.channels(), 53);
        assert_eq!(back.length(), 150);
        assert_eq!(back.data(), ts.data());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOTMILC___________").unwrap();
        let err = load_timeseries(&path).unwrap_err();
        assert!(matches!(err, MilcError::Format(_)), "{}", err);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.milcts");
        save_timeseries(&path, &random_series(4, 50, 3)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_timeseries(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.milcts");
        save_timeseries(&path, &random_series(4, 50, 4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_timeseries(&path).is_err());
    }

    #[test]
    fn no_temp_file_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.milcts");
        save_timeseries(&path, &random_series(2, 30, 5)).unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["w.milcts".to_string()]);
    }
}
