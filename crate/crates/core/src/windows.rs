//! Decomposition of a time series into overlapping fixed-length windows —
//! the atomic encoder inputs. Trailing time points that do not fill a whole
//! window are discarded rather than padded, so every window carries real
//! dynamics only.

use crate::diffcore::{Real, Tensor};
use crate::error::{MilcError, Result};
use crate::synth::TimeSeries;

/// Window geometry: length in time points and fractional overlap between
/// consecutive windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub win_len: usize,
    pub overlap: f64,
}

impl Default for WindowSpec {
    /// 20-point windows at 50% overlap (stride 10).
    fn default() -> Self {
        WindowSpec { win_len: 20, overlap: 0.5 }
    }
}

impl WindowSpec {
    pub fn new(win_len: usize, overlap: f64) -> Result<Self> {
        let spec = WindowSpec { win_len, overlap };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len < 2 {
            return Err(MilcError::InvalidArgument(format!(
                "window length must be at least 2, got {}",
                self.win_len
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(MilcError::InvalidArgument(format!(
                "overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        if self.stride() < 1 {
            return Err(MilcError::InvalidArgument(format!(
                "overlap {} with window length {} yields stride 0",
                self.overlap, self.win_len
            )));
        }
        Ok(())
    }

    /// Hop between window starts: round-half-up of win_len·(1−overlap).
    pub fn stride(&self) -> usize {
        (self.win_len as f64 * (1.0 - self.overlap)).round() as usize
    }

    /// Number of whole windows a series of `length` yields.
    pub fn count(&self, length: usize) -> Result<usize> {
        if length < self.win_len {
            return Err(MilcError::Data(format!(
                "series length {} shorter than window length {}",
                length, self.win_len
            )));
        }
        Ok((length - self.win_len) / self.stride() + 1)
    }
}

/// All windows of one sequence, in temporal order.
#[derive(Clone, Debug)]
pub struct WindowedSequence {
    /// Each window is channels × win_len.
    pub windows: Vec<Tensor<Real>>,
    /// Identity of the source sequence (series or sample index).
    pub source_id: usize,
    /// Start offset of each window in the source series.
    pub t_index: Vec<usize>,
}

impl WindowedSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Slice `ts` into overlapping windows per `spec`. Window k covers columns
/// [k·stride, k·stride + win_len).
pub fn extract_windows(ts: &TimeSeries, spec: &WindowSpec, source_id: usize) -> Result<WindowedSequence> {
    spec.validate()?;
    let count = spec.count(ts.length())?;
    let stride = spec.stride();
    let (channels, length) = (ts.channels(), ts.length());

    let mut windows = Vec::with_capacity(count);
    let mut t_index = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        let mut w = Tensor::zeros(&[channels, spec.win_len]);
        for c in 0..channels {
            let src = &ts.data().data()[c * length + start..c * length + start + spec.win_len];
            w.data_mut()[c * spec.win_len..(c + 1) * spec.win_len].copy_from_slice(src);
        }
        windows.push(w);
        t_index.push(start);
    }
    Ok(WindowedSequence { windows, source_id, t_index })
}
