//! EEG ingestion and preprocessing: band-pass, notch, resample, channel
//! selection, then fixed-length windowing into patch grids.

mod channels;
mod filter;
pub mod io;
mod pipeline;
mod resample;
mod segment;

use std::collections::HashSet;

pub use channels::{canonical_label, select_channels, STANDARD_19};
pub use filter::{
    bandpass, bandpass_order, butterworth_highpass, butterworth_lowpass, filtfilt, notch, notch_q,
    notch_section, Biquad,
};
pub use pipeline::{preprocess, PrepConfig};
pub use resample::{rational_ratio, resample, resample_channel};
pub use segment::{segment_and_reject, SegmentConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per patch (one second at the model rate).
pub const PATCH_LEN: usize = 200;
pub const MODEL_RATE: f64 = 200.0;

/// Multi-channel recording in microvolts, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub subject: Option<String>,
    pub session: Option<String>,
    channel_labels: Vec<String>,
    sample_rate: f64,
    samples: Vec<Vec<f64>>,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        channel_labels: Vec<String>,
        sample_rate: f64,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if channel_labels.len() != samples.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} channels",
                channel_labels.len(),
                samples.len()
            )));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|c| c.len() != first.len()) {
                return Err(Error::invalid("channels differ in length"));
            }
        }
        let mut seen = HashSet::new();
        for l in &channel_labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid(format!("duplicate channel label `{l}`")));
            }
        }
        Ok(Self {
            id: id.into(),
            subject: None,
            session: None,
            channel_labels,
            sample_rate,
            samples,
        })
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Same labels and identifiers, new samples/rate.
    pub(crate) fn with_samples(&self, sample_rate: f64, samples: Vec<Vec<f64>>) -> Result<Self> {
        let mut r = Self::new(self.id.clone(), self.channel_labels.clone(), sample_rate, samples)?;
        r.subject = self.subject.clone();
        r.session = self.session.clone();
        Ok(r)
    }
}

/// `C x N x P` patches cut from one window, plus the patch mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub mask: Vec<bool>,
    pub channel_labels: Vec<String>,
    pub recording_id: String,
    pub start_s: f64,
}

impl PatchGrid {
    pub fn new(
        patches: Tensor,
        channel_labels: Vec<String>,
        recording_id: impl Into<String>,
        start_s: f64,
    ) -> Result<Self> {
        let s = patches.shape();
        if s.len() != 3 || s[2] != PATCH_LEN {
            return Err(Error::shape(
                "patch grid",
                format!("expected [C, N, {PATCH_LEN}], got {s:?}"),
            ));
        }
        if channel_labels.len() != s[0] {
            return Err(Error::shape("patch grid", "label count differs from C"));
        }
        let cells = s[0] * s[1];
        Ok(Self {
            patches,
            mask: vec![false; cells],
            channel_labels,
            recording_id: recording_id.into(),
            start_s,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn n_patches(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Patch of channel `c` at time index `n`.
    pub fn patch(&self, c: usize, n: usize) -> &[f64] {
        let start = (c * self.n_patches() + n) * PATCH_LEN;
        &self.patches.data()[start..start + PATCH_LEN]
    }

    /// Channel `c` as one continuous signal.
    pub fn channel_signal(&self, c: usize) -> &[f64] {
        let w = self.n_patches() * PATCH_LEN;
        &self.patches.data()[c * w..(c + 1) * w]
    }

    /// The window as a recording at the model rate, channels concatenated
    /// in time.
    pub fn to_recording(&self, id: impl Into<String>) -> Result<Recording> {
        let samples = (0..self.n_channels()).map(|c| self.channel_signal(c).to_vec()).collect();
        Recording::new(id, self.channel_labels.clone(), MODEL_RATE, samples)
    }

    /// Inverse of [`PatchGrid::to_recording`]: the recording must be at the
    /// model rate and a whole number of patches long.
    pub fn from_recording(rec: &Recording) -> Result<Self> {
        if rec.sample_rate() != MODEL_RATE {
            return Err(Error::invalid(format!(
                "`{}` is at {} Hz, window files must be at {MODEL_RATE} Hz",
                rec.id,
                rec.sample_rate()
            )));
        }
        if rec.is_empty() || !rec.len().is_multiple_of(PATCH_LEN) {
            return Err(Error::invalid(format!(
                "`{}` has {} samples, not a whole number of patches",
                rec.id,
                rec.len()
            )));
        }
        let (c, n) = (rec.n_channels(), rec.len() / PATCH_LEN);
        let data = rec.samples().concat();
        Self::new(Tensor::new(&[c, n, PATCH_LEN], data)?, rec.channel_labels().to_vec(), rec.id.clone(), 0.0)
    }

    /// Reorder channels so that output channel `i` is input channel
    /// `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Self {
        let w = self.n_patches() * PATCH_LEN;
        let n = self.n_patches();
        let mut data = Vec::with_capacity(self.patches.numel());
        let mut mask = Vec::with_capacity(self.mask.len());
        for &src in perm {
            data.extend_from_slice(self.channel_signal(src));
            mask.extend_from_slice(&self.mask[src * n..(src + 1) * n]);
        }
        debug_assert_eq!(data.len(), perm.len() * w);
        Self {
            patches: Tensor::new(self.patches.shape(), data).expect("same shape"),
            mask,
            channel_labels: perm.iter().map(|&p| self.channel_labels[p].clone()).collect(),
            recording_id: self.recording_id.clone(),
            start_s: self.start_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_recording_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * PATCH_LEN).map(|i| i as f64).collect();
        let g = PatchGrid::new(
            Tensor::new(&[2, 3, PATCH_LEN], data).unwrap(),
            vec!["Cz".into(), "Pz".into()],
            "r",
            0.0,
        )
        .unwrap();
        let rec = g.to_recording("r.w0").unwrap();
        assert_eq!(rec.len(), 3 * PATCH_LEN);
        let back = PatchGrid::from_recording(&rec).unwrap();
        assert_eq!(back.patches, g.patches);
        assert_eq!(back.channel_labels, g.channel_labels);
    }

    #[test]
    fn window_files_must_be_whole_patches() {
        let rec = Recording::new("x", vec!["Cz".into()], MODEL_RATE, vec![vec![0.0; 250]]).unwrap();
        assert!(PatchGrid::from_recording(&rec).is_err());
        let rec = Recording::new("x", vec!["Cz".into()], 256.0, vec![vec![0.0; 400]]).unwrap();
        assert!(PatchGrid::from_recording(&rec).is_err());
    }
}
