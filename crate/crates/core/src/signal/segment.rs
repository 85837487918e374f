use super::{PatchGrid, Recording, MODEL_RATE, PATCH_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentConfig {
    /// Patches per window (seconds at the model rate).
    pub patches_per_window: usize,
    /// A window is dropped when any |sample| exceeds this (µV).
    pub reject_uv: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            patches_per_window: 30,
            reject_uv: 100.0,
        }
    }
}

/// Cut consecutive non-overlapping windows and patch each kept one.
/// The trailing partial window is discarded.
pub fn segment_and_reject(rec: &Recording, cfg: &SegmentConfig) -> Result<Vec<PatchGrid>> {
    if rec.sample_rate() != MODEL_RATE {
        return Err(Error::invalid(format!(
            "segmentation expects {MODEL_RATE} Hz input, got {} Hz",
            rec.sample_rate()
        )));
    }
    if cfg.patches_per_window == 0 {
        return Err(Error::invalid("patches_per_window must be > 0"));
    }
    let win = cfg.patches_per_window * PATCH_LEN;
    let c = rec.n_channels();
    let mut out = Vec::new();
    for w in 0..rec.len() / win {
        let range = w * win..(w + 1) * win;
        let bad = rec
            .samples()
            .iter()
            .any(|ch| ch[range.clone()].iter().any(|v| v.abs() > cfg.reject_uv));
        if bad {
            continue;
        }
        let mut data = Vec::with_capacity(c * win);
        for ch in rec.samples() {
            data.extend_from_slice(&ch[range.clone()]);
        }
        let patches = Tensor::new(&[c, cfg.patches_per_window, PATCH_LEN], data)?;
        out.push(PatchGrid::new(
            patches,
            rec.channel_labels().to_vec(),
            rec.id.clone(),
            (w * win) as f64 / MODEL_RATE,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(secs: usize, c: usize) -> Recording {
        let n = secs * 200;
        let samples = (0..c)
            .map(|ch| {
                (0..n)
                    .map(|i| 50.0 * ((i as f64 * 0.013 + ch as f64).sin()))
                    .collect()
            })
            .collect();
        let labels = (0..c).map(|i| format!("E{i}")).collect();
        Recording::new("r", labels, 200.0, samples).unwrap()
    }

    fn with_sample(r: &Recording, ch: usize, i: usize, v: f64) -> Recording {
        let mut s = r.samples().to_vec();
        s[ch][i] = v;
        r.with_samples(200.0, s).unwrap()
    }

    #[test]
    fn ninety_five_seconds_gives_three_windows() {
        let g = segment_and_reject(&rec(95, 2), &SegmentConfig::default()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[2].start_s, 60.0);
        assert_eq!(g[0].patches.shape(), &[2, 30, 200]);
        assert_eq!(g[0].mask.len(), 60);
    }

    #[test]
    fn spike_drops_its_window() {
        let r = with_sample(&rec(90, 3), 1, 45 * 200 + 17, 101.0);
        let g = segment_and_reject(&r, &SegmentConfig::default()).unwrap();
        let starts: Vec<f64> = g.iter().map(|g| g.start_s).collect();
        assert_eq!(starts, [0.0, 60.0]);
    }

    #[test]
    fn negative_spike_also_rejects() {
        let r = with_sample(&rec(60, 1), 0, 10, -100.5);
        assert_eq!(segment_and_reject(&r, &SegmentConfig::default()).unwrap().len(), 1);
    }

    #[test]
    fn exactly_threshold_is_kept() {
        let r = with_sample(&rec(30, 1), 0, 100, 100.0);
        assert_eq!(segment_and_reject(&r, &SegmentConfig::default()).unwrap().len(), 1);
    }

    #[test]
    fn short_recording_gives_nothing() {
        let g = segment_and_reject(&rec(29, 2), &SegmentConfig::default()).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn wrong_rate_rejected() {
        let r = Recording::new("r", vec!["Cz".into()], 256.0, vec![vec![0.0; 10]]).unwrap();
        assert!(segment_and_reject(&r, &SegmentConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn patching_is_lossless(secs in 30usize..100, c in 1usize..4) {
            let r = rec(secs, c);
            let cfg = SegmentConfig::default();
            for g in segment_and_reject(&r, &cfg).unwrap() {
                let start = (g.start_s * 200.0) as usize;
                for ch in 0..c {
                    let mut joined = Vec::new();
                    for n in 0..g.n_patches() {
                        joined.extend_from_slice(g.patch(ch, n));
                    }
                    prop_assert_eq!(&joined[..], &r.samples()[ch][start..start + 6000]);
                }
            }
        }
    }
}
