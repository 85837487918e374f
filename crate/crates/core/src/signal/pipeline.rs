use super::filter::{bandpass_order, notch_q, DEFAULT_NOTCH_Q, DEFAULT_ORDER};
use super::{resample, segment_and_reject, select_channels, PatchGrid, Recording, SegmentConfig};
use super::{MODEL_RATE, STANDARD_19};
use crate::config::{join_list, parse_value, KeyValue};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub band: (f64, f64),
    pub notch: Option<f64>,
    pub notch_q: f64,
    pub order: usize,
    pub target_rate: f64,
    pub channels: Vec<String>,
    pub segment: SegmentConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            band: (0.3, 75.0),
            notch: Some(60.0),
            notch_q: DEFAULT_NOTCH_Q,
            order: DEFAULT_ORDER,
            target_rate: MODEL_RATE,
            channels: STANDARD_19.iter().map(|s| s.to_string()).collect(),
            segment: SegmentConfig::default(),
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let (lo, hi) = self.band;
        if !(lo > 0.0 && hi > lo) {
            return bad("prep.band must be low:high with 0 < low < high");
        }
        if !(self.target_rate > 0.0) || hi >= self.target_rate / 2.0 {
            return bad("prep.band upper edge must lie below the target Nyquist rate");
        }
        if let Some(f0) = self.notch {
            if !(f0 > 0.0) || !(self.notch_q > 0.0) {
                return bad("prep.notch and prep.notch_q must be positive");
            }
        }
        if self.order == 0 || !self.order.is_multiple_of(2) {
            return bad("prep.order must be a positive even number");
        }
        if self.channels.is_empty() {
            return bad("prep.channels is empty");
        }
        if self.segment.patches_per_window == 0 || !(self.segment.reject_uv > 0.0) {
            return bad("prep.patches_per_window and prep.reject_uv must be positive");
        }
        Ok(())
    }
}

impl KeyValue for PrepConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("prep.") else {
            return Ok(false);
        };
        match k {
            "band" => {
                let (lo, hi) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("prep.band `{v}` is not low:high")))?;
                self.band = (parse_value(key, lo.trim())?, parse_value(key, hi.trim())?);
            }
            "notch" => {
                self.notch = match v {
                    "none" | "off" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "notch_q" => self.notch_q = parse_value(key, v)?,
            "order" => self.order = parse_value(key, v)?,
            "rate" => self.target_rate = parse_value(key, v)?,
            "channels" => self.channels = v.split(',').map(|c| c.trim().to_string()).collect(),
            "patches_per_window" => self.segment.patches_per_window = parse_value(key, v)?,
            "reject_uv" => self.segment.reject_uv = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (format!("prep.{k}"), v);
        vec![
            e("band", format!("{}:{}", self.band.0, self.band.1)),
            e("notch", self.notch.map_or("none".into(), |f| f.to_string())),
            e("notch_q", self.notch_q.to_string()),
            e("order", self.order.to_string()),
            e("rate", self.target_rate.to_string()),
            e("channels", join_list(&self.channels)),
            e("patches_per_window", self.segment.patches_per_window.to_string()),
            e("reject_uv", self.segment.reject_uv.to_string()),
        ]
    }
}

/// Band-pass, notch, resample, select channels, then window and reject.
pub fn preprocess(rec: &Recording, cfg: &PrepConfig) -> Result<Vec<PatchGrid>> {
    let mut r = bandpass_order(rec, cfg.band.0, cfg.band.1, cfg.order)?;
    if let Some(f0) = cfg.notch {
        r = notch_q(&r, f0, cfg.notch_q)?;
    }
    let r = resample(&r, cfg.target_rate)?;
    let r = select_channels(&r, &cfg.channels)?;
    segment_and_reject(&r, &cfg.segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sixty_five_seconds_at_256_hz() {
        let labels: Vec<String> = STANDARD_19.iter().rev().map(|s| s.to_string()).collect();
        let n = 65 * 256;
        let samples = (0..19)
            .map(|c| {
                (0..n)
                    .map(|i| 30.0 * (2.0 * PI * (5.0 + c as f64) * i as f64 / 256.0).sin())
                    .collect()
            })
            .collect();
        let rec = Recording::new("s", labels, 256.0, samples).unwrap();
        let grids = preprocess(&rec, &PrepConfig::default()).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[0].patches.shape(), &[19, 30, 200]);
        assert_eq!(grids[0].channel_labels[0], "Fp1");
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = PrepConfig::default();
        assert!(c.set("prep.band", "1:40").unwrap());
        assert!(c.set("prep.notch", "none").unwrap());
        assert!(c.set("prep.channels", "Cz, Pz").unwrap());
        assert_eq!(c.channels, vec!["Cz", "Pz"]);
        let mut d = PrepConfig::default();
        for (k, v) in c.entries() {
            assert!(d.set(&k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(PrepConfig::default().validate().is_ok());
        for (k, v) in [("prep.band", "40:1"), ("prep.band", "1:120"), ("prep.order", "3")] {
            let mut c = PrepConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn missing_channel_surfaces() {
        let rec = Recording::new("s", vec!["Cz".into()], 256.0, vec![vec![0.0; 256 * 31]]).unwrap();
        assert!(matches!(
            preprocess(&rec, &PrepConfig::default()),
            Err(crate::Error::MissingChannels(_))
        ));
    }
}
