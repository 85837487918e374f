//! Synthetic band-limited recordings for desk-scale runs.
//!
//! Every channel is a sum of integer-frequency sinusoids plus small uniform
//! noise, so each one-second patch repeats. Raw amplitudes stay under
//! 45 µV: zero-phase filtering with odd edge extension can roughly double
//! the signal near the recording edges, and the result must still pass the
//! 100 µV rejection. In class mode each recording carries one class tone
//! that dominates the spectrum on every channel.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::signal::{preprocess, PrepConfig, Recording, STANDARD_19};
use crate::train::{IndexEntry, LabeledSet, Split};

/// Dominant tone of each class, in Hz.
pub const CLASS_FREQS: [f64; 8] = [6.0, 10.0, 17.0, 27.0, 35.0, 44.0, 52.0, 66.0];

/// Background tones are drawn from these frequencies.
const PALETTE: [f64; 12] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 9.0, 12.0, 14.0, 21.0, 31.0, 40.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub channels: usize,
    pub rate: f64,
    pub duration_s: f64,
    pub recordings: usize,
    /// Class count; `0` generates an unlabeled corpus.
    pub classes: usize,
    /// Window length used when writing the index.
    pub window_s: f64,
    pub noise_uv: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 19,
            rate: 200.0,
            duration_s: 95.0,
            recordings: 8,
            classes: 0,
            window_s: 30.0,
            noise_uv: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.recordings == 0 {
            return Err(Error::Config("synth needs at least one channel and recording".into()));
        }
        if !(self.rate > 0.0) || !(self.duration_s > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::Config("synth rate and durations must be positive".into()));
        }
        if self.classes == 1 || self.classes > CLASS_FREQS.len() {
            return Err(Error::Config(format!(
                "synth.classes must be 0 or 2..={}",
                CLASS_FREQS.len()
            )));
        }
        if CLASS_FREQS[..self.classes].iter().any(|&f| f >= self.rate / 2.0) {
            return Err(Error::Config("class tones must lie below Nyquist".into()));
        }
        if !(0.0..=3.0).contains(&self.noise_uv) {
            return Err(Error::Config("synth.noise_uv must lie in [0, 3]".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        if self.channels <= STANDARD_19.len() {
            STANDARD_19[..self.channels].iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.channels).map(|i| format!("Ch{i}")).collect()
        }
    }

    /// Class of recording `r`.
    pub fn label_of(&self, r: usize) -> Option<usize> {
        (self.classes > 0).then(|| r % self.classes)
    }

    /// Every fourth recording of each class is held out for testing.
    pub fn split_of(&self, r: usize) -> Split {
        let k = self.classes.max(1);
        if (r / k) % 4 == 3 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

impl KeyValue for SynthConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("synth.") else {
            return Ok(false);
        };
        match k {
            "seed" => self.seed = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "rate" => self.rate = parse_value(key, v)?,
            "duration_s" => self.duration_s = parse_value(key, v)?,
            "recordings" => self.recordings = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "window_s" => self.window_s = parse_value(key, v)?,
            "noise_uv" => self.noise_uv = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (format!("synth.{k}"), v);
        vec![
            e("seed", self.seed.to_string()),
            e("channels", self.channels.to_string()),
            e("rate", self.rate.to_string()),
            e("duration_s", self.duration_s.to_string()),
            e("recordings", self.recordings.to_string()),
            e("classes", self.classes.to_string()),
            e("window_s", self.window_s.to_string()),
            e("noise_uv", self.noise_uv.to_string()),
        ]
    }
}

#[derive(Clone, Copy)]
struct Tone {
    freq: f64,
    amp: f64,
    phase: f64,
}

fn render(tones: &[Tone], noise: f64, rate: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let s: f64 = tones
                .iter()
                .map(|w| w.amp * (2.0 * PI * w.freq * t + w.phase).sin())
                .sum();
            let e = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
            s + e
        })
        .collect()
}

/// One recording. Tone amplitudes sum to at most 42 µV.
///
/// Unlabeled recordings mix three shared source tones into every channel
/// with positive gains, plus one weak channel-specific tone, so patches are
/// correlated across channels as well as over time.
pub fn recording(cfg: &SynthConfig, r: usize) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(r as u64));
    let n = (cfg.duration_s * cfg.rate).round() as usize;
    let label = cfg.label_of(r);
    let sources: Vec<Tone> = match label {
        Some(_) => Vec::new(),
        None => (0..3).map(|_| random_tone(&mut rng, 6.0..12.0)).collect(),
    };
    let mut samples = Vec::with_capacity(cfg.channels);
    for _ in 0..cfg.channels {
        let mut tones = Vec::new();
        match label {
            Some(k) => {
                tones.push(Tone {
                    freq: CLASS_FREQS[k],
                    amp: rng.gen_range(20.0..28.0),
                    phase: rng.gen_range(0.0..2.0 * PI),
                });
                for _ in 0..2 {
                    tones.push(random_tone(&mut rng, 3.0..7.0));
                }
            }
            None => {
                for s in &sources {
                    tones.push(Tone {
                        amp: s.amp * rng.gen_range(0.6..1.0),
                        ..*s
                    });
                }
                tones.push(random_tone(&mut rng, 2.0..4.0));
            }
        }
        samples.push(render(&tones, cfg.noise_uv, cfg.rate, n, &mut rng));
    }
    Recording::new(format!("synth{r:04}"), cfg.labels(), cfg.rate, samples)
}

fn random_tone(rng: &mut ChaCha8Rng, amp: std::ops::Range<f64>) -> Tone {
    Tone {
        freq: PALETTE[rng.gen_range(0..PALETTE.len())],
        amp: rng.gen_range(amp),
        phase: rng.gen_range(0.0..2.0 * PI),
    }
}

/// The whole corpus, in recording order.
pub fn corpus(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    (0..cfg.recordings).map(|r| recording(cfg, r)).collect()
}

/// Index rows for a class-mode corpus whose recordings are stored as
/// `<id>.drf` next to the index.
pub fn index_entries(cfg: &SynthConfig) -> Vec<IndexEntry> {
    let windows = (cfg.duration_s / cfg.window_s).floor() as usize;
    let mut out = Vec::new();
    for r in 0..cfg.recordings {
        let Some(label) = cfg.label_of(r) else { continue };
        for w in 0..windows {
            out.push(IndexEntry {
                recording: PathBuf::from(format!("synth{r:04}.drf")),
                start_s: w as f64 * cfg.window_s,
                label,
                split: cfg.split_of(r),
            });
        }
    }
    out
}

/// Preprocess a class-mode corpus in memory into train and test sets,
/// using the same split rule as [`index_entries`].
pub fn labeled_split(cfg: &SynthConfig, prep: &PrepConfig) -> Result<(LabeledSet, LabeledSet)> {
    if cfg.classes == 0 {
        return Err(Error::Config("labeled_split needs synth.classes > 0".into()));
    }
    let (mut train, mut test) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for (r, rec) in corpus(cfg)?.iter().enumerate() {
        let label = cfg.label_of(r).expect("class mode");
        let side = match cfg.split_of(r) {
            Split::Test => &mut test,
            _ => &mut train,
        };
        for g in preprocess(rec, prep)? {
            side.0.push(g.patches);
            side.1.push(label);
        }
    }
    Ok((
        LabeledSet::new(train.0, train.1, cfg.classes)?,
        LabeledSet::new(test.0, test.1, cfg.classes)?,
    ))
}
