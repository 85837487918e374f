//! IIR filtering as cascades of second-order sections, run forward and
//! backward for zero phase.

use std::f64::consts::PI;

use super::Recording;
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_NOTCH_Q: f64 = 30.0;

/// Second-order section with `a0` normalised to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalised(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Complex response magnitude at `freq` for sample rate `fs`.
    pub fn gain_at(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        num.0.hypot(num.1) / den.0.hypot(den.1)
    }

    /// Transposed direct-form-II state after an infinitely long unit step.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }
}

fn check_cutoff(what: &str, f: f64, fs: f64) -> Result<()> {
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(Error::invalid(format!(
            "{what} {f} Hz must lie in (0, {}) for sample rate {fs} Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(Error::invalid(format!("filter order must be even and > 0, got {order}")));
    }
    Ok(())
}

/// Q of each conjugate pole pair of an analog Butterworth prototype.
fn butterworth_qs(order: usize) -> impl Iterator<Item = f64> {
    (0..order / 2).map(move |k| {
        let phi = PI * (2 * k + 1) as f64 / (2 * order) as f64;
        1.0 / (2.0 * phi.cos())
    })
}

/// Bilinear-transform Butterworth low-pass, prewarped at `cutoff`.
pub fn butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Biquad>> {
    check_order(order)?;
    check_cutoff("low-pass cutoff", cutoff, fs)?;
    let w0 = 2.0 * PI * cutoff / fs;
    let (cw, sw) = (w0.cos(), w0.sin());
    Ok(butterworth_qs(order)
        .map(|q| {
            let alpha = sw / (2.0 * q);
            let b0 = (1.0 - cw) / 2.0;
            Biquad::normalised([b0, 1.0 - cw, b0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
        })
        .collect())
}

/// Bilinear-transform Butterworth high-pass, prewarped at `cutoff`.
pub fn butterworth_highpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Biquad>> {
    check_order(order)?;
    check_cutoff("high-pass cutoff", cutoff, fs)?;
    let w0 = 2.0 * PI * cutoff / fs;
    let (cw, sw) = (w0.cos(), w0.sin());
    Ok(butterworth_qs(order)
        .map(|q| {
            let alpha = sw / (2.0 * q);
            let b0 = (1.0 + cw) / 2.0;
            Biquad::normalised([b0, -(1.0 + cw), b0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
        })
        .collect())
}

/// Second-order notch at `f0` with quality factor `q` (-3 dB width f0/q).
pub fn notch_section(f0: f64, q: f64, fs: f64) -> Result<Biquad> {
    check_cutoff("notch frequency", f0, fs)?;
    if !(q > 0.0) {
        return Err(Error::invalid(format!("notch Q must be > 0, got {q}")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Biquad::normalised(
        [gain, -2.0 * gain * c, gain],
        [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
    ))
}

fn run_sections(sos: &[Biquad], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    // Start each section in the steady state for a constant input equal
    // to the first sample, which suppresses the start-up transient.
    let mut scale = x0;
    for s in sos {
        let [mut z1, mut z2] = s.step_state().map(|v| v * scale);
        for v in x.iter_mut() {
            let xi = *v;
            let y = s.b[0] * xi + z1;
            z1 = s.b[1] * xi - s.a[0] * y + z2;
            z2 = s.b[2] * xi - s.a[1] * y;
            *v = y;
        }
        scale *= s.dc_gain();
    }
}

/// Zero-phase forward-backward filtering with odd-symmetric edge
/// extension of `padlen` samples (clamped to `len - 1`).
pub fn filtfilt(sos: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    run_sections(sos, &mut ext);
    ext.reverse();
    run_sections(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn per_channel(rec: &Recording, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Recording> {
    let samples = rec.samples().iter().map(|c| f(c)).collect();
    rec.with_samples(rec.sample_rate(), samples)
}

/// Edge padding long enough for the slowest transient to settle.
fn padlen_for(fs: f64, narrowest_hz: f64) -> usize {
    (3.0 * fs / narrowest_hz).ceil() as usize
}

/// Order-4 Butterworth band-pass (high-pass then low-pass), zero phase.
pub fn bandpass(rec: &Recording, low: f64, high: f64) -> Result<Recording> {
    bandpass_order(rec, low, high, DEFAULT_ORDER)
}

pub fn bandpass_order(rec: &Recording, low: f64, high: f64, order: usize) -> Result<Recording> {
    let fs = rec.sample_rate();
    if !(low < high) {
        return Err(Error::invalid(format!("band low {low} must be below high {high}")));
    }
    let mut sos = butterworth_highpass(order, low, fs)?;
    sos.extend(butterworth_lowpass(order, high, fs)?);
    let pad = padlen_for(fs, low);
    per_channel(rec, |c| filtfilt(&sos, c, pad))
}

/// Q = 30 notch at `f0`, zero phase.
pub fn notch(rec: &Recording, f0: f64) -> Result<Recording> {
    notch_q(rec, f0, DEFAULT_NOTCH_Q)
}

pub fn notch_q(rec: &Recording, f0: f64, q: f64) -> Result<Recording> {
    let fs = rec.sample_rate();
    let sos = [notch_section(f0, q, fs)?];
    let pad = padlen_for(fs, f0 / q);
    per_channel(rec, |c| filtfilt(&sos, c, pad))
}
