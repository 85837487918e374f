//! Polyphase rational resampling with a Kaiser-windowed sinc low-pass.

use std::f64::consts::PI;

use super::Recording;
use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
/// Filter half-length in units of `max(up, down)` input-rate samples.
const HALF_LEN_FACTOR: usize = 10;
const MAX_DENOMINATOR: u64 = 1000;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `(up, down)` with `up / down ~= target / source`, in lowest terms.
pub fn rational_ratio(source: f64, target: f64) -> Result<(usize, usize)> {
    if !(source > 0.0 && target > 0.0 && source.is_finite() && target.is_finite()) {
        return Err(Error::invalid(format!(
            "sample rates must be > 0, got {source} -> {target}"
        )));
    }
    let is_int = |v: f64| (v - v.round()).abs() < 1e-9 && v.round() <= u32::MAX as f64;
    let (up, down) = if is_int(source) && is_int(target) {
        (target.round() as u64, source.round() as u64)
    } else {
        best_fraction(target / source)
    };
    let g = gcd(up, down);
    Ok(((up / g) as usize, (down / g) as usize))
}

/// Continued-fraction approximation with denominator capped.
fn best_fraction(x: f64) -> (u64, u64) {
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut r = x;
    loop {
        let a = r.floor() as u64;
        let (p2, q2) = (a * p1 + p0, a * q1 + q0);
        if q2 > MAX_DENOMINATOR {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let frac = r - a as f64;
        if frac < 1e-12 {
            break;
        }
        r = 1.0 / frac;
    }
    (p1.max(1), q1.max(1))
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Anti-alias filter at the upsampled rate, cut at the lower Nyquist and
/// scaled to a DC gain of `up`.
fn design(up: usize, down: usize) -> (Vec<f64>, usize) {
    let m = up.max(down);
    let half = HALF_LEN_FACTOR * m;
    let len = 2 * half + 1;
    let fc = 1.0 / m as f64;
    let i0b = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|k| {
            let t = k as f64 - half as f64;
            let r = 2.0 * k as f64 / (len - 1) as f64 - 1.0;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            fc * sinc(fc * t) * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    for v in &mut h {
        *v *= up as f64 / s;
    }
    (h, half)
}

/// Resample one channel by `up / down`. Output length is
/// `round(len * up / down)`.
pub fn resample_channel(x: &[f64], up: usize, down: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty("resample"));
    }
    let out_len = ((n * up) as f64 / down as f64).round() as usize;
    if up == down {
        return Ok(x.to_vec());
    }
    let (h, half) = design(up, down);

    // Odd-symmetric padding; a multiple of `down` input samples maps to a
    // whole number of output samples, which keeps the grids aligned.
    let need = half / up + 2;
    let pad = need.div_ceil(down) * down;
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        let j = i.min(n - 1);
        ext.push(2.0 * x[0] - x[j]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        let j = (n - 1).saturating_sub(i);
        ext.push(2.0 * x[n - 1] - x[j]);
    }
    let offset = pad * up / down;

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Position in the zero-stuffed, filter-delayed stream.
        let t = (m + offset) * down + half;
        // Taps k with (t - k) divisible by up.
        let mut k = t % up;
        let mut acc = 0.0;
        while k < h.len() {
            let idx = (t - k) / up;
            if idx < ext.len() {
                acc += h[k] * ext[idx];
            }
            if k + up > t {
                break;
            }
            k += up;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Resample every channel to `target` Hz. Equal rates pass through
/// unchanged.
pub fn resample(rec: &Recording, target: f64) -> Result<Recording> {
    if rec.is_empty() {
        return Err(Error::Empty("resample"));
    }
    if rec.sample_rate() == target {
        return Ok(rec.clone());
    }
    let (up, down) = rational_ratio(rec.sample_rate(), target)?;
    let samples = rec
        .samples()
        .iter()
        .map(|c| resample_channel(c, up, down))
        .collect::<Result<Vec<_>>>()?;
    rec.with_samples(target, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: Vec<f64>, fs: f64) -> Recording {
        Recording::new("t", vec!["Cz".into()], fs, vec![x]).unwrap()
    }

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn ratio_in_lowest_terms() {
        assert_eq!(rational_ratio(256.0, 200.0).unwrap(), (25, 32));
        assert_eq!(rational_ratio(250.0, 200.0).unwrap(), (4, 5));
        assert_eq!(rational_ratio(100.0, 200.0).unwrap(), (2, 1));
        assert_eq!(rational_ratio(199.5, 200.0).unwrap(), (400, 399));
        assert!(rational_ratio(0.0, 200.0).is_err());
    }

    #[test]
    fn length_follows_ratio() {
        let r = resample(&rec(vec![0.0; 2560], 256.0), 200.0).unwrap();
        assert_eq!(r.len(), 2000);
        assert_eq!(r.sample_rate(), 200.0);
        let r = resample(&rec(vec![1.0; 1001], 256.0), 200.0).unwrap();
        assert_eq!(r.len(), (1001.0f64 * 200.0 / 256.0).round() as usize);
    }

    #[test]
    fn identity_rate_is_bit_exact() {
        let x: Vec<f64> = (0..777).map(|i| (i as f64 * 0.37).sin() * 41.3).collect();
        let r = rec(x, 200.0);
        assert_eq!(resample(&r, 200.0).unwrap(), r);
    }

    #[test]
    fn five_hz_tracks_analytic_samples() {
        let x = sine(5.0, 256.0, 2560);
        let y = resample(&rec(x, 256.0), 200.0).unwrap();
        let want = sine(5.0, 200.0, 2000);
        let c = correlation(&y.samples()[0], &want);
        assert!(c >= 0.999, "{c}");
    }

    #[test]
    fn upsampling_tracks_analytic_samples() {
        let x = sine(3.0, 128.0, 1280);
        let y = resample(&rec(x, 128.0), 200.0).unwrap();
        let want = sine(3.0, 200.0, 2000);
        assert!(correlation(&y.samples()[0], &want) >= 0.999);
    }

    #[test]
    fn constant_is_preserved() {
        let y = resample_channel(&vec![7.5; 600], 25, 32).unwrap();
        assert!(y.iter().all(|v| (v - 7.5).abs() < 1e-3), "{:?}", &y[..5]);
    }

    #[test]
    fn above_new_nyquist_is_suppressed() {
        // 120 Hz at 256 Hz has no place at 200 Hz.
        let x = sine(120.0, 256.0, 2560);
        let y = resample_channel(&x, 25, 32).unwrap();
        let r = (y[200..1800].iter().map(|v| v * v).sum::<f64>() / 1600.0).sqrt();
        assert!(r < 0.05, "{r}");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(resample_channel(&[], 25, 32).is_err());
        let r = Recording::new("e", vec!["Cz".into()], 256.0, vec![vec![]]).unwrap();
        assert!(resample(&r, 200.0).is_err());
    }

    #[test]
    fn kaiser_bessel_reference() {
        // I0(5) = 27.239871823604442...
        assert!((bessel_i0(5.0) - 27.239_871_823_604_442).abs() < 1e-10);
        assert_eq!(bessel_i0(0.0), 1.0);
    }
}
