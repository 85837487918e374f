//! Discrete Fourier transform: iterative radix-2 FFT for power-of-two
//! lengths, table-driven direct evaluation otherwise.

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// Precomputed twiddles for one transform length.
#[derive(Clone, Debug)]
pub struct DftPlan {
    len: usize,
    // e^{-2 pi i m / len} for m in 0..len
    twiddles: Vec<Complex>,
}

impl DftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "DFT length must be positive");
        let twiddles = (0..len)
            .map(|m| {
                let a = -2.0 * PI * m as f64 / len as f64;
                Complex::new(a.cos(), a.sin())
            })
            .collect();
        Self { len, twiddles }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_radix2(&self) -> bool {
        self.len.is_power_of_two()
    }

    /// Forward transform `X_k = sum_t x_t e^{-2 pi i k t / L}`.
    pub fn forward(&self, input: &[Complex]) -> Vec<Complex> {
        assert_eq!(input.len(), self.len);
        if self.is_radix2() {
            self.fft_radix2(input)
        } else {
            self.direct(input)
        }
    }

    pub fn forward_real(&self, input: &[f64]) -> Vec<Complex> {
        let c: Vec<Complex> = input.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.forward(&c)
    }

    /// `|DFT(x)|`, full length (conjugate-symmetric for real input).
    pub fn magnitude(&self, input: &[f64]) -> Vec<f64> {
        self.forward_real(input).into_iter().map(Complex::norm).collect()
    }

    fn direct(&self, input: &[Complex]) -> Vec<Complex> {
        let n = self.len;
        (0..n)
            .map(|k| {
                let mut acc = Complex::default();
                let mut idx = 0usize;
                for x in input {
                    let w = self.twiddles[idx];
                    acc.re += x.re * w.re - x.im * w.im;
                    acc.im += x.re * w.im + x.im * w.re;
                    idx += k;
                    if idx >= n {
                        idx -= n;
                    }
                }
                acc
            })
            .collect()
    }

    fn fft_radix2(&self, input: &[Complex]) -> Vec<Complex> {
        let n = self.len;
        let mut a = input.to_vec();
        let bits = n.trailing_zeros();
        if bits > 0 {
            for i in 0..n {
                let j = i.reverse_bits() >> (usize::BITS - bits);
                if j > i {
                    a.swap(i, j);
                }
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for j in 0..half {
                    let w = self.twiddles[j * stride];
                    let u = a[start + j];
                    let v = a[start + j + half].mul(w);
                    a[start + j] = Complex::new(u.re + v.re, u.im + v.im);
                    a[start + j + half] = Complex::new(u.re - v.re, u.im - v.im);
                }
            }
            size *= 2;
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct evaluation with fresh trig calls; shares nothing with the plan.
    fn oracle(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = 2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im -= v * a.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let m = DftPlan::new(8).magnitude(&[1.5; 8]);
        assert!((m[0] - 12.0).abs() < 1e-12);
        assert!(m[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = [0.0; 8];
        x[0] = 1.0;
        let m = DftPlan::new(8).magnitude(&x);
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cosine_peaks_at_its_bins() {
        let n = 200;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * PI * 3.0 * t as f64 / n as f64).cos())
            .collect();
        let m = DftPlan::new(n).magnitude(&x);
        let want = oracle(&x);
        for k in 0..n {
            assert!((m[k] - want[k]).abs() < 1e-9);
            if k == 3 || k == 197 {
                assert!((m[k] - 100.0).abs() < 1e-9);
            } else {
                assert!(m[k].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn radix2_and_direct_agree_with_oracle() {
        for n in [1usize, 2, 3, 7, 16, 64, 100, 128, 200, 256, 512] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) as f64).sin() * 2.0).collect();
            let got = DftPlan::new(n).magnitude(&x);
            let want = oracle(&x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "n={n}: {g} vs {w}");
            }
        }
    }
}
