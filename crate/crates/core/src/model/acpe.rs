//! Convolutional positional encoding over the (channel, time) grid. The
//! channel axis is treated as spatially ordered, so the result depends on
//! channel order and the channel count is fixed at construction.

use super::config::ModelConfig;
use super::layers::{Fwd, Init};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamId;

#[derive(Clone, Debug)]
pub struct Acpe {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl Acpe {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let (kh, kw) = cfg.acpe_kernel;
        Self {
            kernel: init.weight("acpe.kernel", &[kh, kw, cfg.d_model], kh * kw),
            bias: init.offset("acpe.bias", cfg.d_model, 0.2),
            channels: cfg.acpe_channels,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: &Var, c: usize, n: usize) -> Result<Var> {
        if c != self.channels {
            return Err(Error::invalid(format!(
                "convolutional positional encoding built for {} channels, got {c}",
                self.channels
            )));
        }
        let d = x.shape()[1];
        let grid = f.tape.reshape(x, &[c, n, d])?;
        let k = f.p(self.kernel);
        let pe = f.tape.depthwise_conv2d(&grid, &k)?;
        let pe = f.tape.reshape(&pe, &[c * n, d])?;
        let b = f.p(self.bias);
        f.tape.add_row(&pe, &b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::config::InitMode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize) -> (ParamStore, Acpe) {
        let cfg = ModelConfig {
            d_model: 6,
            acpe_channels: c,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let a = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(5),
                mode: InitMode::Dense,
            };
            Acpe::new(&mut init, &cfg)
        };
        (store, a)
    }

    fn random(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, 6], (0..rows * 6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn run(store: &ParamStore, a: &Acpe, x: &Tensor, c: usize, n: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, store);
        Ok(a.forward(&mut f, &Var::constant(x.clone()), c, n)?
            .value()
            .clone())
    }

    #[test]
    fn zero_kernel_zero_bias_gives_zero() {
        let (mut store, a) = build(3);
        store.set(a.kernel, Tensor::zeros(&[3, 7, 6])).unwrap();
        store.set(a.bias, Tensor::zeros(&[6])).unwrap();
        let pe = run(&store, &a, &random(12, 1), 3, 4).unwrap();
        assert!(pe.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_count_is_fixed() {
        let (store, a) = build(3);
        assert!(run(&store, &a, &random(8, 1), 2, 4).is_err());
    }

    #[test]
    fn not_channel_equivariant() {
        let (store, a) = build(4);
        let n = 9;
        let x = random(4 * n, 2);
        let base = run(&store, &a, &x, 4, n).unwrap();
        let perm = [2, 0, 3, 1];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * n * 6..(p + 1) * n * 6]);
        }
        let got = run(&store, &a, &Tensor::new(&[4 * n, 6], px).unwrap(), 4, n).unwrap();
        let mut gap: f64 = 0.0;
        for (i, &p) in perm.iter().enumerate() {
            for t in 0..n {
                for k in 0..6 {
                    gap = gap.max((got.row(i * n + t)[k] - base.row(p * n + t)[k]).abs());
                }
            }
        }
        assert!(gap > 1e-3, "{gap}");
    }

    #[test]
    fn interior_columns_shift_with_input() {
        let (store, a) = build(2);
        let (n, s, half) = (20, 3, 3);
        let x = random(2 * n, 3);
        let base = run(&store, &a, &x, 2, n).unwrap();
        let m = n - s;
        let mut sx = Vec::new();
        for ch in 0..2 {
            for t in 0..m {
                sx.extend_from_slice(x.row(ch * n + t + s));
            }
        }
        let got = run(&store, &a, &Tensor::new(&[2 * m, 6], sx).unwrap(), 2, m).unwrap();
        for ch in 0..2 {
            for j in half..m - half {
                for k in 0..6 {
                    let diff = got.row(ch * m + j)[k] - base.row(ch * n + j + s)[k];
                    assert!(diff.abs() < 1e-9);
                }
            }
        }
    }
}
