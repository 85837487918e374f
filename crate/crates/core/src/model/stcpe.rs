//! Sliding-window positional encoding.
//!
//! Tokens are projected down to `d_pe`, one transformer block is applied
//! to every length-`W` time window (all channels at once, window-relative
//! time), the window outputs are summed back onto the positions they
//! cover, and the sum is projected up to `D`. Only valid windows are used,
//! so edge positions receive fewer contributions than interior ones.

use std::ops::Range;
use std::sync::Arc;

use super::attention::{Block, BlockSpec, Tokens};
use super::config::{BlockKind, ModelConfig};
use super::layers::{Fwd, Init, Linear};
use crate::autodiff::{RotaryTable, Var};
use crate::error::{Error, Result};

/// Windows over `n` positions: every valid start, or one short window if
/// `n < w`.
pub fn windows(n: usize, w: usize) -> Vec<Range<usize>> {
    if n < w {
        vec![0..n]
    } else {
        (0..=n - w).map(|s| s..s + w).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Stcpe {
    pub down: Linear,
    pub block: Block,
    pub up: Linear,
    pub window: usize,
    rotary: Arc<RotaryTable>,
}

impl Stcpe {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dp = cfg.d_pe;
        let up = Linear {
            w: init.zero_weight("stcpe.up.weight", &[dp, d], dp),
            b: Some(init.offset("stcpe.up.bias", d, 0.2)),
        };
        Self {
            down: init.linear("stcpe.down", d, dp, true),
            block: Block::new(
                init,
                "stcpe.block",
                BlockSpec {
                    d: dp,
                    heads: cfg.pe_heads,
                    ffn: 4 * dp,
                    dropout: cfg.dropout,
                    kind: BlockKind::Diver,
                    rope: true,
                    channel_bias: true,
                },
            ),
            up,
            window: cfg.pe_window,
            rotary: Arc::new(RotaryTable::new(
                dp / cfg.pe_heads,
                cfg.pe_window,
                cfg.rope_base,
            )),
        }
    }

    /// Positional encoding for token rows `[C*N, D]`.
    pub fn forward(&self, f: &mut Fwd, x: &Var, c: usize, n: usize) -> Result<Var> {
        if c == 0 || n == 0 {
            return Err(Error::Empty("stcpe"));
        }
        if x.shape() != [c * n, self.up.out_dim(f)] {
            return Err(Error::shape(
                "stcpe",
                format!("{:?} for C={c}, N={n}", x.shape()),
            ));
        }
        let z = self.down.forward(f, x)?;
        let mut acc: Option<Var> = None;
        for win in windows(n, self.window) {
            let len = win.len();
            let idx: Arc<Vec<usize>> = Arc::new(
                (0..c)
                    .flat_map(|ch| win.clone().map(move |t| ch * n + t))
                    .collect(),
            );
            let zw = f.tape.gather_rows(&z, &idx)?;
            let out = self
                .block
                .forward(f, &zw, &Tokens::grid(c, len), &self.rotary)?;
            let placed = f.tape.scatter_rows(&out, &idx, c * n)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => f.tape.add(&a, &placed)?,
            });
        }
        let pre = acc.expect("at least one window");
        self.up.forward(f, &pre)
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

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 12,
            heads: 2,
            d_pe: 8,
            pe_heads: 2,
            pe_window: 7,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig, mode: InitMode) -> (ParamStore, Stcpe) {
        let mut store = ParamStore::new();
        let s = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(11),
                mode,
            };
            Stcpe::new(&mut init, cfg)
        };
        (store, s)
    }

    fn random(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn run(store: &ParamStore, s: &Stcpe, x: &Tensor, c: usize, n: usize) -> Tensor {
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, store);
        s.forward(&mut f, &Var::constant(x.clone()), c, n)
            .unwrap()
            .value()
            .clone()
    }

    #[test]
    fn coverage_counts() {
        let (n, w) = (30, 7);
        let wins = windows(n, w);
        assert_eq!(wins.len(), 24);
        let count = |j: usize| wins.iter().filter(|r| r.contains(&j)).count();
        assert_eq!(count(0), 1);
        for j in 6..=23 {
            assert_eq!(count(j), 7);
        }
        for j in 0..n {
            assert_eq!(count(j), (j + 1).min(w).min(n - j).min(n - w + 1));
        }
        assert_eq!(windows(3, 7), vec![0..3]);
    }

    #[test]
    fn single_token_is_one_block_application() {
        let cfg = cfg();
        let (store, s) = build(&cfg, InitMode::Dense);
        let x = random(1, 12, 1);
        let got = run(&store, &s, &x, 1, 1);
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, &store);
        let xv = Var::constant(x);
        let z = s.down.forward(&mut f, &xv).unwrap();
        let b = s
            .block
            .forward(&mut f, &z, &Tokens::grid(1, 1), &s.rotary)
            .unwrap();
        let want = s.up.forward(&mut f, &b).unwrap();
        assert_eq!(&got, want.value());
    }

    #[test]
    fn standard_init_starts_with_zero_encoding() {
        let (store, s) = build(&cfg(), InitMode::Standard);
        let pe = run(&store, &s, &random(2 * 9, 12, 2), 2, 9);
        assert!(pe.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_permutation_equivariant() {
        let cfg = cfg();
        let (store, s) = build(&cfg, InitMode::Dense);
        let (c, n, d) = (4, 10, 12);
        let x = random(c * n, d, 3);
        let base = run(&store, &s, &x, c, n);
        let perm = [3, 1, 0, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * n * d..(p + 1) * n * d]);
        }
        let got = run(&store, &s, &Tensor::new(&[c * n, d], px).unwrap(), c, n);
        for (i, &p) in perm.iter().enumerate() {
            for t in 0..n {
                let a = got.row(i * n + t);
                let b = base.row(p * n + t);
                for k in 0..d {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn interior_translation_equivariant() {
        let cfg = cfg();
        let (store, s) = build(&cfg, InitMode::Dense);
        let (c, n, d, w) = (2, 16, 12, 7);
        let x = random(c * n, d, 4);
        let base = run(&store, &s, &x, c, n);
        for shift in [1, 3] {
            let m = n - shift;
            let mut sx = Vec::new();
            for ch in 0..c {
                for t in 0..m {
                    sx.extend_from_slice(x.row(ch * n + t + shift));
                }
            }
            let got = run(&store, &s, &Tensor::new(&[c * m, d], sx).unwrap(), c, m);
            for ch in 0..c {
                for j in (w - 1)..=(n - shift - w) {
                    let a = got.row(ch * m + j);
                    let b = base.row(ch * n + j + shift);
                    for k in 0..d {
                        assert!((a[k] - b[k]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (store, s) = build(&cfg(), InitMode::Dense);
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, &store);
        let x = Var::constant(Tensor::zeros(&[6, 12]));
        assert!(s.forward(&mut f, &x, 2, 4).is_err());
        assert!(s.forward(&mut f, &x, 0, 6).is_err());
    }
}
