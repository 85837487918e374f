//! Per-patch embedding: a small strided CNN over the 200 raw samples,
//! plus the DFT magnitude of the CNN output.

use std::sync::Arc;

use super::config::ModelConfig;
use super::layers::{Fwd, Init, Linear, Norm};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::signal::PATCH_LEN;
use crate::tensor::Tensor;

/// Raw patches are in µV; this brings typical EEG to order one.
pub const INPUT_SCALE: f64 = 0.01;
const STRIDE: usize = 2;

#[derive(Clone, Debug)]
struct ConvStage {
    kernel: ParamId,
    norm: Norm,
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    stages: Vec<ConvStage>,
    kernel: usize,
    /// Flattened conv output -> D, or raw patch -> D without the CNN.
    proj: Linear,
    pub mask_token: ParamId,
    pub spectral: bool,
    d: usize,
}

/// Output length of one padded, strided conv stage.
pub fn conv_out_len(len: usize, kernel: usize) -> usize {
    (len + 2 * (kernel / 2) - kernel) / STRIDE + 1
}

impl PatchEncoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut stages = Vec::new();
        let mut flat = PATCH_LEN;
        if cfg.cnn_encoding {
            let mut c_in = 1;
            let mut len = PATCH_LEN;
            for (i, &c_out) in cfg.cnn_channels.iter().enumerate() {
                let fan_in = cfg.cnn_kernel * c_in;
                stages.push(ConvStage {
                    kernel: init.weight(
                        &format!("patch.conv{i}.kernel"),
                        &[cfg.cnn_kernel, c_in, c_out],
                        fan_in,
                    ),
                    norm: init.norm(&format!("patch.conv{i}.norm"), c_out),
                });
                c_in = c_out;
                len = conv_out_len(len, cfg.cnn_kernel);
            }
            flat = len * c_in;
        }
        Self {
            stages,
            kernel: cfg.cnn_kernel,
            proj: init.linear("patch.proj", flat, d, true),
            mask_token: init.small("patch.mask_token", &[d], 0.02, 1.0),
            spectral: cfg.spectral,
            d,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    /// Feature path without the spectral addend: `[M, 200] -> [M, D]`.
    pub fn features(&self, f: &mut Fwd, patches: &Var) -> Result<Var> {
        let s = patches.shape();
        if s.len() != 2 || s[1] != PATCH_LEN {
            return Err(Error::shape(
                "patch encoder",
                format!("expected [M, {PATCH_LEN}], got {s:?}"),
            ));
        }
        let m = s[0];
        let mut x = f.tape.scale(patches, INPUT_SCALE)?;
        if !self.stages.is_empty() {
            x = f.tape.reshape(&x, &[m, PATCH_LEN, 1])?;
            for st in &self.stages {
                let k = f.p(st.kernel);
                x = f.tape.conv1d(&x, &k, STRIDE, self.kernel / 2)?;
                x = st.norm.forward(f, &x)?;
                x = f.tape.gelu(&x)?;
            }
            let flat = x.shape()[1] * x.shape()[2];
            x = f.tape.reshape(&x, &[m, flat])?;
        }
        self.proj.forward(f, &x)
    }

    /// `features + |DFT(features)|` (or features alone with the spectral
    /// path off).
    pub fn encode_patches(&self, f: &mut Fwd, patches: &Var) -> Result<Var> {
        let h = self.features(f, patches)?;
        if !self.spectral {
            return Ok(h);
        }
        let spec = f.tape.dft_magnitude(&h)?;
        f.tape.add(&h, &spec)
    }

    /// Embed a `[C, N, 200]` grid into `[C*N, D]` token rows. Masked cells
    /// get the mask token and their samples are never read.
    pub fn encode_grid(&self, f: &mut Fwd, grid: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let s = grid.shape();
        if s.len() != 3 || s[2] != PATCH_LEN {
            return Err(Error::shape(
                "encode_grid",
                format!("expected [C, N, {PATCH_LEN}], got {s:?}"),
            ));
        }
        let cells = s[0] * s[1];
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != cells => {
                return Err(Error::shape(
                    "encode_grid",
                    format!("mask has {} cells, grid has {cells}", m.len()),
                ))
            }
            Some(m) => m.to_vec(),
            None => vec![false; cells],
        };
        let mut rows = Vec::new();
        for (cell, &masked) in mask.iter().enumerate() {
            if !masked {
                rows.extend_from_slice(&grid.data()[cell * PATCH_LEN..(cell + 1) * PATCH_LEN]);
            }
        }
        let kept = cells - mask.iter().filter(|&&m| m).count();
        let enc = if kept > 0 {
            let x = Var::constant(Tensor::new(&[kept, PATCH_LEN], rows)?);
            self.encode_patches(f, &x)?
        } else {
            Var::constant(Tensor::zeros(&[0, self.d]))
        };
        let token = f.p(self.mask_token);
        f.tape.fill_masked(&enc, &token, &Arc::new(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::dft::DftPlan;
    use crate::model::config::InitMode;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, PatchEncoder) {
        let mut store = ParamStore::new();
        let enc = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(3),
                mode: InitMode::Dense,
            };
            PatchEncoder::new(&mut init, cfg)
        };
        (store, enc)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            cnn_channels: vec![4, 6, 3],
            ..ModelConfig::default()
        }
    }

    fn random_grid(c: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * n * PATCH_LEN)
            .map(|_| rng.gen_range(-80.0..80.0))
            .collect();
        Tensor::new(&[c, n, PATCH_LEN], data).unwrap()
    }

    fn eval<T>(store: &ParamStore, body: impl FnOnce(&mut Fwd) -> Result<T>) -> T {
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, store);
        body(&mut f).unwrap()
    }

    #[test]
    fn default_stack_lengths() {
        let mut len = PATCH_LEN;
        let mut lens = vec![];
        for _ in 0..3 {
            len = conv_out_len(len, 7);
            lens.push(len);
        }
        assert_eq!(lens, [100, 50, 25]);
        let cfg = ModelConfig::default();
        assert_eq!(25 * cfg.cnn_channels[2], cfg.d_model);
    }

    #[test]
    fn spectral_addend_is_dft_magnitude() {
        let cfg = small();
        let (store, enc) = build(&cfg);
        let g = random_grid(1, 3, 1);
        let x = Var::constant(g.clone().reshape(&[3, PATCH_LEN]).unwrap());
        let (h, out) = eval(&store, |f| {
            Ok((enc.features(f, &x)?, enc.encode_patches(f, &x)?))
        });
        // O(L^2) oracle straight from the definition.
        let d = cfg.d_model;
        for r in 0..3 {
            let row = h.value().row(r);
            for k in 0..d {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in row.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / d as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                let want = row[k] + re.hypot(im);
                assert!((out.value().row(r)[k] - want).abs() < 1e-9);
            }
        }
        assert_eq!(DftPlan::new(d).len(), d);
    }

    #[test]
    fn spectral_off_is_features() {
        let cfg = ModelConfig {
            spectral: false,
            ..small()
        };
        let (store, enc) = build(&cfg);
        let x = Var::constant(random_grid(1, 2, 2).reshape(&[2, PATCH_LEN]).unwrap());
        let (h, out) = eval(&store, |f| {
            Ok((enc.features(f, &x)?, enc.encode_patches(f, &x)?))
        });
        assert_eq!(h.value(), out.value());
    }

    #[test]
    fn zero_patch_with_zero_offsets_embeds_to_zero() {
        let mut store = ParamStore::new();
        let enc = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(0),
                mode: InitMode::Standard,
            };
            PatchEncoder::new(&mut init, &small())
        };
        let x = Var::constant(Tensor::zeros(&[2, PATCH_LEN]));
        let out = eval(&store, |f| enc.encode_patches(f, &x));
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn without_cnn_is_a_linear_map() {
        let cfg = ModelConfig {
            cnn_encoding: false,
            spectral: false,
            ..small()
        };
        let (store, enc) = build(&cfg);
        let a = random_grid(1, 1, 4).reshape(&[1, PATCH_LEN]).unwrap();
        let b = random_grid(1, 1, 5).reshape(&[1, PATCH_LEN]).unwrap();
        let sum = {
            let mut s = a.clone();
            s.add_assign(&b);
            s
        };
        let bias = store.get(enc.proj.b.unwrap()).clone();
        let run = |t: &Tensor| eval(&store, |f| enc.encode_patches(f, &Var::constant(t.clone())));
        let (fa, fb, fs) = (run(&a), run(&b), run(&sum));
        for k in 0..cfg.d_model {
            let lhs = fs.value().data()[k] + bias.data()[k];
            let rhs = fa.value().data()[k] + fb.value().data()[k];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_cells_get_the_token() {
        let cfg = small();
        let (store, enc) = build(&cfg);
        let g = random_grid(2, 3, 6);
        let token = store.get(enc.mask_token).clone();
        let all = eval(&store, |f| enc.encode_grid(f, &g, Some(&[true; 6])));
        for r in 0..6 {
            assert_eq!(all.value().row(r), token.data());
        }
        let mask = [false, true, false, false, false, true];
        let part = eval(&store, |f| enc.encode_grid(f, &g, Some(&mask)));
        let none = eval(&store, |f| enc.encode_grid(f, &g, None));
        for r in 0..6 {
            let want = if mask[r] {
                token.data()
            } else {
                none.value().row(r)
            };
            assert_eq!(part.value().row(r), want);
        }
    }

    #[test]
    fn masked_samples_are_not_read() {
        let cfg = small();
        let (store, enc) = build(&cfg);
        let g = random_grid(1, 2, 7);
        let mut poisoned = g.clone();
        poisoned.data_mut()[..PATCH_LEN].fill(f64::NAN);
        let mask = [true, false];
        let a = eval(&store, |f| enc.encode_grid(f, &g, Some(&mask)));
        let b = eval(&store, |f| enc.encode_grid(f, &poisoned, Some(&mask)));
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn channel_permutation_moves_rows() {
        let cfg = small();
        let (store, enc) = build(&cfg);
        let (c, n) = (4, 2);
        let g = random_grid(c, n, 8);
        let mask: Vec<bool> = (0..c * n).map(|i| i % 3 == 0).collect();
        let perm = [2, 0, 3, 1];
        let mut pg = Vec::new();
        let mut pm = Vec::new();
        for &src in &perm {
            pg.extend_from_slice(&g.data()[src * n * PATCH_LEN..(src + 1) * n * PATCH_LEN]);
            pm.extend_from_slice(&mask[src * n..(src + 1) * n]);
        }
        let pg = Tensor::new(&[c, n, PATCH_LEN], pg).unwrap();
        let base = eval(&store, |f| enc.encode_grid(f, &g, Some(&mask)));
        let moved = eval(&store, |f| enc.encode_grid(f, &pg, Some(&pm)));
        for (i, &src) in perm.iter().enumerate() {
            for t in 0..n {
                assert_eq!(moved.value().row(i * n + t), base.value().row(src * n + t));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (store, enc) = build(&small());
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, &store);
        let bad = Var::constant(Tensor::zeros(&[2, 199]));
        assert!(enc.encode_patches(&mut f, &bad).is_err());
        let g = Tensor::zeros(&[2, 2, PATCH_LEN]);
        assert!(enc.encode_grid(&mut f, &g, Some(&[false; 3])).is_err());
    }
}
