use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::config::InitMode;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Everything a forward pass needs: where to record, which parameters,
/// and a dropout RNG when training.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            rng: None,
        }
    }

    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape,
            store,
            rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, x: &Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        // Drop when a uniform u32 falls below rate * 2^32.
        let cut = (rate * 4_294_967_296.0) as u64;
        let mask: Vec<f64> = (0..x.value().numel())
            .map(|_| if u64::from(rng.next_u32()) < cut { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(x.shape(), mask)?;
        self.tape.mul_const(x, Arc::new(mask))
    }
}

/// Draws initial parameter values.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
    pub mode: InitMode,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    self.rng.gen_range(-bound..bound)
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store.insert(name, t)
    }

    /// Weight with fan-in scaling.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = match self.mode {
            InitMode::Standard => 1.0 / (fan_in as f64).sqrt(),
            InitMode::Dense => (3.0 / fan_in as f64).sqrt(),
        };
        let t = self.uniform(shape, bound);
        self.add(name, t)
    }

    /// Offset vector: zero normally, random in dense mode.
    pub fn offset(&mut self, name: &str, n: usize, dense_bound: f64) -> ParamId {
        let bound = match self.mode {
            InitMode::Standard => 0.0,
            InitMode::Dense => dense_bound,
        };
        let t = self.uniform(&[n], bound);
        self.add(name, t)
    }

    /// Small random values in both modes (embeddings, tokens).
    pub fn small(&mut self, name: &str, shape: &[usize], standard: f64, dense: f64) -> ParamId {
        let bound = match self.mode {
            InitMode::Standard => standard,
            InitMode::Dense => dense,
        };
        let t = self.uniform(shape, bound);
        self.add(name, t)
    }

    /// Weight that starts at zero unless dense.
    pub fn zero_weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        match self.mode {
            InitMode::Standard => self.add(name, Tensor::zeros(shape)),
            InitMode::Dense => self.weight(name, shape, fan_in),
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        let (gain, bias) = match self.mode {
            InitMode::Standard => (Tensor::ones(&[d]), Tensor::zeros(&[d])),
            InitMode::Dense => {
                let g = self.uniform(&[d], 0.2).map(|v| 1.0 + v);
                (g, self.uniform(&[d], 0.2))
            }
        };
        Norm {
            gain: self.add(&format!("{name}.gain"), gain),
            bias: self.add(&format!("{name}.bias"), bias),
        }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            w: self.weight(&format!("{name}.weight"), &[d_in, d_out], d_in),
            b: bias.then(|| self.offset(&format!("{name}.bias"), d_out, 0.2)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, f: &mut Fwd, x: &Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.tape.linear(x, &w, b.as_ref())
    }

    pub fn out_dim(&self, f: &Fwd) -> usize {
        f.store.get(self.w).shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward(&self, f: &mut Fwd, x: &Var) -> Result<Var> {
        let g = f.p(self.gain);
        let b = f.p(self.bias);
        f.tape.layernorm(x, &g, &b)
    }
}
