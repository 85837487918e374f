//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! annealing schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Cosine annealing from `base_lr` to `min_lr` over `cycle` units
/// (steps or epochs, whichever the caller advances).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.cycle == 0 {
            return self.base_lr;
        }
        // Same shape as the closed form of torch's CosineAnnealingLR,
        // repeating after each full cycle.
        let phase = (t % (2 * self.cycle)) as f64 / self.cycle as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * phase).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: HashMap<ParamId, Tensor>,
    second: HashMap<ParamId, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.first.get(&id)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.second.get(&id)
    }

    /// One update at learning rate `lr`. Parameters with no gradient entry
    /// are left untouched (no decay, no moment update).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<ParamId, Tensor>,
        lr: f64,
    ) -> Result<StepStats> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(&id) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!("gradient for `{}` has wrong shape", store.name(id)),
                    ));
                }
            }
        }
        let sq: f64 = ids
            .iter()
            .filter_map(|id| grads.get(id))
            .map(Tensor::sq_norm)
            .sum();
        let grad_norm = sq.sqrt();
        let mut scale = 1.0;
        let mut clipped = false;
        if let Some(max) = self.config.clip_norm {
            if grad_norm > max {
                scale = max / (grad_norm + 1e-6);
                clipped = true;
            }
        }

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let g = g.data();
            let shape = store.get(id).shape().to_vec();
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for i in 0..p.numel() {
                let gi = g[i] * scale;
                let md = &mut m.data_mut()[i];
                *md = c.beta1 * *md + (1.0 - c.beta1) * gi;
                let vd = &mut v.data_mut()[i];
                *vd = c.beta2 * *vd + (1.0 - c.beta2) * gi * gi;
                let m_hat = *md / bc1;
                let v_hat = *vd / bc2;
                let pd = &mut p.data_mut()[i];
                *pd -= lr * c.weight_decay * *pd;
                *pd -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(vec![value]));
        (s, id)
    }

    fn grads(id: ParamId, g: f64) -> HashMap<ParamId, Tensor> {
        HashMap::from([(id, Tensor::from_vec(vec![g]))])
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            clip_norm: None,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        let (mut s, id) = single(0.7);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut s, &grads(id, 0.0), 0.1).unwrap();
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias corrected both to 1 -> step = lr / (1 + eps).
        let (mut s, id) = single(0.0);
        let mut opt = AdamW::new(cfg(0.0));
        opt.step(&mut s, &grads(id, 1.0), 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
        assert!((opt.first_moment(id).unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment(id).unwrap().data()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let (mut s, id) = single(2.0);
        let mut opt = AdamW::new(cfg(0.1));
        opt.step(&mut s, &grads(id, 0.0), 0.1).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let (mut s, id) = single(1.0);
        let mut opt = AdamW::new(cfg(0.0));
        let err = opt.step(&mut s, &grads(id, f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.get(id).data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::from_vec(vec![0.0]));
        let b = s.insert("b", Tensor::from_vec(vec![0.0]));
        let g = HashMap::from([
            (a, Tensor::from_vec(vec![3.0])),
            (b, Tensor::from_vec(vec![4.0])),
        ]);
        let mut opt = AdamW::new(AdamWConfig {
            clip_norm: Some(1.0),
            ..cfg(0.0)
        });
        let stats = opt.step(&mut s, &g, 0.1).unwrap();
        assert!(stats.clipped);
        assert!((stats.grad_norm - 5.0).abs() < 1e-12);
        let m = opt.first_moment(a).unwrap().data()[0];
        assert!((m - 0.1 * 3.0 / (5.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn moments_match_parameter_shape() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros(&[3, 4]));
        let mut opt = AdamW::new(cfg(0.0));
        let g = HashMap::from([(id, Tensor::ones(&[3, 4]))]);
        opt.step(&mut s, &g, 0.1).unwrap();
        assert_eq!(opt.first_moment(id).unwrap().shape(), &[3, 4]);
        assert_eq!(opt.second_moment(id).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let s = CosineSchedule {
            base_lr: 1e-4,
            min_lr: 1e-6,
            cycle: 50,
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(50) - 1e-6).abs() < 1e-18);
        assert!((s.lr_at(25) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-15);
        for t in 0..50 {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
    }
}
