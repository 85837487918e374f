use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::model::{Fwd, Model};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::signal::PATCH_LEN;
use crate::tensor::Tensor;

use super::loss::masked_mse;
use super::mask::MaskPlan;
use super::protocol::{encode_permuted, PermCondition};
use super::{accumulate, diverged};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mask_ratio: f64,
    pub condition: PermCondition,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            mask_ratio: 0.5,
            condition: PermCondition::Intact,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("pretrain.mask_ratio must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("pretrain optimizer settings out of range".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.clip_norm),
            ..AdamWConfig::default()
        })
    }
}

impl KeyValue for PretrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("pretrain.") else {
            return Ok(false);
        };
        match k {
            "steps" => self.steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "min_lr" => self.min_lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_value(key, v)?,
            "condition" => self.condition = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (format!("pretrain.{k}"), v);
        vec![
            e("steps", self.steps.to_string()),
            e("batch_size", self.batch_size.to_string()),
            e("lr", self.lr.to_string()),
            e("min_lr", self.min_lr.to_string()),
            e("weight_decay", self.weight_decay.to_string()),
            e("clip_norm", self.clip_norm.to_string()),
            e("mask_ratio", self.mask_ratio.to_string()),
            e("condition", self.condition.to_string()),
            e("seed", self.seed.to_string()),
        ]
    }
}

/// Per-step masked reconstruction losses.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// One optimizer update on `batch`. Each sample's loss is the mean over its
/// own masked cells; the batch loss averages samples. Returns 0 without an
/// update when nothing is masked.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&Tensor],
    cfg: &PretrainConfig,
    lr: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let head = model
        .recon
        .clone()
        .ok_or_else(|| Error::invalid("model has no reconstruction head"))?;
    if batch.is_empty() {
        return Err(Error::Empty("pretrain"));
    }
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = HashMap::new();
    for grid in batch {
        let s = grid.shape();
        if s.len() != 3 {
            return Err(Error::shape("pretrain", format!("grid shape {s:?}")));
        }
        let (c, n) = (s[0], s[1]);
        let plan = MaskPlan::sample(rng, c * n, cfg.mask_ratio)?;
        if plan.masked() == 0 {
            continue;
        }
        let perm = cfg.condition.permutation(cfg.seed, c);
        let target = (*grid).clone().reshape(&[c * n, PATCH_LEN])?;
        let mut tape = Tape::new();
        let loss = {
            let mut f = Fwd::train(&mut tape, &model.store, rng);
            let r: Result<_> = (|| {
                let z = encode_permuted(model, &mut f, grid, Some(&plan.mask), perm.as_deref())?;
                let pred = head.forward(&mut f, &z)?;
                let l = masked_mse(f.tape, &pred, &target, &plan.mask)?;
                Ok(l.expect("mask is non-empty"))
            })();
            diverged(step, r)?
        };
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {value}"),
            });
        }
        total += value;
        let g = diverged(step, tape.backward(&loss))?;
        accumulate(&mut grads, g.into_params());
    }
    if grads.is_empty() {
        return Ok(0.0);
    }
    for g in grads.values_mut() {
        g.scale_in_place(1.0 / b);
    }
    diverged(step, opt.step(&mut model.store, &grads, lr))?;
    Ok(total / b)
}

/// Train the encoder and reconstruction head for `cfg.steps` updates,
/// cycling through `data` in a freshly shuffled order each pass.
pub fn pretrain(model: &mut Model, data: &[Tensor], cfg: &PretrainConfig) -> Result<PretrainReport> {
    pretrain_with(model, data, cfg, |_, _| {})
}

/// Like [`pretrain`], calling `log(step, loss)` after every update.
pub fn pretrain_with(
    model: &mut Model,
    data: &[Tensor],
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("pretrain"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        cycle: cfg.steps,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let loss = pretrain_step(model, &mut opt, &batch, cfg, sched.lr_at(step), step, &mut rng)?;
        log(step, loss);
        losses.push(loss);
    }
    Ok(PretrainReport { losses })
}
