use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{join_list, parse_list, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::model::{Fwd, Model};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};

use super::loss::smoothed_cross_entropy;
use super::protocol::{evaluate, logits, Evaluation, PermCondition};
use super::{accumulate, diverged, LabeledSet};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub condition: PermCondition,
    pub seeds: Vec<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 5e-2,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            condition: PermCondition::Intact,
            seeds: (41..=45).collect(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("finetune.label_smoothing must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("finetune optimizer settings out of range".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("finetune.seeds is empty".into()));
        }
        Ok(())
    }
}

impl KeyValue for FinetuneConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("finetune.") else {
            return Ok(false);
        };
        match k {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "min_lr" => self.min_lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "condition" => self.condition = v.parse()?,
            "seeds" => self.seeds = parse_list(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (format!("finetune.{k}"), v);
        vec![
            e("epochs", self.epochs.to_string()),
            e("batch_size", self.batch_size.to_string()),
            e("lr", self.lr.to_string()),
            e("min_lr", self.min_lr.to_string()),
            e("weight_decay", self.weight_decay.to_string()),
            e("label_smoothing", self.label_smoothing.to_string()),
            e("clip_norm", self.clip_norm.to_string()),
            e("condition", self.condition.to_string()),
            e("seeds", join_list(&self.seeds)),
        ]
    }
}

pub struct FinetuneRun {
    pub seed: u64,
    /// Mean smoothed cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub eval: Evaluation,
}

/// Every class id below `set.classes` must occur at least once.
pub fn check_class_coverage(set: &LabeledSet) -> Result<()> {
    let mut seen = vec![false; set.classes];
    for &l in &set.labels {
        seen[l] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(k) => Err(Error::invalid(format!("class {k} is absent from the training split"))),
        None => Ok(()),
    }
}

/// Train `model`'s classification head and encoder on `train`, then
/// evaluate on `test`. Both go through the run's fixed permutation when the
/// condition is `permute`.
pub fn finetune(
    model: &mut Model,
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let classes = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no classification head"))?
        .classes;
    if train.classes != classes || test.classes != classes {
        return Err(Error::invalid(format!(
            "head has {classes} classes, data has {} / {}",
            train.classes, test.classes
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("finetune"));
    }
    check_class_coverage(train)?;
    let c = train.channels()?;
    if test.channels()? != c {
        return Err(Error::invalid("train and test channel counts differ"));
    }
    let perm = cfg.condition.permutation(seed, c);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        clip_norm: Some(cfg.clip_norm),
        ..AdamWConfig::default()
    });
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        cycle: cfg.epochs,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = sched.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = HashMap::new();
            for &i in batch {
                let mut tape = Tape::new();
                let loss = {
                    let mut f = Fwd::train(&mut tape, &model.store, &mut rng);
                    let r: Result<_> = (|| {
                        let l = logits(model, &mut f, &train.grids[i], perm.as_deref())?;
                        smoothed_cross_entropy(f.tape, &l, train.labels[i], cfg.label_smoothing)
                    })();
                    diverged(step, r)?
                };
                sum += loss.value().item();
                let g = diverged(step, tape.backward(&loss))?;
                accumulate(&mut grads, g.into_params());
            }
            for g in grads.values_mut() {
                g.scale_in_place(1.0 / batch.len() as f64);
            }
            diverged(step, opt.step(&mut model.store, &grads, lr))?;
            step += 1;
        }
        epoch_losses.push(sum / train.len() as f64);
    }
    let eval = evaluate(model, test, perm.as_deref())?;
    Ok(FinetuneRun {
        seed,
        epoch_losses,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitMode, ModelConfig};
    use crate::signal::PATCH_LEN;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            depth: 1,
            ffn_dim: 16,
            cnn_channels: vec![2, 2, 2],
            d_pe: 4,
            pe_heads: 2,
            pe_window: 2,
            init: InitMode::Standard,
            ..ModelConfig::default()
        }
    }

    fn set(labels: Vec<usize>, classes: usize) -> LabeledSet {
        let grids = labels
            .iter()
            .map(|&l| Tensor::full(&[2, 2, PATCH_LEN], l as f64))
            .collect();
        LabeledSet::new(grids, labels, classes).unwrap()
    }

    #[test]
    fn absent_class_is_an_error() {
        let mut m = Model::new(&small(), 1, false, Some(3)).unwrap();
        let cfg = FinetuneConfig {
            epochs: 1,
            ..Default::default()
        };
        let err = finetune(&mut m, &set(vec![0, 1, 0], 3), &set(vec![0, 1, 2], 3), &cfg, 41)
            .err()
            .unwrap();
        assert!(err.to_string().contains("class 2"), "{err}");
    }

    #[test]
    fn one_epoch_runs_and_is_deterministic() {
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let tr = set(vec![0, 1, 0, 1], 2);
        let run = |seed| {
            let mut m = Model::new(&small(), seed, false, Some(2)).unwrap();
            finetune(&mut m, &tr, &tr, &cfg, seed).unwrap()
        };
        let (a, b) = (run(41), run(41));
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.eval.logits, b.eval.logits);
        assert_eq!(a.epoch_losses.len(), 2);
    }

    #[test]
    fn defaults() {
        let c = FinetuneConfig::default();
        assert_eq!((c.epochs, c.batch_size), (50, 64));
        assert_eq!((c.lr, c.weight_decay, c.label_smoothing, c.clip_norm), (1e-4, 5e-2, 0.1, 1.0));
        assert_eq!(c.min_lr, 1e-6);
        assert_eq!(c.seeds, vec![41, 42, 43, 44, 45]);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = FinetuneConfig::default();
        c.set("finetune.seeds", "1,2").unwrap();
        c.set("finetune.condition", "permute").unwrap();
        let mut d = FinetuneConfig::default();
        for (k, v) in c.entries() {
            assert!(d.set(&k, &v).unwrap());
        }
        assert_eq!(c, d);
    }
}
