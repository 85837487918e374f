//! Masked-patch pretraining, classification fine-tuning, metrics and the
//! channel permutation protocol.

mod data;
mod finetune;
mod loss;
mod mask;
mod metrics;
mod pretrain;
mod protocol;

use std::collections::HashMap;

pub use data::{load_labeled, read_index, write_index, IndexEntry, LabeledData, Split};
pub use finetune::{finetune, check_class_coverage, FinetuneConfig, FinetuneRun};
pub use loss::{masked_mse, smoothed_cross_entropy, smoothed_targets, zscore_rows, ZSCORE_EPS};
pub use mask::MaskPlan;
pub use metrics::{
    compute_metrics, summarize, ConfusionMatrix, MeanStd, Metrics, MetricsSummary,
};
pub use pretrain::{pretrain, pretrain_step, pretrain_with, PretrainConfig, PretrainReport};
pub use protocol::{
    argmax, encode_permuted, evaluate, logits, permutation_protocol, run_permutation,
    Evaluation, PermCondition,
};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::signal::PATCH_LEN;
use crate::tensor::Tensor;

/// Grids `[C, N, 200]` with integer class labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub grids: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(grids: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if grids.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} grids for {} labels",
                grids.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} >= {classes} classes")));
        }
        for g in &grids {
            let s = g.shape();
            if s.len() != 3 || s[2] != PATCH_LEN {
                return Err(Error::shape("labeled set", format!("grid shape {s:?}")));
            }
        }
        Ok(Self {
            grids,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// The common channel count of every grid.
    pub fn channels(&self) -> Result<usize> {
        let c = self.grids.first().ok_or(Error::Empty("labeled set"))?.shape()[0];
        if self.grids.iter().any(|g| g.shape()[0] != c) {
            return Err(Error::invalid("grids have differing channel counts"));
        }
        Ok(c)
    }
}

/// Sum per-sample parameter gradients in sample order.
pub(crate) fn accumulate(acc: &mut HashMap<ParamId, Tensor>, grads: HashMap<ParamId, Tensor>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

/// Report numerical blow-ups as a divergence at `step`.
pub(crate) fn diverged<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
            step,
            detail: e.to_string(),
        },
        other => other,
    })
}
