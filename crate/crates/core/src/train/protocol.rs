use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Fwd, Model};
use crate::perm::{inverse, permute_blocks, permute_tensor, random, validate};
use crate::tensor::Tensor;

use super::metrics::{compute_metrics, Metrics};
use super::LabeledSet;

/// Whether channels are shuffled at the encoder boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PermCondition {
    #[default]
    Intact,
    Permute,
}

impl fmt::Display for PermCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intact => "intact",
            Self::Permute => "permute",
        })
    }
}

impl FromStr for PermCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intact" => Ok(Self::Intact),
            "permute" => Ok(Self::Permute),
            _ => Err(Error::Config(format!("unknown permutation condition `{s}`"))),
        }
    }
}

/// The permutation a run with `seed` applies to `c`-channel inputs.
pub fn run_permutation(seed: u64, c: usize) -> Vec<usize> {
    random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e37), c)
}

impl PermCondition {
    pub fn permutation(self, seed: u64, c: usize) -> Option<Vec<usize>> {
        (self == Self::Permute).then(|| run_permutation(seed, c))
    }
}

/// Encode `grid` with its channels reordered by `perm`, then restore the
/// original token order. Output row `c * N + n` always belongs to input
/// channel `c`.
pub fn encode_permuted(
    model: &Model,
    f: &mut Fwd,
    grid: &Tensor,
    mask: Option<&[bool]>,
    perm: Option<&[usize]>,
) -> Result<Var> {
    let Some(perm) = perm else {
        return model.encoder.forward(f, grid, mask);
    };
    validate(perm)?;
    let (c, n) = (grid.shape()[0], grid.shape().get(1).copied().unwrap_or(0));
    if perm.len() != c {
        return Err(Error::invalid(format!(
            "permutation of {} channels for a {c}-channel grid",
            perm.len()
        )));
    }
    let g = permute_tensor(grid, perm)?;
    let m = mask.map(|m| permute_blocks(m, perm));
    let z = model.encoder.forward(f, &g, m.as_deref())?;
    let rows: Vec<usize> = (0..c * n).collect();
    let back = Arc::new(permute_blocks(&rows, &inverse(perm)));
    f.tape.gather_rows(&z, &back)
}

/// Class logits `[1, K]` through the encoder boundary permutation.
pub fn logits(model: &Model, f: &mut Fwd, grid: &Tensor, perm: Option<&[usize]>) -> Result<Var> {
    let head = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no classification head"))?;
    let z = encode_permuted(model, f, grid, None, perm)?;
    head.forward(f, &z)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub struct Evaluation {
    pub logits: Vec<Tensor>,
    pub predictions: Vec<usize>,
    pub metrics: Metrics,
}

/// Evaluate `set` with every grid passed through `perm` (or intact).
pub fn evaluate(model: &Model, set: &LabeledSet, perm: Option<&[usize]>) -> Result<Evaluation> {
    let mut out = Vec::with_capacity(set.len());
    let mut pred = Vec::with_capacity(set.len());
    for g in &set.grids {
        let mut tape = Tape::inference();
        let mut f = Fwd::eval(&mut tape, &model.store);
        let l = logits(model, &mut f, g, perm)?.value().clone();
        pred.push(argmax(l.data()));
        out.push(l);
    }
    let metrics = compute_metrics(&pred, &set.labels, set.classes)?;
    Ok(Evaluation {
        logits: out,
        predictions: pred,
        metrics,
    })
}

/// Evaluate under the run's fixed permutation for `condition`.
pub fn permutation_protocol(
    model: &Model,
    set: &LabeledSet,
    condition: PermCondition,
    seed: u64,
) -> Result<Evaluation> {
    let c = set.channels()?;
    let perm = condition.permutation(seed, c);
    evaluate(model, set, perm.as_deref())
}
