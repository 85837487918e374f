//! Channel permutations of channel-major data.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Check that `perm` is a bijection on `0..perm.len()`.
pub fn validate(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

pub fn random(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Split `data` into `perm.len()` equal channel blocks; block `i` of the
/// result is block `perm[i]` of the input.
pub fn permute_blocks<T: Clone>(data: &[T], perm: &[usize]) -> Vec<T> {
    let block = data.len() / perm.len().max(1);
    debug_assert_eq!(block * perm.len(), data.len());
    perm.iter()
        .flat_map(|&p| data[p * block..(p + 1) * block].iter().cloned())
        .collect()
}

/// Apply [`permute_blocks`] to a tensor whose leading extent is channel
/// major (a `[C, N, P]` grid or `[C*N, D]` token rows).
pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    validate(perm)?;
    if perm.is_empty() || !t.numel().is_multiple_of(perm.len()) {
        return Err(Error::shape(
            "permute",
            format!("{:?} by {} channels", t.shape(), perm.len()),
        ));
    }
    Tensor::new(t.shape(), permute_blocks(t.data(), perm))
}
