use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guards the per-patch standardisation of flat patches.
pub const ZSCORE_EPS: f64 = 1e-6;

/// Standardise every row to zero mean and unit variance.
pub fn zscore_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row = t.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + ZSCORE_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Mean squared error between predicted rows and standardised target rows,
/// over masked rows only. `None` when nothing is masked.
pub fn masked_mse(
    tape: &mut Tape,
    pred: &Var,
    target: &Tensor,
    mask: &[bool],
) -> Result<Option<Var>> {
    let s = pred.shape();
    if s.len() != 2 || target.shape() != s || mask.len() != s[0] {
        return Err(Error::shape(
            "masked_mse",
            format!("pred {s:?}, target {:?}, mask {}", target.shape(), mask.len()),
        ));
    }
    let idx: Vec<usize> = (0..s[0]).filter(|&r| mask[r]).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let p = s[1];
    let mut rows = Vec::with_capacity(idx.len() * p);
    for &r in &idx {
        rows.extend_from_slice(target.row(r));
    }
    let tgt = zscore_rows(&Tensor::new(&[idx.len(), p], rows)?);
    let n = (idx.len() * p) as f64;
    let picked = tape.gather_rows(pred, &Arc::new(idx))?;
    let diff = tape.sub(&picked, &Var::constant(tgt))?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq)?;
    Ok(Some(tape.scale(&total, 1.0 / n)?))
}

/// Smoothed targets: `(1 - eps) * onehot + eps / K`.
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[label] += 1.0 - eps;
    t
}

/// Cross-entropy of `[1, K]` logits against smoothed targets.
pub fn smoothed_cross_entropy(tape: &mut Tape, logits: &Var, label: usize, eps: f64) -> Result<Var> {
    let k = logits.value().last_dim();
    if label >= k {
        return Err(Error::invalid(format!("label {label} >= {k} classes")));
    }
    let lp = tape.log_softmax(logits)?;
    let t = Tensor::new(logits.shape(), smoothed_targets(label, k, eps))?;
    let w = tape.mul_const(&lp, Arc::new(t))?;
    let s = tape.sum(&w)?;
    tape.scale(&s, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_of_constant_is_zero() {
        let z = zscore_rows(&Tensor::full(&[2, 5], 7.0));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let z = zscore_rows(&Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        assert!((z.data()[0] + 1.0).abs() < 1e-6 && (z.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_gives_no_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[3, 4]));
        assert!(masked_mse(&mut tape, &p, &Tensor::zeros(&[3, 4]), &[false; 3])
            .unwrap()
            .is_none());
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let target = Tensor::new(&[2, 4], vec![1., 2., 3., 4., 0., 5., 0., 5.]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(zscore_rows(&target));
        let l = masked_mse(&mut tape, &p, &target, &[true, true]).unwrap().unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn unmasked_rows_get_exactly_zero_gradient() {
        let target = Tensor::new(&[3, 2], vec![1., 2., 3., 5., 7., 11.]).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[3, 2], vec![0.3, -0.1, 2.0, 9.0, 0.5, 0.25]).unwrap());
        let l = masked_mse(&mut tape, &p, &target, &[true, false, true])
            .unwrap()
            .unwrap();
        let g = tape.backward(&l).unwrap();
        let g = g.wrt(&p).unwrap();
        assert_eq!(&g.data()[2..4], &[0.0, 0.0]);
        assert!(g.data()[0] != 0.0);
    }

    #[test]
    fn smoothing_convention() {
        let t = smoothed_targets(2, 4, 0.1);
        assert_eq!(t, vec![0.025, 0.025, 0.925, 0.025]);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let ce = smoothed_cross_entropy(&mut tape, &l, 0, 0.1).unwrap();
        assert!((ce.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(smoothed_cross_entropy(&mut tape, &l, 2, 0.1).is_err());
    }
}
