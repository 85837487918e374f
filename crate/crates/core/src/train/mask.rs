use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Which cells of a `C x N` grid are hidden from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    pub mask: Vec<bool>,
}

impl MaskPlan {
    /// Hide `round(ratio * cells)` cells drawn uniformly without
    /// replacement.
    pub fn sample(rng: &mut impl Rng, cells: usize, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let k = (ratio * cells as f64).round() as usize;
        let mut mask = vec![false; cells];
        for i in sample(rng, cells, k) {
            mask[i] = true;
        }
        Ok(Self { ratio, mask })
    }

    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
