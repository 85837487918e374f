use std::fmt;

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(pred: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Empty("metrics"));
        }
        if pred.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &t) in pred.iter().zip(labels) {
            if p >= classes || t >= classes {
                return Err(Error::invalid(format!("class id out of range 0..{classes}")));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k < 2 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square with K >= 2"));
        }
        if counts.iter().flatten().all(|&c| c == 0) {
            return Err(Error::Empty("metrics"));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Mean recall over classes that occur in the labels.
    pub fn balanced_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes())
            .filter(|&k| self.support(k) > 0)
            .map(|k| self.counts[k][k] as f64 / self.support(k) as f64)
            .collect();
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        let po = (0..self.classes()).map(|k| self.counts[k][k]).sum::<u64>() as f64 / n;
        let pe = (0..self.classes())
            .map(|k| self.support(k) as f64 * self.predicted(k) as f64)
            .sum::<f64>()
            / (n * n);
        if 1.0 - pe == 0.0 {
            // Degenerate marginals: agreement is either total or absent.
            return if po == 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    /// Support-weighted F1; a class with no predictions scores 0.
    pub fn weighted_f1(&self) -> f64 {
        let n = self.total() as f64;
        (0..self.classes())
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let denom = (self.support(k) + self.predicted(k)) as f64;
                let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
                f1 * self.support(k) as f64 / n
            })
            .sum()
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            balanced_accuracy: 100.0 * self.balanced_accuracy(),
            kappa: 100.0 * self.kappa(),
            weighted_f1: 100.0 * self.weighted_f1(),
        }
    }
}

/// Classification scores in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub weighted_f1: f64,
}

pub fn compute_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    Ok(ConfusionMatrix::from_predictions(pred, labels, classes)?.metrics())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsSummary {
    pub balanced_accuracy: MeanStd,
    pub kappa: MeanStd,
    pub weighted_f1: MeanStd,
}

pub fn summarize(runs: &[Metrics]) -> Result<MetricsSummary> {
    if runs.is_empty() {
        return Err(Error::Empty("metrics"));
    }
    let col = |f: fn(&Metrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsSummary {
        balanced_accuracy: col(|m| m.balanced_accuracy),
        kappa: col(|m| m.kappa),
        weighted_f1: col(|m| m.weighted_f1),
    })
}
