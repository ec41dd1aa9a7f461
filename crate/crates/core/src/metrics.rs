//! Confusion matrix and macro-averaged classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let mut m = Self::new(num_classes);
        if truth.len() != predicted.len() {
            return Err(Error::contract(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || predicted >= k {
            return Err(Error::contract(format!("class index ({truth}, {predicted}) out of range for {k} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: u64 = (0..self.num_classes()).map(|i| self.counts[i][i]).sum();
        hits as f64 / total as f64
    }

    /// Per-class precision; 0 for a class that was never predicted.
    pub fn precision(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| {
                let predicted: u64 = self.counts.iter().map(|r| r[c]).sum();
                ratio(self.counts[c][c], predicted)
            })
            .collect()
    }

    /// Per-class recall; 0 for a class with no samples.
    pub fn recall(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|c| ratio(self.counts[c][c], self.counts[c].iter().sum())).collect()
    }

    pub fn macro_precision(&self) -> f64 {
        mean(&self.precision())
    }

    pub fn macro_recall(&self) -> f64 {
        mean(&self.recall())
    }

    pub fn report(&self, class_names: &[String]) -> MetricsReport {
        MetricsReport {
            class_names: class_names.to_vec(),
            samples: self.total(),
            accuracy: self.accuracy(),
            macro_precision: self.macro_precision(),
            macro_recall: self.macro_recall(),
            per_class_precision: self.precision(),
            per_class_recall: self.recall(),
            confusion: self.counts.clone(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

/// Index of the largest value in each row of a row-major `[N, K]` buffer.
pub fn argmax_rows<T: PartialOrd + Copy>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
