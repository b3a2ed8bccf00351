//! Per-pixel accuracy, mean class accuracy and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Tallies labeled pixels of one image given its per-pixel predictions.
    pub fn add(&mut self, predicted: &[usize], labels: &LabelMap) -> Result<()> {
        if predicted.len() != labels.raw().len() {
            return Err(Error::shape(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.raw().len()
            )));
        }
        let n = self.num_classes();
        for (&p, &l) in predicted.iter().zip(labels.raw()) {
            if l == LabelMap::UNLABELED {
                continue;
            }
            let l = l as usize;
            if l >= n || p >= n {
                return Err(Error::invalid(format!("class {} out of range for {n} classes", l.max(p))));
            }
            self.counts[l][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("confusion matrices differ in size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub mean_class_accuracy: f64,
    /// Recall per class; `None` for classes without labeled pixels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub labeled_pixels: u64,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix, config: serde_json::Value, seed: u64) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::invalid("no labeled pixels to score"));
        }
        let per_class: Vec<Option<f64>> = confusion
            .counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(MetricsReport {
            pixel_accuracy: confusion.correct() as f64 / total as f64,
            mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            per_class_accuracy: per_class,
            labeled_pixels: total,
            confusion,
            config,
            seed,
        })
    }

    /// Recomputes both accuracies from the confusion matrix and compares
    /// them exactly.
    pub fn check_consistency(&self) -> Result<()> {
        let again = MetricsReport::from_confusion(self.confusion.clone(), self.config.clone(), self.seed)?;
        if again.pixel_accuracy != self.pixel_accuracy
            || again.mean_class_accuracy != self.mean_class_accuracy
            || again.per_class_accuracy != self.per_class_accuracy
            || again.labeled_pixels != self.labeled_pixels
        {
            return Err(Error::Invariant("metrics disagree with their confusion matrix".into()));
        }
        Ok(())
    }
}
