use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gold-by-predicted counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[gold][pred]`
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::InvalidArgument("no labels to evaluate".into()));
        }
        let mut counts = vec![vec![0u64; num_classes]; num_classes];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= num_classes || p >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({g}, {p}) outside {num_classes} classes"
                )));
            }
            counts[g][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.num_classes()).map(|c| self.counts[c][c]).sum();
        correct as f64 / self.total() as f64
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// F1 of one class; 0 when precision or recall has a zero denominator.
    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.counts[class][class] as f64;
        let predicted: u64 = self.counts.iter().map(|row| row[class]).sum();
        let actual = self.support(class);
        if predicted == 0 || actual == 0 {
            return 0.0;
        }
        let precision = tp / predicted as f64;
        let recall = tp / actual as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    /// Per-class F1 averaged with gold-support weights.
    pub fn weighted_f1(&self) -> f64 {
        let total = self.total() as f64;
        (0..self.num_classes())
            .map(|c| self.f1(c) * self.support(c) as f64 / total)
            .sum()
    }
}

pub fn weighted_f1(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::new(gold, pred, num_classes)?.weighted_f1())
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> Result<f64> {
    if gold.len() != pred.len() || gold.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty label lists, got {} and {}",
            gold.len(),
            pred.len()
        )));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(correct as f64 / gold.len() as f64)
}
