use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes();
        for label in [truth, pred] {
            if label >= c {
                return Err(Error::Label { label, classes: c });
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Unweighted average recall in percent. Classes without true samples
    /// are left out of the average.
    pub fn uar(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (c, row) in self.counts.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                continue;
            }
            sum += row[c] as f64 / n as f64;
            used += 1;
        }
        if used == 0 {
            return Err(Error::EmptyDataset);
        }
        if used < self.classes() {
            log::info!("uar: {} class(es) without samples excluded", self.classes() - used);
        }
        Ok(100.0 * sum / used as f64)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let diag: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        Ok(100.0 * diag as f64 / total as f64)
    }
}

pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    cm.uar()
}
