use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument {
                op: "confusion",
                msg: "confusion matrix must be square".into(),
            });
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut c = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            c.add(t, p);
        }
        c
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(mut self, other: &Confusion) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        correct as f64 / total as f64
    }

    /// `2PR/(P+R)` per class, 0 when `P + R = 0`.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let pred = self.predicted(c) as f64;
                let sup = self.support(c) as f64;
                let precision = if pred > 0.0 { tp / pred } else { 0.0 };
                let recall = if sup > 0.0 { tp / sup } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Support-weighted mean of the per-class F1 scores.
    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.per_class_f1()
            .iter()
            .enumerate()
            .map(|(c, f)| self.support(c) as f64 / total as f64 * f)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub wf1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            accuracy: confusion.accuracy(),
            wf1: confusion.weighted_f1(),
            per_class_f1: confusion.per_class_f1(),
            confusion,
        }
    }
}

/// Predicts every conversation (in parallel) and scores the predictions.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    let classes = model.shape.num_classes;
    if data.num_classes != classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model was built for {classes}",
            data.num_classes
        )));
    }
    let parts = data
        .conversations
        .par_iter()
        .map(|conv| Ok(Confusion::from_pairs(classes, &conv.labels(), &model.predict(conv)?)))
        .collect::<Result<Vec<_>>>()?;
    let confusion = parts.iter().fold(Confusion::new(classes), |acc, c| acc.merge(c));
    Ok(EvalReport::from_confusion(confusion))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_fixture() {
        let c = Confusion::from_counts(vec![vec![1, 1], vec![0, 2]]).unwrap();
        let f1 = c.per_class_f1();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1[1] - 0.8).abs() < 1e-15);
        assert!((c.weighted_f1() - 0.7333).abs() < 1e-4);
        assert_eq!(c.accuracy(), 0.75);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let perfect = Confusion::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(perfect.accuracy(), 1.0);
        assert_eq!(perfect.weighted_f1(), 1.0);
        let constant = Confusion::from_pairs(2, &[0, 0, 1, 1], &[1, 1, 1, 1]);
        assert_eq!(constant.accuracy(), 0.5);
        assert_eq!(constant.per_class_f1()[0], 0.0);
    }

    #[test]
    fn rejects_ragged_matrix() {
        assert!(Confusion::from_counts(vec![vec![1, 2], vec![3]]).is_err());
    }
}
