//! Precision@k and Recall@k over ranked predictions.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::inference::Prediction;

/// |top-k intersect truth| / k; slots past the end of the prediction count
/// as misses.
pub fn precision_at_k(pred: &Prediction, truth: &HashSet<u32>, k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let hits = pred.iter().take(k).filter(|(l, _)| truth.contains(l)).count();
    hits as f64 / k as f64
}

/// |top-k intersect truth| / |truth|; 0 when the truth set is empty.
pub fn recall_at_k(pred: &Prediction, truth: &HashSet<u32>, k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().take(k).filter(|(l, _)| truth.contains(l)).count();
    hits as f64 / truth.len() as f64
}

/// Mean precision/recall at each requested k over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Rows contributing to the means.
    pub n_test: usize,
    /// Rows dropped because their truth set was empty (skip-empty mode).
    pub n_skipped: usize,
}

impl MetricReport {
    /// Aggregates over (prediction, truth) pairs. With `skip_empty`, rows
    /// whose truth set is empty are excluded from the means; otherwise they
    /// contribute zero to both metrics.
    pub fn aggregate(
        preds: &[Prediction],
        truths: &[HashSet<u32>],
        ks: &[usize],
        skip_empty: bool,
    ) -> MetricReport {
        assert_eq!(preds.len(), truths.len(), "predictions and truths must align");
        let mut precision = vec![0f64; ks.len()];
        let mut recall = vec![0f64; ks.len()];
        let mut n = 0usize;
        let mut skipped = 0usize;
        for (pred, truth) in preds.iter().zip(truths) {
            if skip_empty && truth.is_empty() {
                skipped += 1;
                continue;
            }
            n += 1;
            for (slot, &k) in ks.iter().enumerate() {
                precision[slot] += precision_at_k(pred, truth, k);
                recall[slot] += recall_at_k(pred, truth, k);
            }
        }
        if n > 0 {
            for slot in 0..ks.len() {
                precision[slot] /= n as f64;
                recall[slot] /= n as f64;
            }
        }
        MetricReport { ks: ks.to_vec(), precision, recall, n_test: n, n_skipped: skipped }
    }

    /// Aligned text table, one row per k.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>6} {:>12} {:>12}\n", "k", "precision", "recall"));
        for (slot, &k) in self.ks.iter().enumerate() {
            out.push_str(&format!(
                "{k:>6} {:>12.6} {:>12.6}\n",
                self.precision[slot], self.recall[slot]
            ));
        }
        out.push_str(&format!("rows: {}, skipped: {}\n", self.n_test, self.n_skipped));
        out
    }
}
