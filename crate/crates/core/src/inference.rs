//! Top-k prediction by beam search over the layer stack, score combiners,
//! and score-averaging ensembles.
//!
//! At each level the `b` best-scoring clusters are kept and only their
//! children expanded through the per-cluster doubly-sparse weight blocks.
//! Labels outside the traversed leaves get no entry at all: absence from a
//! prediction means "below every returned score". With the sigmoid-product
//! combiner a path's score is the product of sigmoids of the per-layer
//! ranker scores, accumulated in log space.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::log1p_exp;
use crate::sparse::{CsrMatrix, SparseVec};
use crate::trainer::XrLinearModel;

/// How matcher and ranker scores merge into a final relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    /// The ranker score alone; the stack above only shortlists.
    RankerOnly,
    /// sigmoid(g) * sigmoid(h), evaluated in log space.
    SigmoidProduct,
}

fn log_sigmoid(z: f64) -> f64 {
    -log1p_exp(-z)
}

/// Merges a matcher score with a ranker score.
pub fn combine(g_score: f64, h_score: f64, kind: CombinerKind) -> f64 {
    match kind {
        CombinerKind::RankerOnly => h_score,
        CombinerKind::SigmoidProduct => (log_sigmoid(g_score) + log_sigmoid(h_score)).exp(),
    }
}

/// A ranked list of (label id, score), scores non-increasing, ids distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    entries: Vec<(u32, f64)>,
}

impl Prediction {
    /// Builds from unsorted pairs; sorts by score descending with ascending
    /// label id breaking ties, and truncates to `topk`.
    pub fn from_scores(mut entries: Vec<(u32, f64)>, topk: usize) -> Self {
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        entries.truncate(topk);
        Prediction { entries }
    }

    /// Wraps entries that are already ranked (stored file order).
    pub fn from_ranked(entries: Vec<(u32, f64)>) -> Self {
        Prediction { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn labels(&self) -> Vec<u32> {
        self.entries.iter().map(|&(l, _)| l).collect()
    }
}

/// Instrumentation from one beam search.
#[derive(Debug, Clone, Default)]
pub struct BeamStats {
    /// Ranker evaluations per level (labels scored).
    pub scored_per_level: Vec<usize>,
    /// Clusters expanded per level.
    pub expanded_per_level: Vec<usize>,
}

impl BeamStats {
    pub fn labels_scored(&self) -> usize {
        self.scored_per_level.iter().sum()
    }
}

/// Beam search with instrumentation; see [`beam_search`].
pub fn beam_search_with_stats(
    model: &XrLinearModel,
    x: &SparseVec,
    beam: usize,
    topk: usize,
) -> Result<(Prediction, BeamStats)> {
    if beam < 1 || topk < 1 {
        return Err(Error::arg("beam and topk must be >= 1"));
    }
    if x.dim() != model.dim() {
        return Err(Error::shape(format!(
            "input dim {} does not match model dim {}",
            x.dim(),
            model.dim()
        )));
    }
    let depth = model.depth();
    let mut stats = BeamStats::default();
    // Frontier of (cluster id at the current level, accumulated score). For
    // the sigmoid-product combiner the accumulator is the running log
    // probability; ranker-only keeps the latest ranker score.
    let mut frontier: Vec<(u32, f64)> = vec![(0, 0.0)];
    for t in 1..=depth {
        let layer = model.layer(t);
        let mut next: Vec<(u32, f64)> = Vec::new();
        let mut expanded = 0usize;
        let mut scored = 0usize;
        for &(parent, accum) in &frontier {
            let children = layer.children_of(parent as usize);
            if children.is_empty() {
                continue;
            }
            expanded += 1;
            let scores = layer.block(parent as usize).matvec(x)?;
            scored += children.len();
            for (j, &child) in children.iter().enumerate() {
                let h = scores[j];
                let acc = match model.combiner() {
                    CombinerKind::SigmoidProduct => accum + log_sigmoid(h),
                    CombinerKind::RankerOnly => h,
                };
                next.push((child, acc));
            }
        }
        next.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let keep = if t == depth { topk } else { beam };
        next.truncate(keep);
        stats.expanded_per_level.push(expanded);
        stats.scored_per_level.push(scored);
        frontier = next;
    }
    let entries: Vec<(u32, f64)> = frontier
        .into_iter()
        .map(|(label, acc)| {
            let score = match model.combiner() {
                CombinerKind::SigmoidProduct => acc.exp(),
                CombinerKind::RankerOnly => acc,
            };
            (label, score)
        })
        .collect();
    Ok((Prediction::from_scores(entries, topk), stats))
}

/// Top-k labels for one input. Untraversed labels are absent from the
/// result rather than carrying a sentinel score.
pub fn beam_search(
    model: &XrLinearModel,
    x: &SparseVec,
    beam: usize,
    topk: usize,
) -> Result<Prediction> {
    beam_search_with_stats(model, x, beam, topk).map(|(p, _)| p)
}

/// Row-wise beam search over a feature matrix; output order matches input
/// order and each row equals the single-query result.
pub fn batch_predict(
    model: &XrLinearModel,
    x: &CsrMatrix,
    beam: usize,
    topk: usize,
) -> Result<Vec<Prediction>> {
    if x.cols() != model.dim() {
        return Err(Error::shape(format!(
            "input dim {} does not match model dim {}",
            x.cols(),
            model.dim()
        )));
    }
    (0..x.rows())
        .into_par_iter()
        .map(|i| beam_search(model, &x.row_vec(i), beam, topk))
        .collect()
}

/// Mean score per label over several predictions for the same label space;
/// labels absent from a prediction count as score 0.
pub fn ensemble_average(preds: &[Prediction], topk: usize) -> Result<Prediction> {
    if preds.is_empty() {
        return Err(Error::arg("ensemble needs at least one prediction"));
    }
    let mut sums: HashMap<u32, f64> = HashMap::new();
    for p in preds {
        for (label, score) in p.iter() {
            *sums.entry(label).or_insert(0.0) += score;
        }
    }
    let n = preds.len() as f64;
    let entries: Vec<(u32, f64)> = sums.into_iter().map(|(l, s)| (l, s / n)).collect();
    Ok(Prediction::from_scores(entries, topk))
}

/// Six-significant-digit score formatting used by the prediction file.
fn format_score(score: f64) -> String {
    format!("{score:.5e}")
}

/// Writes one line per query: space-separated `label:score` pairs.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        let mut first = true;
        for (label, score) in p.iter() {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{label}:{}", format_score(score))?;
            first = false;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a file written by [`write_predictions`]; line order is preserved
/// and each line's ranking is taken as stored.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let loc = path.display().to_string();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let mut entries = Vec::new();
        for tok in line.split_whitespace() {
            let (label, score) = tok.split_once(':').ok_or_else(|| {
                Error::format(&loc, format!("line {}: expected label:score", lineno + 1))
            })?;
            let label: u32 = label
                .parse()
                .map_err(|_| Error::format(&loc, format!("line {}: bad label id", lineno + 1)))?;
            let score: f64 = score
                .parse()
                .map_err(|_| Error::format(&loc, format!("line {}: bad score", lineno + 1)))?;
            entries.push((label, score));
        }
        out.push(Prediction::from_ranked(entries));
    }
    Ok(out)
}
