//! Tfidf text vectorizer: fixed vocabulary plus inverse document frequency
//! weights, producing L2-normalized sparse feature vectors.
//!
//! Tokenization is lowercase with splits on any non-alphanumeric character,
//! unigrams only. Feature ids are assigned by sorting the vocabulary, so a
//! fitted model is independent of corpus order.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::SparseVec;

/// A fitted tfidf vectorizer.
#[derive(Debug, Clone)]
pub struct TfidfModel {
    vocabulary: HashMap<String, u32>,
    idf: Vec<f32>,
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Fits vocabulary and idf weights on a corpus. Tokens appearing in fewer
/// than `min_df` documents are dropped; idf(v) = ln((1+n)/(1+df(v))) + 1.
pub fn fit_tfidf<S: AsRef<str>>(corpus: &[S], min_df: usize) -> Result<TfidfModel> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot fit tfidf on an empty corpus"));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut seen = HashSet::new();
    for doc in corpus {
        seen.clear();
        for tok in tokenize(doc.as_ref()) {
            if seen.insert(tok.clone()) {
                *df.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let min_df = min_df.max(1);
    let mut kept: Vec<(String, usize)> =
        df.into_iter().filter(|&(_, c)| c >= min_df).collect();
    kept.sort_unstable_by(|a, b| a.0.cmp(&b.0));

    let n = corpus.len() as f64;
    let mut vocabulary = HashMap::with_capacity(kept.len());
    let mut idf = Vec::with_capacity(kept.len());
    for (id, (tok, count)) in kept.into_iter().enumerate() {
        vocabulary.insert(tok, id as u32);
        idf.push((((1.0 + n) / (1.0 + count as f64)).ln() + 1.0) as f32);
    }
    Ok(TfidfModel { vocabulary, idf })
}

impl TfidfModel {
    /// Vocabulary size, which is also the feature dimension.
    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn feature_id(&self, token: &str) -> Option<u32> {
        self.vocabulary.get(token).copied()
    }

    pub fn idf(&self, id: u32) -> f32 {
        self.idf[id as usize]
    }

    /// Maps a document to a tf·idf vector, L2-normalized unless all tokens
    /// are out of vocabulary (then the zero vector).
    pub fn transform(&self, text: &str) -> SparseVec {
        let mut tf: HashMap<u32, u32> = HashMap::new();
        for tok in tokenize(text) {
            if let Some(&id) = self.vocabulary.get(&tok) {
                *tf.entry(id).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(u32, f32)> = tf
            .into_iter()
            .map(|(id, count)| (id, (count as f64 * self.idf[id as usize] as f64) as f32))
            .collect();
        entries.sort_unstable_by_key(|&(id, _)| id);
        let raw = SparseVec::new(self.dim(), entries).expect("tfidf entries are valid");
        raw.l2_normalized()
    }

    /// Writes the vocabulary as UTF-8 lines `token<TAB>id<TAB>idf`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(&String, u32)> =
            self.vocabulary.iter().map(|(t, &id)| (t, id)).collect();
        rows.sort_unstable_by_key(|&(_, id)| id);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (tok, id) in rows {
            writeln!(f, "{tok}\t{id}\t{}", self.idf[id as usize])?;
        }
        f.flush()?;
        Ok(())
    }

    /// Loads a vocabulary file written by [`Self::save`].
    pub fn load(path: &Path) -> Result<TfidfModel> {
        let loc = path.display().to_string();
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut vocabulary = HashMap::new();
        let mut idf_pairs: Vec<(u32, f32)> = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (tok, id, idf) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(i), Some(w)) => (t, i, w),
                _ => {
                    return Err(Error::format(&loc, format!("line {}: expected 3 fields", lineno + 1)))
                }
            };
            let id: u32 = id
                .parse()
                .map_err(|_| Error::format(&loc, format!("line {}: bad id", lineno + 1)))?;
            let idf: f32 = idf
                .parse()
                .map_err(|_| Error::format(&loc, format!("line {}: bad idf", lineno + 1)))?;
            if idf <= 0.0 || !idf.is_finite() {
                return Err(Error::format(&loc, format!("line {}: idf must be > 0", lineno + 1)));
            }
            if vocabulary.insert(tok.to_string(), id).is_some() {
                return Err(Error::format(&loc, format!("line {}: duplicate token", lineno + 1)));
            }
            idf_pairs.push((id, idf));
        }
        idf_pairs.sort_unstable_by_key(|&(id, _)| id);
        for (expect, &(id, _)) in idf_pairs.iter().enumerate() {
            if id as usize != expect {
                return Err(Error::format(&loc, "feature ids are not dense in [0, |V|)"));
            }
        }
        let idf = idf_pairs.into_iter().map(|(_, w)| w).collect();
        Ok(TfidfModel { vocabulary, idf })
    }
}
