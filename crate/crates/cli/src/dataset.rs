//! The on-disk dataset format.
//!
//! Line 1 is the header `n d L`. Each of the following n lines holds the
//! comma-separated 0-based label ids of one instance, a space, then its
//! space-separated `feature:value` pairs. An instance without labels
//! starts with a space; an instance without features ends after its
//! labels. Parsing is strict: ids must be in bounds, values finite, and
//! duplicates are rejected.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use xrlinear::error::{Error, Result};
use xrlinear::sparse::{CsrMatrix, SparseVec};

/// A parsed dataset: features X (n x d) and binary labels Y (n x L).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: CsrMatrix,
    pub labels: CsrMatrix,
}

impl Dataset {
    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.cols()
    }

    /// Truth label sets per instance, for evaluation.
    pub fn label_sets(&self) -> Vec<HashSet<u32>> {
        (0..self.labels.rows())
            .map(|i| self.labels.row(i).0.iter().copied().collect())
            .collect()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: format!("line {line}: {}", msg.into()),
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))??;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 3 {
        return Err(parse_err(path, 1, "header must be `n d L`"));
    }
    let n: usize = dims[0].parse().map_err(|_| parse_err(path, 1, "bad instance count"))?;
    let d: usize = dims[1].parse().map_err(|_| parse_err(path, 1, "bad feature count"))?;
    let l: usize = dims[2].parse().map_err(|_| parse_err(path, 1, "bad label count"))?;

    let mut feature_rows = Vec::with_capacity(n);
    let mut label_rows = Vec::with_capacity(n);
    let mut count = 0usize;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if count == n {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(path, lineno, format!("more than {n} data lines")));
        }
        count += 1;
        let (label_part, feat_part) = match line.split_once(' ') {
            Some((a, b)) => (a, b),
            None => (line.as_str(), ""),
        };
        let mut label_ids: Vec<u32> = Vec::new();
        if !label_part.is_empty() {
            for tok in label_part.split(',') {
                let id: u32 = tok
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad label id `{tok}`")))?;
                if id as usize >= l {
                    return Err(parse_err(path, lineno, format!("label {id} out of range {l}")));
                }
                label_ids.push(id);
            }
        }
        label_ids.sort_unstable();
        if label_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(parse_err(path, lineno, "duplicate label id"));
        }
        let label_entries: Vec<(u32, f32)> = label_ids.into_iter().map(|id| (id, 1.0)).collect();
        label_rows.push(
            SparseVec::new(l, label_entries).map_err(|e| parse_err(path, lineno, e.to_string()))?,
        );

        let mut feat_entries: Vec<(u32, f32)> = Vec::new();
        for tok in feat_part.split_whitespace() {
            let (fid, fval) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, lineno, format!("expected feature:value, got `{tok}`")))?;
            let fid: u32 = fid
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad feature id `{fid}`")))?;
            if fid as usize >= d {
                return Err(parse_err(path, lineno, format!("feature {fid} out of range {d}")));
            }
            let fval: f32 = fval
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad feature value `{fval}`")))?;
            if !fval.is_finite() {
                return Err(parse_err(path, lineno, "non-finite feature value"));
            }
            if fval != 0.0 {
                feat_entries.push((fid, fval));
            }
        }
        feat_entries.sort_unstable_by_key(|&(id, _)| id);
        if feat_entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(parse_err(path, lineno, "duplicate feature id"));
        }
        feature_rows.push(
            SparseVec::new(d, feat_entries).map_err(|e| parse_err(path, lineno, e.to_string()))?,
        );
    }
    if count != n {
        // The first missing line (header is line 1).
        return Err(parse_err(path, count + 2, format!("expected {n} data lines, found {count}")));
    }
    Ok(Dataset {
        features: CsrMatrix::from_rows(d, &feature_rows)?,
        labels: CsrMatrix::from_rows(l, &label_rows)?,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{} {} {}", data.num_instances(), data.dim(), data.num_labels())?;
    for i in 0..data.num_instances() {
        let (label_ids, _) = data.labels.row(i);
        let labels: Vec<String> = label_ids.iter().map(|id| id.to_string()).collect();
        write!(f, "{}", labels.join(","))?;
        let (fids, fvals) = data.features.row(i);
        for (&fid, &fval) in fids.iter().zip(fvals) {
            write!(f, " {fid}:{fval}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a label file: one line per instance, comma-separated 0-based label
/// ids, empty lines meaning no labels.
pub fn read_label_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let mut ids = Vec::new();
        for tok in trimmed.split(',') {
            let id: u32 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad label id `{tok}`")))?;
            ids.push(id);
        }
        ids.sort_unstable();
        ids.dedup();
        out.push(ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.svm");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_mixed_rows() {
        let (_d, path) = write_tmp("3 4 5\n0,2 1:0.5 3:1.25\n 0:2\n4\n");
        let data = read_dataset(&path).unwrap();
        assert_eq!(data.num_instances(), 3);
        assert_eq!(data.dim(), 4);
        assert_eq!(data.num_labels(), 5);
        assert_eq!(data.labels.row(0).0, &[0, 2]);
        assert_eq!(data.features.row(0).0, &[1, 3]);
        assert!(data.labels.row(1).0.is_empty());
        assert_eq!(data.features.row(1).0, &[0]);
        assert_eq!(data.labels.row(2).0, &[4]);
        assert!(data.features.row(2).0.is_empty());
    }

    #[test]
    fn round_trips_bytes() {
        let original = "2 3 2\n0 0:0.5 2:1\n1 1:0.25\n";
        let (_d, path) = write_tmp(original);
        let data = read_dataset(&path).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.svm");
        write_dataset(&out, &data).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), original);
    }

    #[test]
    fn strict_errors_name_lines() {
        let cases = [
            ("2 2 2\n0 0:1\n", "line 3"),                 // missing row
            ("1 2 2\n0 0:1\n1 1:1\n", "line 3"),          // extra row
            ("1 2 2\n5 0:1\n", "line 2"),                 // label out of range
            ("1 2 2\n0 7:1\n", "line 2"),                 // feature out of range
            ("1 2 2\n0 0:abc\n", "line 2"),               // bad value
            ("1 2 2\n0 0:1 0:2\n", "line 2"),             // duplicate feature
            ("1 2 2\n0,0 1:1\n", "line 2"),               // duplicate label
            ("bad header\n", "line 1"),
        ];
        for (content, needle) in cases {
            let (_d, path) = write_tmp(content);
            let err = read_dataset(&path).unwrap_err().to_string();
            assert!(err.contains(needle), "`{content}` -> {err}");
        }
    }

    #[test]
    fn label_lines_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        std::fs::write(&path, "3,1\n\n7\n").unwrap();
        let rows = read_label_lines(&path).unwrap();
        assert_eq!(rows, vec![vec![1, 3], vec![], vec![7]]);
    }
}
