//! Sparse vector/matrix types and the kernels built on them.
//!
//! Three weight-matrix layouts are supported: column-major ([`CscMatrix`],
//! label-indexed), row-major ([`CsrMatrix`], feature-indexed when holding a
//! transposed block), and the doubly-sparse layout ([`DoublySparseMatrix`])
//! that keeps only non-empty feature rows behind a hash index. Values are
//! stored in 32-bit floats; dot products accumulate in 64-bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sparse vector with strictly increasing indices and no explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(u32, f32)>,
}

impl SparseVec {
    /// Builds a sparse vector, validating the invariants: indices strictly
    /// increasing, all below `dim`, no stored zeros.
    pub fn new(dim: usize, entries: Vec<(u32, f32)>) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(i, v) in &entries {
            if (i as usize) >= dim {
                return Err(Error::arg(format!("index {i} out of bounds for dim {dim}")));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(Error::arg(format!("indices not strictly increasing at {i}")));
                }
            }
            if v == 0.0 {
                return Err(Error::arg(format!("explicit zero stored at index {i}")));
            }
            if !v.is_finite() {
                return Err(Error::arg(format!("non-finite value at index {i}")));
            }
            prev = Some(i);
        }
        Ok(SparseVec { dim, entries })
    }

    /// Builds from possibly unsorted pairs, dropping zeros. Duplicate indices
    /// are rejected.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f32)>) -> Result<Self> {
        pairs.retain(|&(_, v)| v != 0.0);
        pairs.sort_unstable_by_key(|&(i, _)| i);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::arg(format!("duplicate index {}", w[0].0)));
            }
        }
        SparseVec::new(dim, pairs)
    }

    pub fn empty(dim: usize) -> Self {
        SparseVec { dim, entries: Vec::new() }
    }

    /// Collects the nonzero entries of a dense slice.
    pub fn from_dense(dense: &[f64]) -> Self {
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v as f32))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        SparseVec { dim: dense.len(), entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, v)| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Returns a copy scaled to unit L2 norm; an all-zero vector stays zero.
    pub fn l2_normalized(&self) -> SparseVec {
        let norm = self.l2_norm();
        if norm == 0.0 {
            return self.clone();
        }
        let entries = self
            .entries
            .iter()
            .map(|&(i, v)| (i, ((v as f64) / norm) as f32))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        SparseVec { dim: self.dim, entries }
    }

    /// Dot product against a dense slice, accumulated in f64.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        debug_assert!(dense.len() >= self.dim);
        self.entries
            .iter()
            .map(|&(i, v)| (v as f64) * dense[i as usize])
            .sum()
    }

    /// Drops entries with |value| < eps; `eps = 0` is the identity.
    pub fn hard_threshold(&self, eps: f32) -> Result<SparseVec> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::arg(format!("threshold must be >= 0, got {eps}")));
        }
        let entries = self
            .entries
            .iter()
            .copied()
            .filter(|&(_, v)| v.abs() >= eps)
            .collect();
        Ok(SparseVec { dim: self.dim, entries })
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

/// Compressed sparse column matrix; the mirror of [`CsrMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

fn validate_compressed(
    major: usize,
    minor: usize,
    indptr: &[usize],
    indices: &[u32],
    values: &[f32],
    kind: &str,
) -> Result<()> {
    if indptr.len() != major + 1 || indptr[0] != 0 {
        return Err(Error::arg(format!("{kind}: pointer array must have len major+1 and start at 0")));
    }
    if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
        return Err(Error::arg(format!("{kind}: nnz disagrees with pointer array")));
    }
    for w in indptr.windows(2) {
        if w[1] < w[0] {
            return Err(Error::arg(format!("{kind}: pointers must be nondecreasing")));
        }
        let seg = &indices[w[0]..w[1]];
        for pair in seg.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::arg(format!("{kind}: minor indices not strictly increasing")));
            }
        }
        if let Some(&last) = seg.last() {
            if last as usize >= minor {
                return Err(Error::arg(format!("{kind}: index {last} out of bounds {minor}")));
            }
        }
    }
    Ok(())
}

/// Converts one compressed layout into the other with a counting sort.
/// Output minor indices come out sorted, so applying it twice is the identity.
fn swap_layout(
    major: usize,
    minor: usize,
    indptr: &[usize],
    indices: &[u32],
    values: &[f32],
) -> (Vec<usize>, Vec<u32>, Vec<f32>) {
    let nnz = indices.len();
    let mut counts = vec![0usize; minor + 1];
    for &i in indices {
        counts[i as usize + 1] += 1;
    }
    for m in 0..minor {
        counts[m + 1] += counts[m];
    }
    let out_ptr = counts.clone();
    let mut cursor = counts;
    let mut out_idx = vec![0u32; nnz];
    let mut out_val = vec![0f32; nnz];
    for maj in 0..major {
        for p in indptr[maj]..indptr[maj + 1] {
            let m = indices[p] as usize;
            let dst = cursor[m];
            cursor[m] += 1;
            out_idx[dst] = maj as u32;
            out_val[dst] = values[p];
        }
    }
    (out_ptr, out_idx, out_val)
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        validate_compressed(rows, cols, &indptr, &indices, &values, "csr")?;
        Ok(CsrMatrix { rows, cols, indptr, indices, values })
    }

    /// Stacks sparse vectors as rows; every vector must share `cols` as dim.
    pub fn from_rows(cols: usize, rows: &[SparseVec]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0usize);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            if r.dim() != cols {
                return Err(Error::shape(format!("row dim {} != cols {}", r.dim(), cols)));
            }
            for (i, v) in r.iter() {
                indices.push(i);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix { rows: rows.len(), cols, indptr, indices, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_vec(&self, i: usize) -> SparseVec {
        let (idx, val) = self.row(i);
        SparseVec {
            dim: self.cols,
            entries: idx.iter().copied().zip(val.iter().copied()).collect(),
        }
    }

    pub fn to_csc(&self) -> CscMatrix {
        let (indptr, indices, values) =
            swap_layout(self.rows, self.cols, &self.indptr, &self.indices, &self.values);
        CscMatrix { rows: self.rows, cols: self.cols, indptr, indices, values }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0f64; self.cols]; self.rows];
        for i in 0..self.rows {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                out[i][j as usize] = v as f64;
            }
        }
        out
    }
}

impl CscMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        validate_compressed(cols, rows, &indptr, &indices, &values, "csc")?;
        Ok(CscMatrix { rows, cols, indptr, indices, values })
    }

    /// Stacks sparse vectors as columns; every vector must share `rows` as dim.
    pub fn from_columns(rows: usize, cols: &[SparseVec]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(cols.len() + 1);
        indptr.push(0usize);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for c in cols {
            if c.dim() != rows {
                return Err(Error::shape(format!("column dim {} != rows {}", c.dim(), rows)));
            }
            for (i, v) in c.iter() {
                indices.push(i);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CscMatrix { rows, cols: cols.len(), indptr, indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn col(&self, j: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.indptr[j], self.indptr[j + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn col_vec(&self, j: usize) -> SparseVec {
        let (idx, val) = self.col(j);
        SparseVec {
            dim: self.rows,
            entries: idx.iter().copied().zip(val.iter().copied()).collect(),
        }
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let (indptr, indices, values) =
            swap_layout(self.cols, self.rows, &self.indptr, &self.indices, &self.values);
        CsrMatrix { rows: self.rows, cols: self.cols, indptr, indices, values }
    }
}

/// Reads an indexing matrix (exactly one nonzero per row) into the
/// label-to-cluster assignment vector it encodes.
pub fn assignment_from_indexing(c: &CscMatrix) -> Result<Vec<u32>> {
    let mut assign = vec![u32::MAX; c.rows()];
    for k in 0..c.cols() {
        let (rows, _) = c.col(k);
        for &l in rows {
            if assign[l as usize] != u32::MAX {
                return Err(Error::arg(format!("indexing matrix row {l} has more than one nonzero")));
            }
            assign[l as usize] = k as u32;
        }
    }
    if let Some(l) = assign.iter().position(|&k| k == u32::MAX) {
        return Err(Error::arg(format!("indexing matrix row {l} has no nonzero")));
    }
    Ok(assign)
}

/// `result[i,k] = 1` iff instance `i` has a positive label assigned to
/// cluster `k`. `assign` maps each label to its cluster, `k` is the cluster
/// count.
pub fn binarize_with_assignment(y: &CsrMatrix, assign: &[u32], k: usize) -> Result<CsrMatrix> {
    if y.cols() != assign.len() {
        return Err(Error::shape(format!(
            "labels {} != assignment length {}",
            y.cols(),
            assign.len()
        )));
    }
    let mut indptr = Vec::with_capacity(y.rows() + 1);
    indptr.push(0usize);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut scratch: Vec<u32> = Vec::new();
    for i in 0..y.rows() {
        scratch.clear();
        let (labels, _) = y.row(i);
        scratch.extend(labels.iter().map(|&l| assign[l as usize]));
        scratch.sort_unstable();
        scratch.dedup();
        for &c in &scratch {
            indices.push(c);
            values.push(1.0);
        }
        indptr.push(indices.len());
    }
    Ok(CsrMatrix { rows: y.rows(), cols: k, indptr, indices, values })
}

/// Ground-truth input-to-cluster assignment: binarize(Y·C) for a binary Y
/// and an indexing matrix C (one nonzero per row).
pub fn binarize_matmul(y: &CsrMatrix, c: &CscMatrix) -> Result<CsrMatrix> {
    if y.cols() != c.rows() {
        return Err(Error::shape(format!(
            "Y has {} labels but C has {} rows",
            y.cols(),
            c.rows()
        )));
    }
    let assign = assignment_from_indexing(c)?;
    binarize_with_assignment(y, &assign, c.cols())
}

/// Hash-indexed weight block storing only the non-empty feature rows.
///
/// Each stored row is a sparse label vector ordered by label offset; lookups
/// by feature id are amortized constant time.
#[derive(Debug, Clone)]
pub struct DoublySparseMatrix {
    dim: usize,
    cols: usize,
    rows: HashMap<u32, Vec<(u32, f32)>>,
    nnz: usize,
}

/// Byte accounting for a doubly-sparse block: raw payload versus payload
/// plus per-row index overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryFootprint {
    /// Bytes for the stored (offset, value) pairs alone.
    pub raw_nnz_bytes: usize,
    /// Raw bytes plus the hash-index entries (key + pointer-sized slot per
    /// non-empty row).
    pub with_overhead_bytes: usize,
}

impl DoublySparseMatrix {
    /// Converts a CSC weight block into the doubly-sparse layout.
    pub fn from_csc(w: &CscMatrix) -> Self {
        let mut rows: HashMap<u32, Vec<(u32, f32)>> = HashMap::new();
        let mut nnz = 0usize;
        for j in 0..w.cols() {
            let (idx, val) = w.col(j);
            for (&feat, &v) in idx.iter().zip(val) {
                rows.entry(feat).or_default().push((j as u32, v));
                nnz += 1;
            }
        }
        // Column-major traversal yields each row's offsets already sorted.
        DoublySparseMatrix { dim: w.rows(), cols: w.cols(), rows, nnz }
    }

    /// Rebuilds the CSC block; exact round-trip of [`Self::from_csc`].
    pub fn to_csc(&self) -> CscMatrix {
        let mut cols: Vec<Vec<(u32, f32)>> = vec![Vec::new(); self.cols];
        let mut feats: Vec<&u32> = self.rows.keys().collect();
        feats.sort_unstable();
        for &feat in feats {
            for &(off, v) in &self.rows[&feat] {
                cols[off as usize].push((feat, v));
            }
        }
        let col_vecs: Vec<SparseVec> = cols
            .into_iter()
            .map(|entries| SparseVec { dim: self.dim, entries })
            .collect();
        CscMatrix::from_columns(self.dim, &col_vecs).expect("round-trip columns are valid")
    }

    /// Feature dimension (rows of the dense-equivalent block).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Labels in the block (columns).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Count of stored (non-empty) rows.
    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, feature: u32) -> Option<&[(u32, f32)]> {
        self.rows.get(&feature).map(|v| v.as_slice())
    }

    pub fn memory_footprint(&self) -> MemoryFootprint {
        let raw = self.nnz * (std::mem::size_of::<u32>() + std::mem::size_of::<f32>());
        let overhead =
            self.rows.len() * (std::mem::size_of::<u32>() + std::mem::size_of::<usize>());
        MemoryFootprint { raw_nnz_bytes: raw, with_overhead_bytes: raw + overhead }
    }

    /// Scores every label in the block: `out[j] = sum_i x[i] * W[i,j]`.
    ///
    /// Runtime is proportional to nnz(x) lookups plus the touched row
    /// entries, O(nnz(x) + nnz(W)).
    pub fn matvec(&self, x: &SparseVec) -> Result<Vec<f64>> {
        if x.dim() != self.dim {
            return Err(Error::shape(format!(
                "input dim {} != block dim {}",
                x.dim(),
                self.dim
            )));
        }
        let mut out = vec![0f64; self.cols];
        for (feat, xv) in x.iter() {
            if let Some(row) = self.rows.get(&feat) {
                let xv = xv as f64;
                for &(off, wv) in row {
                    out[off as usize] += xv * wv as f64;
                }
            }
        }
        Ok(out)
    }
}

// --- binary matrix blob ------------------------------------------------------
//
// Little-endian layout: magic "XRLM"; u8 tag (0 = CSR, 1 = CSC); u64 rows,
// cols, nnz; pointer array as u64; index array as u32; value array as f32.

const BLOB_MAGIC: &[u8; 4] = b"XRLM";

/// A matrix read back from the binary blob format.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixBlob {
    Csr(CsrMatrix),
    Csc(CscMatrix),
}

impl MatrixBlob {
    pub fn into_csr(self) -> Result<CsrMatrix> {
        match self {
            MatrixBlob::Csr(m) => Ok(m),
            MatrixBlob::Csc(_) => Err(Error::arg("expected CSR blob, found CSC")),
        }
    }

    pub fn into_csc(self) -> Result<CscMatrix> {
        match self {
            MatrixBlob::Csc(m) => Ok(m),
            MatrixBlob::Csr(_) => Err(Error::arg("expected CSC blob, found CSR")),
        }
    }
}

fn write_blob<W: Write>(
    w: &mut W,
    tag: u8,
    rows: usize,
    cols: usize,
    indptr: &[usize],
    indices: &[u32],
    values: &[f32],
) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&[tag])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    w.write_all(&(indices.len() as u64).to_le_bytes())?;
    for &p in indptr {
        w.write_all(&(p as u64).to_le_bytes())?;
    }
    for &i in indices {
        w.write_all(&i.to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_matrix(path: &Path, blob: &MatrixBlob) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match blob {
        MatrixBlob::Csr(m) => write_blob(&mut f, 0, m.rows, m.cols, &m.indptr, &m.indices, &m.values)?,
        MatrixBlob::Csc(m) => write_blob(&mut f, 1, m.rows, m.cols, &m.indptr, &m.indices, &m.values)?,
    }
    f.flush()?;
    Ok(())
}

fn read_exact_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_matrix(path: &Path) -> Result<MatrixBlob> {
    let loc = path.display().to_string();
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::format(&loc, "bad magic bytes"));
    }
    let mut tag = [0u8; 1];
    f.read_exact(&mut tag)?;
    let rows = read_exact_u64(&mut f)? as usize;
    let cols = read_exact_u64(&mut f)? as usize;
    let nnz = read_exact_u64(&mut f)? as usize;
    let major = match tag[0] {
        0 => rows,
        1 => cols,
        t => return Err(Error::format(&loc, format!("unknown layout tag {t}"))),
    };
    let mut indptr = Vec::with_capacity(major + 1);
    for _ in 0..=major {
        indptr.push(read_exact_u64(&mut f)? as usize);
    }
    let mut indices = vec![0u32; nnz];
    for slot in indices.iter_mut() {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)?;
        *slot = u32::from_le_bytes(buf);
    }
    let mut values = vec![0f32; nnz];
    for slot in values.iter_mut() {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf)?;
        *slot = f32::from_le_bytes(buf);
    }
    let blob = match tag[0] {
        0 => MatrixBlob::Csr(
            CsrMatrix::new(rows, cols, indptr, indices, values)
                .map_err(|e| Error::format(&loc, e.to_string()))?,
        ),
        _ => MatrixBlob::Csc(
            CscMatrix::new(rows, cols, indptr, indices, values)
                .map_err(|e| Error::format(&loc, e.to_string()))?,
        ),
    };
    Ok(blob)
}
