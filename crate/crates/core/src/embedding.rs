//! Label representations used for semantic indexing.
//!
//! Four constructions: positive-instance indices (PII), positive-instance
//! feature aggregation (PIFA), a weighted blend of PIFA with given label
//! features (PIFA+LF), and a spectral embedding of the instance-label
//! bipartite graph. PII and PIFA rows are unit length or all-zero; labels
//! with no positives get zero rows and are placed round-robin by the
//! clustering stage.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Pii,
    Pifa,
    PifaLf,
    Spectral,
}

#[derive(Debug, Clone)]
enum Rows {
    Sparse(Vec<SparseVec>),
    /// Row-major dense storage, `len = L * dim`.
    Dense(Vec<f64>),
}

/// Per-label embedding rows, either sparse or dense.
#[derive(Debug, Clone)]
pub struct LabelEmbedding {
    kind: EmbeddingKind,
    dim: usize,
    len: usize,
    rows: Rows,
}

impl LabelEmbedding {
    pub fn from_sparse_rows(kind: EmbeddingKind, dim: usize, rows: Vec<SparseVec>) -> Result<Self> {
        for r in &rows {
            if r.dim() != dim {
                return Err(Error::shape(format!("row dim {} != {}", r.dim(), dim)));
            }
        }
        Ok(LabelEmbedding { kind, dim, len: rows.len(), rows: Rows::Sparse(rows) })
    }

    pub fn from_dense_rows(kind: EmbeddingKind, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape("dense data length must be a multiple of dim"));
        }
        let len = data.len() / dim;
        Ok(LabelEmbedding { kind, dim, len, rows: Rows::Dense(data) })
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    /// Number of labels.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_is_zero(&self, l: usize) -> bool {
        match &self.rows {
            Rows::Sparse(rows) => rows[l].is_empty(),
            Rows::Dense(data) => data[l * self.dim..(l + 1) * self.dim].iter().all(|&v| v == 0.0),
        }
    }

    pub fn row_sq_norm(&self, l: usize) -> f64 {
        match &self.rows {
            Rows::Sparse(rows) => {
                let n = rows[l].l2_norm();
                n * n
            }
            Rows::Dense(data) => data[l * self.dim..(l + 1) * self.dim]
                .iter()
                .map(|&v| v * v)
                .sum(),
        }
    }

    /// Adds `scale * z_l` into a dense accumulator of length `dim`.
    pub fn add_row_to(&self, l: usize, scale: f64, acc: &mut [f64]) {
        match &self.rows {
            Rows::Sparse(rows) => {
                for (i, v) in rows[l].iter() {
                    acc[i as usize] += scale * v as f64;
                }
            }
            Rows::Dense(data) => {
                for (a, &v) in acc.iter_mut().zip(&data[l * self.dim..(l + 1) * self.dim]) {
                    *a += scale * v;
                }
            }
        }
    }

    /// Dot product of row `l` against a dense vector.
    pub fn dot_row(&self, l: usize, dense: &[f64]) -> f64 {
        match &self.rows {
            Rows::Sparse(rows) => rows[l].dot_dense(dense),
            Rows::Dense(data) => data[l * self.dim..(l + 1) * self.dim]
                .iter()
                .zip(dense)
                .map(|(&a, &b)| a * b)
                .sum(),
        }
    }

    pub fn dense_row(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0f64; self.dim];
        self.add_row_to(l, 1.0, &mut out);
        out
    }

    /// Rows stacked as an L x dim sparse matrix, e.g. for persisting in the
    /// binary blob format.
    pub fn to_csr_matrix(&self) -> CsrMatrix {
        match &self.rows {
            Rows::Sparse(rows) => {
                CsrMatrix::from_rows(self.dim, rows).expect("rows share the embedding dim")
            }
            Rows::Dense(_) => {
                let rows: Vec<SparseVec> =
                    (0..self.len).map(|l| SparseVec::from_dense(&self.dense_row(l))).collect();
                CsrMatrix::from_rows(self.dim, &rows).expect("rows share the embedding dim")
            }
        }
    }
}

/// PII: each label is the L2-normalized indicator of its positive instances
/// (column `l` of Y). Labels with no positives get a zero row.
pub fn embed_pii(y: &CsrMatrix) -> LabelEmbedding {
    let y_csc = y.to_csc();
    let n = y.rows();
    let rows: Vec<SparseVec> = (0..y.cols())
        .map(|l| {
            let (idx, _) = y_csc.col(l);
            if idx.is_empty() {
                return SparseVec::empty(n);
            }
            let scale = 1.0 / (idx.len() as f64).sqrt();
            let entries = idx.iter().map(|&i| (i, scale as f32)).collect();
            SparseVec::new(n, entries).expect("indicator entries are valid")
        })
        .collect();
    LabelEmbedding { kind: EmbeddingKind::Pii, dim: n, len: y.cols(), rows: Rows::Sparse(rows) }
}

fn aggregate_column(
    x: &CsrMatrix,
    instances: &[u32],
    acc: &mut [f64],
    touched: &mut Vec<u32>,
) -> SparseVec {
    for &i in instances {
        let (idx, val) = x.row(i as usize);
        for (&f, &v) in idx.iter().zip(val) {
            if acc[f as usize] == 0.0 {
                touched.push(f);
            }
            acc[f as usize] += v as f64;
        }
    }
    touched.sort_unstable();
    let norm: f64 = touched.iter().map(|&f| acc[f as usize] * acc[f as usize]).sum::<f64>().sqrt();
    let mut entries = Vec::with_capacity(touched.len());
    if norm > 0.0 {
        for &f in touched.iter() {
            let v = (acc[f as usize] / norm) as f32;
            if v != 0.0 {
                entries.push((f, v));
            }
        }
    }
    for &f in touched.iter() {
        acc[f as usize] = 0.0;
    }
    touched.clear();
    SparseVec::new(x.cols(), entries).expect("aggregated entries are valid")
}

/// PIFA: each label aggregates the feature vectors of its positive
/// instances, `v_l = (X^T Y)_l`, then normalizes to unit length.
pub fn embed_pifa(x: &CsrMatrix, y: &CsrMatrix) -> Result<LabelEmbedding> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "X has {} rows but Y has {}",
            x.rows(),
            y.rows()
        )));
    }
    let y_csc = y.to_csc();
    let d = x.cols();
    let rows: Vec<SparseVec> = (0..y.cols())
        .into_par_iter()
        .map_init(
            || (vec![0f64; d], Vec::new()),
            |(acc, touched), l| {
                let (instances, _) = y_csc.col(l);
                aggregate_column(x, instances, acc, touched)
            },
        )
        .collect();
    Ok(LabelEmbedding { kind: EmbeddingKind::Pifa, dim: d, len: y.cols(), rows: Rows::Sparse(rows) })
}

/// PIFA+LF: per-label convex blend `(1 - alpha_l) * z~_l + alpha_l * z_l^PIFA`
/// of given label features `z_tilde` (L x d) with the PIFA rows.
pub fn embed_pifa_lf(
    x: &CsrMatrix,
    y: &CsrMatrix,
    z_tilde: &CsrMatrix,
    alpha: &[f32],
) -> Result<LabelEmbedding> {
    if z_tilde.rows() != y.cols() {
        return Err(Error::shape(format!(
            "label feature matrix has {} rows for {} labels",
            z_tilde.rows(),
            y.cols()
        )));
    }
    if z_tilde.cols() != x.cols() {
        return Err(Error::shape("label features must share the instance feature dimension"));
    }
    if alpha.len() != y.cols() {
        return Err(Error::arg("alpha must have one weight per label"));
    }
    if alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::arg("alpha weights must lie in [0, 1]"));
    }
    let pifa = embed_pifa(x, y)?;
    let pifa_rows = match &pifa.rows {
        Rows::Sparse(rows) => rows,
        Rows::Dense(_) => unreachable!(),
    };
    let d = x.cols();
    let rows: Vec<SparseVec> = (0..y.cols())
        .map(|l| {
            let a = alpha[l] as f64;
            let mut merged: Vec<(u32, f64)> = Vec::new();
            let (ti, tv) = z_tilde.row(l);
            for (&f, &v) in ti.iter().zip(tv) {
                merged.push((f, (1.0 - a) * v as f64));
            }
            for (f, v) in pifa_rows[l].iter() {
                merged.push((f, a * v as f64));
            }
            merged.sort_unstable_by_key(|&(f, _)| f);
            let mut entries: Vec<(u32, f32)> = Vec::with_capacity(merged.len());
            for (f, v) in merged {
                match entries.last_mut() {
                    Some(last) if last.0 == f => last.1 += v as f32,
                    _ => entries.push((f, v as f32)),
                }
            }
            entries.retain(|&(_, v)| v != 0.0);
            SparseVec::new(d, entries).expect("blend entries are valid")
        })
        .collect();
    Ok(LabelEmbedding { kind: EmbeddingKind::PifaLf, dim: d, len: y.cols(), rows: Rows::Sparse(rows) })
}

/// Top singular pairs of the degree-normalized label matrix.
#[derive(Debug, Clone)]
pub struct SpectralSvd {
    /// Singular values, descending.
    pub sigmas: Vec<f64>,
    /// Right singular vectors of the normalized matrix, each of length L,
    /// orthonormal; components on empty labels are zero.
    pub vectors: Vec<Vec<f64>>,
}

fn mgs_orthonormalize(vectors: &mut [Vec<f64>], rng_state: &mut u64, active_rows: &[usize]) {
    let r = vectors.len();
    for j in 0..r {
        for i in 0..j {
            let dot: f64 = vectors[j].iter().zip(&vectors[i]).map(|(a, b)| a * b).sum();
            let (head, tail) = vectors.split_at_mut(j);
            for (a, b) in tail[0].iter_mut().zip(&head[i]) {
                *a -= dot * b;
            }
        }
        let norm: f64 = vectors[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Deteriorated direction: reseed deterministically and redo this
            // vector against the ones already fixed.
            for &row in active_rows {
                *rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                vectors[j][row] = ((*rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            }
            for i in 0..j {
                let dot: f64 = vectors[j].iter().zip(&vectors[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = vectors.split_at_mut(j);
                for (a, b) in tail[0].iter_mut().zip(&head[i]) {
                    *a -= dot * b;
                }
            }
            let norm: f64 = vectors[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in vectors[j].iter_mut() {
                *v /= norm;
            }
        } else {
            for v in vectors[j].iter_mut() {
                *v /= norm;
            }
        }
    }
}

const SPECTRAL_MAX_ITER: usize = 200;
const SPECTRAL_TOL: f64 = 1e-8;

/// Computes the top `r` singular values and right singular vectors of
/// `D1^{-1/2} Y D2^{-1/2}` by subspace iteration with re-orthogonalization.
pub fn spectral_svd(y: &CsrMatrix, r: usize) -> Result<SpectralSvd> {
    let (n, l) = (y.rows(), y.cols());
    let mut d1 = vec![0f64; n];
    let mut d2 = vec![0f64; l];
    for i in 0..n {
        let (idx, val) = y.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            d1[i] += v as f64;
            d2[j as usize] += v as f64;
        }
    }
    let n_nonempty = d1.iter().filter(|&&v| v > 0.0).count();
    let active: Vec<usize> = (0..l).filter(|&j| d2[j] > 0.0).collect();
    if r > n_nonempty.min(active.len()) {
        return Err(Error::arg(format!(
            "requested {r} singular vectors but the nonempty graph is {}x{}",
            n_nonempty,
            active.len()
        )));
    }
    let s1: Vec<f64> = d1.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let s2: Vec<f64> = d2.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();

    // Deterministic pseudo-random init restricted to nonempty labels.
    let mut state = 0x5eed_cafe_f00d_u64;
    let mut vectors: Vec<Vec<f64>> = (0..r)
        .map(|_| {
            let mut v = vec![0f64; l];
            for &row in &active {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v[row] = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            }
            v
        })
        .collect();
    mgs_orthonormalize(&mut vectors, &mut state, &active);

    let mut sigmas = vec![0f64; r];
    let mut u = vec![0f64; n];
    for _ in 0..SPECTRAL_MAX_ITER {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(r);
        let mut new_sigmas = vec![0f64; r];
        for (j, v) in vectors.iter().enumerate() {
            // u = Ytilde v
            u.iter_mut().for_each(|e| *e = 0.0);
            for i in 0..n {
                let (idx, val) = y.row(i);
                let mut acc = 0f64;
                for (&c, &yv) in idx.iter().zip(val) {
                    acc += yv as f64 * s2[c as usize] * v[c as usize];
                }
                u[i] = acc * s1[i];
            }
            new_sigmas[j] = u.iter().map(|&e| e * e).sum::<f64>().sqrt();
            // w = Ytilde^T u
            let mut w = vec![0f64; l];
            for i in 0..n {
                let (idx, val) = y.row(i);
                let ui = u[i] * s1[i];
                if ui == 0.0 {
                    continue;
                }
                for (&c, &yv) in idx.iter().zip(val) {
                    w[c as usize] += yv as f64 * s2[c as usize] * ui;
                }
            }
            next.push(w);
        }
        mgs_orthonormalize(&mut next, &mut state, &active);
        let drift = new_sigmas
            .iter()
            .zip(&sigmas)
            .map(|(a, b)| (a - b).abs())
            .fold(0f64, f64::max);
        vectors = next;
        sigmas = new_sigmas;
        if drift < SPECTRAL_TOL {
            break;
        }
    }

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap());
    let sigmas_sorted = order.iter().map(|&i| sigmas[i]).collect();
    let vectors_sorted = order.into_iter().map(|i| std::mem::take(&mut vectors[i])).collect();
    Ok(SpectralSvd { sigmas: sigmas_sorted, vectors: vectors_sorted })
}

/// Spectral label embedding: rows of `D2^{-1/2} [v_2, ..., v_{k+1}]^T` from
/// the normalized bipartite label graph. Empty labels get zero rows.
pub fn embed_spectral(y: &CsrMatrix, k: usize) -> Result<LabelEmbedding> {
    if k == 0 {
        return Err(Error::arg("spectral embedding needs k >= 1"));
    }
    let l = y.cols();
    let mut d2 = vec![0f64; l];
    let mut empty_rows = 0usize;
    for i in 0..y.rows() {
        let (idx, val) = y.row(i);
        if idx.is_empty() {
            empty_rows += 1;
        }
        for (&j, &v) in idx.iter().zip(val) {
            d2[j as usize] += v as f64;
        }
    }
    let empty_cols = d2.iter().filter(|&&v| v == 0.0).count();
    if empty_rows > 0 || empty_cols > 0 {
        warn!(
            "spectral embedding: {empty_rows} empty instances and {empty_cols} empty labels get zero rows"
        );
    }
    let svd = spectral_svd(y, k + 1)?;
    let mut data = vec![0f64; l * k];
    for t in 0..k {
        let v = &svd.vectors[t + 1];
        for j in 0..l {
            if d2[j] > 0.0 {
                data[j * k + t] = v[j] / d2[j].sqrt();
            }
        }
    }
    LabelEmbedding::from_dense_rows(EmbeddingKind::Spectral, k, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn csr_from_dense(rows: &[&[f32]]) -> CsrMatrix {
        let cols = rows[0].len();
        let vecs: Vec<SparseVec> = rows
            .iter()
            .map(|r| {
                let entries = r
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &v)| (i as u32, v))
                    .collect();
                SparseVec::new(cols, entries).unwrap()
            })
            .collect();
        CsrMatrix::from_rows(cols, &vecs).unwrap()
    }

    fn random_binary(rng: &mut impl Rng, n: usize, l: usize, density: f64) -> CsrMatrix {
        let vecs: Vec<SparseVec> = (0..n)
            .map(|_| {
                let entries = (0..l)
                    .filter(|_| rng.gen_bool(density))
                    .map(|j| (j as u32, 1.0))
                    .collect();
                SparseVec::new(l, entries).unwrap()
            })
            .collect();
        CsrMatrix::from_rows(l, &vecs).unwrap()
    }

    #[test]
    fn pii_normalized_indicator() {
        let y = csr_from_dense(&[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]]);
        let e = embed_pii(&y);
        let row = e.dense_row(0);
        let s = 1.0 / 2f64.sqrt();
        assert!((row[0] - s).abs() < 1e-7 && (row[2] - s).abs() < 1e-7);
        assert_eq!(row[1], 0.0);
        // Label with no positives is the zero vector.
        assert!(e.row_is_zero(1));
    }

    #[test]
    fn pii_matches_transpose_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_binary(&mut rng, 15, 8, 0.3);
        let e = embed_pii(&y);
        let yd = y.to_dense();
        for l in 0..8 {
            let col: Vec<f64> = (0..15).map(|i| yd[i][l]).collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let row = e.dense_row(l);
            for i in 0..15 {
                let want = if norm > 0.0 { col[i] / norm } else { 0.0 };
                assert!((row[i] - want).abs() < 1e-6);
            }
            let rn = e.row_sq_norm(l).sqrt();
            assert!(rn == 0.0 || (rn - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pifa_single_positive_is_normalized_instance() {
        let x = csr_from_dense(&[&[3.0, 4.0], &[1.0, 0.0]]);
        let y = csr_from_dense(&[&[1.0], &[0.0]]);
        let e = embed_pifa(&x, &y).unwrap();
        let row = e.dense_row(0);
        assert!((row[0] - 0.6).abs() < 1e-6 && (row[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn pifa_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let d = 6;
        let l = 5;
        let x_rows: Vec<SparseVec> = (0..n)
            .map(|_| {
                let mut entries: Vec<(u32, f32)> = Vec::new();
                for j in 0..d {
                    if rng.gen_bool(0.5) {
                        let v = rng.gen_range(-1.0f32..1.0);
                        if v != 0.0 {
                            entries.push((j as u32, v));
                        }
                    }
                }
                SparseVec::new(d, entries).unwrap()
            })
            .collect();
        let x = CsrMatrix::from_rows(d, &x_rows).unwrap();
        let y = random_binary(&mut rng, n, l, 0.4);
        let e = embed_pifa(&x, &y).unwrap();

        let xd = x.to_dense();
        let yd = y.to_dense();
        for lab in 0..l {
            let mut v = vec![0f64; d];
            for i in 0..n {
                if yd[i][lab] != 0.0 {
                    for j in 0..d {
                        v[j] += xd[i][j];
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let row = e.dense_row(lab);
            for j in 0..d {
                let want = if norm > 0.0 { v[j] / norm } else { 0.0 };
                assert!((row[j] - want).abs() < 1e-6, "label {lab} feature {j}");
            }
            let rn = e.row_sq_norm(lab).sqrt();
            assert!(rn == 0.0 || (rn - 1.0).abs() < 1e-6);
        }
        assert!(e.row_is_zero(0) == (0..n).all(|i| yd[i][0] == 0.0));
    }

    #[test]
    fn pifa_shape_mismatch_rejected() {
        let x = csr_from_dense(&[&[1.0]]);
        let y = csr_from_dense(&[&[1.0], &[1.0]]);
        assert!(embed_pifa(&x, &y).is_err());
    }

    #[test]
    fn pifa_lf_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let d = 5;
        let l = 4;
        let x_rows: Vec<SparseVec> = (0..n)
            .map(|_| {
                let mut entries: Vec<(u32, f32)> = Vec::new();
                for j in 0..d {
                    if rng.gen_bool(0.6) {
                        entries.push((j as u32, rng.gen_range(0.1f32..1.0)));
                    }
                }
                SparseVec::new(d, entries).unwrap()
            })
            .collect();
        let x = CsrMatrix::from_rows(d, &x_rows).unwrap();
        let y = random_binary(&mut rng, n, l, 0.5);
        let zt_rows: Vec<SparseVec> = (0..l)
            .map(|_| {
                let mut entries: Vec<(u32, f32)> = Vec::new();
                for j in 0..d {
                    if rng.gen_bool(0.6) {
                        let v = rng.gen_range(-1.0f32..1.0);
                        if v != 0.0 {
                            entries.push((j as u32, v));
                        }
                    }
                }
                SparseVec::new(d, entries).unwrap()
            })
            .collect();
        let zt = CsrMatrix::from_rows(d, &zt_rows).unwrap();

        let pifa = embed_pifa(&x, &y).unwrap();
        let all_one = embed_pifa_lf(&x, &y, &zt, &vec![1.0; l]).unwrap();
        let all_zero = embed_pifa_lf(&x, &y, &zt, &vec![0.0; l]).unwrap();
        let half = embed_pifa_lf(&x, &y, &zt, &vec![0.5; l]).unwrap();
        let quarter = embed_pifa_lf(&x, &y, &zt, &vec![0.25; l]).unwrap();
        for lab in 0..l {
            let p = pifa.dense_row(lab);
            let z = zt.row_vec(lab);
            let mut zd = vec![0f64; d];
            for (i, v) in z.iter() {
                zd[i as usize] = v as f64;
            }
            let one = all_one.dense_row(lab);
            let zero = all_zero.dense_row(lab);
            let h = half.dense_row(lab);
            let q = quarter.dense_row(lab);
            for j in 0..d {
                assert!((one[j] - p[j]).abs() < 1e-6);
                assert!((zero[j] - zd[j]).abs() < 1e-6);
                assert!((h[j] - 0.5 * (zd[j] + p[j])).abs() < 1e-6);
                // Linear in alpha between the endpoints.
                assert!((q[j] - (0.75 * zd[j] + 0.25 * p[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pifa_lf_rejects_bad_alpha() {
        let x = csr_from_dense(&[&[1.0]]);
        let y = csr_from_dense(&[&[1.0]]);
        let zt = csr_from_dense(&[&[1.0]]);
        assert!(embed_pifa_lf(&x, &y, &zt, &[1.5]).is_err());
        assert!(embed_pifa_lf(&x, &y, &zt, &[-0.1]).is_err());
    }

    // One-sided Jacobi SVD on a dense matrix; the independent oracle for the
    // spectral routine.
    fn jacobi_singular_values(a: &[Vec<f64>]) -> Vec<f64> {
        let m = a.len();
        let n = a[0].len();
        // Work on columns of A.
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect();
        for _ in 0..100 {
            let mut off = 0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                    let app: f64 = cols[p].iter().map(|x| x * x).sum();
                    let aqq: f64 = cols[q].iter().map(|x| x * x).sum();
                    off += apq.abs();
                    if apq.abs() < 1e-14 {
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let vp = cols[p][i];
                        let vq = cols[q][i];
                        cols[p][i] = c * vp - s * vq;
                        cols[q][i] = s * vp + c * vq;
                    }
                }
            }
            if off < 1e-13 {
                break;
            }
        }
        let mut sig: Vec<f64> =
            cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        sig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sig
    }

    fn normalized_dense(y: &CsrMatrix) -> Vec<Vec<f64>> {
        let yd = y.to_dense();
        let n = y.rows();
        let l = y.cols();
        let d1: Vec<f64> = yd.iter().map(|r| r.iter().sum()).collect();
        let d2: Vec<f64> = (0..l).map(|j| yd.iter().map(|r| r[j]).sum()).collect();
        let mut out = vec![vec![0f64; l]; n];
        for i in 0..n {
            for j in 0..l {
                if yd[i][j] != 0.0 {
                    out[i][j] = yd[i][j] / (d1[i].sqrt() * d2[j].sqrt());
                }
            }
        }
        out
    }

    #[test]
    fn spectral_identity_has_flat_spectrum() {
        let y = csr_from_dense(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
        ]);
        let svd = spectral_svd(&y, 2).unwrap();
        assert!((svd.sigmas[0] - 1.0).abs() < 1e-6);
        assert!((svd.sigmas[1] - 1.0).abs() < 1e-6);
        let dot: f64 = svd.vectors[0].iter().zip(&svd.vectors[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-6);
        let e = embed_spectral(&y, 1).unwrap();
        // Returned coordinate is v_2 rescaled, hence orthogonal to v_1.
        let emb: Vec<f64> = (0..3).map(|l| e.dense_row(l)[0]).collect();
        let dot2: f64 = emb.iter().zip(&svd.vectors[0]).map(|(a, b)| a * b).sum();
        assert!(dot2.abs() < 1e-6);
    }

    #[test]
    fn spectral_separates_disconnected_blocks() {
        // 6x4: instances 0-2 touch labels {0,1}, instances 3-5 touch {2,3}.
        let y = csr_from_dense(&[
            &[1.0, 1.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 1.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        let e = embed_spectral(&y, 1).unwrap();
        let c: Vec<f64> = (0..4).map(|l| e.dense_row(l)[0]).collect();
        assert!(c[0] * c[1] > 0.0, "labels in block A share sign: {c:?}");
        assert!(c[2] * c[3] > 0.0, "labels in block B share sign: {c:?}");
        assert!(c[0] * c[2] < 0.0, "blocks are separated: {c:?}");
    }

    #[test]
    fn spectral_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_binary(&mut rng, 10, 6, 0.4);
        // Guard against empty rows/cols in this fixture.
        let scaled_rows: Vec<SparseVec> = (0..y.rows())
            .map(|i| {
                let (idx, val) = y.row(i);
                SparseVec::new(
                    6,
                    idx.iter().zip(val).map(|(&j, &v)| (j, 3.0 * v)).collect(),
                )
                .unwrap()
            })
            .collect();
        let y3 = CsrMatrix::from_rows(6, &scaled_rows).unwrap();
        let a = embed_spectral(&y, 2).unwrap();
        let b = embed_spectral(&y3, 2).unwrap();
        for l in 0..6 {
            let ra = a.dense_row(l);
            let rb = b.dense_row(l);
            for t in 0..2 {
                // Scale cancels except for the overall D2^{-1/2} factor.
                assert!((ra[t] - rb[t] * 3f64.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spectral_matches_dense_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = random_binary(&mut rng, 50, 30, 0.2);
        let r = 5;
        let svd = spectral_svd(&y, r).unwrap();
        let oracle = jacobi_singular_values(&normalized_dense(&y));
        for t in 0..r {
            assert!(
                (svd.sigmas[t] - oracle[t]).abs() < 1e-6,
                "sigma_{t}: got {} want {}",
                svd.sigmas[t],
                oracle[t]
            );
        }
        // Orthonormality of the returned vectors.
        for i in 0..r {
            for j in 0..r {
                let dot: f64 =
                    svd.vectors[i].iter().zip(&svd.vectors[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "({i},{j}) dot {dot}");
            }
        }
    }

    #[test]
    fn spectral_k_too_large_rejected() {
        let y = csr_from_dense(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(embed_spectral(&y, 2).is_err());
    }

    #[test]
    fn embeddings_persist_via_matrix_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let y = random_binary(&mut rng, 10, 6, 0.4);
        let emb = embed_pii(&y);
        let as_matrix = emb.to_csr_matrix();
        assert_eq!(as_matrix.rows(), 6);
        assert_eq!(as_matrix.cols(), 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.mat");
        crate::sparse::write_matrix(&path, &crate::sparse::MatrixBlob::Csr(as_matrix.clone()))
            .unwrap();
        let back = crate::sparse::read_matrix(&path).unwrap().into_csr().unwrap();
        assert_eq!(back, as_matrix);
    }
}
