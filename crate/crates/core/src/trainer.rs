//! Recursive training of the layered linear model: per-layer label
//! matrices, hard-negative selection, shortlisted one-vs-rest solves, and
//! model assembly/persistence.
//!
//! Layer t trains one binary classifier per level-t cluster (the "labels"
//! of the induced subproblem) on the instances whose shortlist touches that
//! label's parent cluster. The shortlist comes from the ground-truth
//! cluster assignment (TFN), the partial model's own predictions (MAN), or
//! their union.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indexing::{ClusterChain, IndexingMatrix};
use crate::inference::{batch_predict, CombinerKind, Prediction};
use crate::solver::{solve_binary, BinaryProblem, LossKind};
use crate::sparse::{
    binarize_with_assignment, read_matrix, write_matrix, CscMatrix, CsrMatrix,
    DoublySparseMatrix, MatrixBlob, SparseVec,
};

/// Hard-negative selection scheme for ranker training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NegativeSampling {
    Tfn,
    Man { beam: usize },
    TfnPlusMan { beam: usize },
}

impl NegativeSampling {
    pub fn beam(&self) -> Option<usize> {
        match *self {
            NegativeSampling::Tfn => None,
            NegativeSampling::Man { beam } | NegativeSampling::TfnPlusMan { beam } => Some(beam),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beam() {
            if b < 1 {
                return Err(Error::arg("matcher-aware sampling needs beam >= 1"));
            }
        }
        Ok(())
    }
}

/// Training configuration; defaults mirror the CLI defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub scheme: NegativeSampling,
    pub loss: LossKind,
    pub lambda: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Hard-threshold epsilon applied to every solved weight column.
    pub weight_threshold: f32,
    pub combiner: CombinerKind,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            scheme: NegativeSampling::TfnPlusMan { beam: 10 },
            loss: LossKind::SquaredHinge,
            lambda: 1.0,
            solver_tol: 0.1,
            solver_max_iter: 100,
            weight_threshold: 0.1,
            combiner: CombinerKind::SigmoidProduct,
            seed: 0,
        }
    }
}

/// One trained layer: the ranker weights, the indexing matrix above them,
/// and the per-parent-cluster doubly-sparse weight blocks used at inference.
#[derive(Debug, Clone)]
pub struct LayerModel {
    weights: CscMatrix,
    index: IndexingMatrix,
    children: Vec<Vec<u32>>,
    blocks: Vec<DoublySparseMatrix>,
}

impl LayerModel {
    pub fn new(weights: CscMatrix, index: IndexingMatrix) -> Result<Self> {
        if weights.cols() != index.len() {
            return Err(Error::shape(format!(
                "weight matrix has {} columns for {} indexed labels",
                weights.cols(),
                index.len()
            )));
        }
        let children = index.children();
        let blocks = children
            .iter()
            .map(|members| {
                let cols: Vec<SparseVec> =
                    members.iter().map(|&l| weights.col_vec(l as usize)).collect();
                let block = CscMatrix::from_columns(weights.rows(), &cols)
                    .expect("block columns share the weight dimension");
                DoublySparseMatrix::from_csc(&block)
            })
            .collect();
        Ok(LayerModel { weights, index, children, blocks })
    }

    pub fn weights(&self) -> &CscMatrix {
        &self.weights
    }

    pub fn index(&self) -> &IndexingMatrix {
        &self.index
    }

    /// Labels of this layer grouped under the given parent cluster.
    pub fn children_of(&self, parent: usize) -> &[u32] {
        &self.children[parent]
    }

    pub fn block(&self, parent: usize) -> &DoublySparseMatrix {
        &self.blocks[parent]
    }

    pub fn num_labels(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_parents(&self) -> usize {
        self.index.num_clusters()
    }
}

/// Metadata stored alongside the weight blobs in a model directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub depth: usize,
    pub branching: Option<usize>,
    pub k_per_level: Vec<usize>,
    pub dim: usize,
    pub num_labels: usize,
    pub combiner: CombinerKind,
    pub loss: LossKind,
    pub lambda: f64,
    pub weight_threshold: f32,
    pub scheme: NegativeSampling,
    pub seed: u64,
    /// Path of the vocabulary the features were built with, when known.
    pub vectorizer: Option<String>,
    /// Labels with no positive instances anywhere; their columns are zero.
    pub unlearnable_labels: usize,
}

/// The full layered model.
#[derive(Debug, Clone)]
pub struct XrLinearModel {
    layers: Vec<LayerModel>,
    combiner: CombinerKind,
    meta: ModelMeta,
}

impl XrLinearModel {
    pub fn from_parts(
        layers: Vec<LayerModel>,
        combiner: CombinerKind,
        meta: ModelMeta,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("a model needs at least one layer"));
        }
        if layers[0].num_parents() != 1 {
            return Err(Error::shape("the first layer must hang off a single root"));
        }
        for t in 1..layers.len() {
            if layers[t].num_parents() != layers[t - 1].num_labels() {
                return Err(Error::shape(format!(
                    "layer {} expects {} parents but layer {} has {} labels",
                    t + 1,
                    layers[t].num_parents(),
                    t,
                    layers[t - 1].num_labels()
                )));
            }
            if layers[t].weights().rows() != layers[0].weights().rows() {
                return Err(Error::shape("all layers must share the feature dimension"));
            }
        }
        Ok(XrLinearModel { layers, combiner, meta })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weights().rows()
    }

    pub fn num_labels(&self) -> usize {
        self.layers.last().unwrap().num_labels()
    }

    pub fn layer(&self, t: usize) -> &LayerModel {
        &self.layers[t - 1]
    }

    pub fn combiner(&self) -> CombinerKind {
        self.combiner
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    /// Records the vocabulary path the features came from.
    pub fn set_vectorizer_ref(&mut self, vectorizer: Option<String>) {
        self.meta.vectorizer = vectorizer;
    }

    /// Byte accounting summed over every layer's doubly-sparse blocks, both
    /// as raw nonzero payload and with the per-row hash-index overhead.
    pub fn memory_footprint(&self) -> crate::sparse::MemoryFootprint {
        let mut raw = 0usize;
        let mut with_overhead = 0usize;
        for layer in &self.layers {
            for parent in 0..layer.num_parents() {
                let f = layer.block(parent).memory_footprint();
                raw += f.raw_nnz_bytes;
                with_overhead += f.with_overhead_bytes;
            }
        }
        crate::sparse::MemoryFootprint { raw_nnz_bytes: raw, with_overhead_bytes: with_overhead }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("meta.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &self.meta)?;
        for (i, layer) in self.layers.iter().enumerate() {
            write_matrix(
                &dir.join(format!("C_{}.mat", i + 1)),
                &MatrixBlob::Csc(layer.index().to_csc()),
            )?;
            write_matrix(
                &dir.join(format!("W_{}.mat", i + 1)),
                &MatrixBlob::Csc(layer.weights().clone()),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = std::fs::File::open(dir.join("meta.json"))?;
        let meta: ModelMeta = serde_json::from_reader(std::io::BufReader::new(f))?;
        let mut layers = Vec::with_capacity(meta.depth);
        for t in 1..=meta.depth {
            let c = read_matrix(&dir.join(format!("C_{t}.mat")))?.into_csc()?;
            let w = read_matrix(&dir.join(format!("W_{t}.mat")))?.into_csc()?;
            layers.push(LayerModel::new(w, IndexingMatrix::from_csc(&c)?)?);
        }
        let combiner = meta.combiner;
        XrLinearModel::from_parts(layers, combiner, meta)
    }
}

/// `Y^(t) = binarize(Y^(t+1) C^(t+1))`: collapses the layer-(t+1) label
/// matrix onto the clusters above it.
pub fn build_layer_labels(y_next: &CsrMatrix, c_next: &IndexingMatrix) -> Result<CsrMatrix> {
    if y_next.cols() != c_next.len() {
        return Err(Error::shape(format!(
            "label matrix has {} columns but the indexing maps {} items",
            y_next.cols(),
            c_next.len()
        )));
    }
    binarize_with_assignment(y_next, c_next.assignments(), c_next.num_clusters())
}

/// Chooses the shortlist matrix: ground truth (TFN), matcher predictions
/// (MAN), or their elementwise-binarized union.
pub fn select_negatives(
    m: &CsrMatrix,
    mhat: Option<&CsrMatrix>,
    scheme: NegativeSampling,
) -> Result<CsrMatrix> {
    scheme.validate()?;
    fn need_hat<'a>(m: &CsrMatrix, mhat: Option<&'a CsrMatrix>) -> Result<&'a CsrMatrix> {
        let mhat = mhat.ok_or_else(|| {
            Error::arg("matcher-aware negatives requested but no matcher predictions given")
        })?;
        if mhat.rows() != m.rows() || mhat.cols() != m.cols() {
            return Err(Error::shape("matcher predictions must match the truth assignment shape"));
        }
        Ok(mhat)
    }
    match scheme {
        NegativeSampling::Tfn => Ok(m.clone()),
        NegativeSampling::Man { .. } => Ok(need_hat(m, mhat)?.clone()),
        NegativeSampling::TfnPlusMan { .. } => {
            let mhat = need_hat(m, mhat)?;
            let rows: Vec<SparseVec> = (0..m.rows())
                .map(|i| {
                    let (a, _) = m.row(i);
                    let (b, _) = mhat.row(i);
                    let mut union: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
                    union.sort_unstable();
                    union.dedup();
                    let entries = union.into_iter().map(|k| (k, 1.0f32)).collect();
                    SparseVec::new(m.cols(), entries).expect("union entries are valid")
                })
                .collect();
            CsrMatrix::from_rows(m.cols(), &rows)
        }
    }
}

/// The restricted training set of every layer label: instance ids whose
/// shortlist touches the label's parent cluster, with +-1 signs from Y_t.
pub fn build_label_problems(
    y_t: &CsrMatrix,
    c_t: &IndexingMatrix,
    mbar: &CsrMatrix,
) -> Result<Vec<(Vec<u32>, Vec<i8>)>> {
    if y_t.cols() != c_t.len() {
        return Err(Error::shape(format!(
            "layer labels {} disagree with indexing rows {}",
            y_t.cols(),
            c_t.len()
        )));
    }
    if mbar.cols() != c_t.num_clusters() {
        return Err(Error::shape(format!(
            "shortlist has {} clusters but indexing maps into {}",
            mbar.cols(),
            c_t.num_clusters()
        )));
    }
    if mbar.rows() != y_t.rows() {
        return Err(Error::shape("shortlist and label matrix row counts differ"));
    }
    let mbar_csc = mbar.to_csc();
    let y_csc = y_t.to_csc();
    let out = (0..y_t.cols())
        .map(|label| {
            let parent = c_t.parent_of(label) as usize;
            let (instances, _) = mbar_csc.col(parent);
            let (positives, _) = y_csc.col(label);
            let mut signs = Vec::with_capacity(instances.len());
            let mut p = 0usize;
            for &i in instances {
                while p < positives.len() && positives[p] < i {
                    p += 1;
                }
                let is_pos = p < positives.len() && positives[p] == i;
                signs.push(if is_pos { 1i8 } else { -1 });
            }
            (instances.to_vec(), signs)
        })
        .collect();
    Ok(out)
}

fn label_seed(seed: u64, layer: usize, label: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(layer as u64).rotate_left(17) ^ splitmix(label as u64))
}

/// Trains one layer: column `l` solves the restricted binary problem for
/// label `l`, then is hard-thresholded. Labels whose restricted set is
/// empty get zero columns.
pub fn train_layer(
    x: &CsrMatrix,
    y_t: &CsrMatrix,
    c_t: &IndexingMatrix,
    mbar: &CsrMatrix,
    cfg: &TrainerConfig,
    layer: usize,
) -> Result<CscMatrix> {
    let problems = build_label_problems(y_t, c_t, mbar)?;
    let empty_sets = problems.iter().filter(|(i, _)| i.is_empty()).count();
    if empty_sets > 0 {
        warn!("layer {layer}: {empty_sets} labels have empty restricted instance sets; their columns stay zero");
    }
    // Labels with no positive instance anywhere cannot be learned and get
    // zero columns outright.
    let mut has_positive = vec![false; y_t.cols()];
    for i in 0..y_t.rows() {
        for &l in y_t.row(i).0 {
            has_positive[l as usize] = true;
        }
    }
    let columns: Vec<SparseVec> = problems
        .into_par_iter()
        .enumerate()
        .map(|(label, (instances, signs))| -> Result<SparseVec> {
            if instances.is_empty() || !has_positive[label] {
                return Ok(SparseVec::empty(x.cols()));
            }
            let prob = BinaryProblem::new(instances, signs, cfg.loss, cfg.lambda)?;
            let solved = solve_binary(
                x,
                &prob,
                cfg.solver_tol,
                cfg.solver_max_iter,
                label_seed(cfg.seed, layer, label),
            )?;
            solved.weights.hard_threshold(cfg.weight_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    CscMatrix::from_columns(x.cols(), &columns)
}

/// Binary matcher-prediction matrix from per-row top-beam predictions.
fn predictions_to_matrix(preds: &[Prediction], cols: usize) -> Result<CsrMatrix> {
    let rows: Vec<SparseVec> = preds
        .iter()
        .map(|p| {
            let mut ids: Vec<u32> = p.iter().map(|(l, _)| l).collect();
            ids.sort_unstable();
            ids.dedup();
            let entries = ids.into_iter().map(|l| (l, 1.0f32)).collect();
            SparseVec::new(cols, entries).expect("prediction ids are valid")
        })
        .collect();
    CsrMatrix::from_rows(cols, &rows)
}

fn count_unlearnable(y: &CsrMatrix) -> usize {
    let mut has_positive = vec![false; y.cols()];
    for i in 0..y.rows() {
        let (idx, _) = y.row(i);
        for &l in idx {
            has_positive[l as usize] = true;
        }
    }
    has_positive.iter().filter(|&&h| !h).count()
}

/// Full recursive training over a cluster chain.
///
/// Layer t's matcher is the model assembled from layers 1..t-1 (a dummy
/// all-ones matcher at t = 1); matcher-aware shortlists come from beam
/// inference of that partial model over the training inputs.
pub fn train_xr_linear(
    x: &CsrMatrix,
    y: &CsrMatrix,
    chain: &ClusterChain,
    cfg: &TrainerConfig,
) -> Result<XrLinearModel> {
    cfg.scheme.validate()?;
    if x.rows() != y.rows() {
        return Err(Error::shape(format!("X has {} rows but Y has {}", x.rows(), y.rows())));
    }
    if chain.num_labels() != y.cols() {
        return Err(Error::shape(format!(
            "chain indexes {} labels but Y has {}",
            chain.num_labels(),
            y.cols()
        )));
    }
    let depth = chain.depth();

    // Y^(D) = Y; Y^(t) = binarize(Y^(t+1) C^(t+1)); stored so that
    // layer_labels[t-1] = Y^(t).
    let mut layer_labels: Vec<CsrMatrix> = Vec::with_capacity(depth);
    layer_labels.push(y.clone());
    for t in (1..depth).rev() {
        let collapsed = build_layer_labels(layer_labels.last().unwrap(), chain.level(t + 1))?;
        layer_labels.push(collapsed);
    }
    layer_labels.reverse();

    let meta = ModelMeta {
        depth,
        branching: chain.branching(),
        k_per_level: (1..=depth).map(|t| chain.k_at(t)).collect(),
        dim: x.cols(),
        num_labels: y.cols(),
        combiner: cfg.combiner,
        loss: cfg.loss,
        lambda: cfg.lambda,
        weight_threshold: cfg.weight_threshold,
        scheme: cfg.scheme,
        seed: cfg.seed,
        vectorizer: None,
        unlearnable_labels: count_unlearnable(y),
    };

    let mut layers: Vec<LayerModel> = Vec::with_capacity(depth);
    for t in 1..=depth {
        let c_t = chain.level(t).clone();
        let m_t = build_layer_labels(&layer_labels[t - 1], &c_t)?;
        let mhat = match cfg.scheme {
            NegativeSampling::Tfn => None,
            NegativeSampling::Man { beam } | NegativeSampling::TfnPlusMan { beam } => {
                if t == 1 {
                    // Dummy matcher: the single root cluster is relevant to
                    // every instance.
                    let ones: Vec<SparseVec> = (0..x.rows())
                        .map(|_| SparseVec::new(1, vec![(0, 1.0)]).unwrap())
                        .collect();
                    Some(CsrMatrix::from_rows(1, &ones)?)
                } else {
                    let partial =
                        XrLinearModel::from_parts(layers.clone(), cfg.combiner, meta.clone())?;
                    let preds = batch_predict(&partial, x, beam, beam)?;
                    Some(predictions_to_matrix(&preds, c_t.num_clusters())?)
                }
            }
        };
        let mbar = select_negatives(&m_t, mhat.as_ref(), cfg.scheme)?;
        let w_t = train_layer(x, &layer_labels[t - 1], &c_t, &mbar, cfg, t)?;
        layers.push(LayerModel::new(w_t, c_t)?);
    }

    XrLinearModel::from_parts(layers, cfg.combiner, meta)
}
