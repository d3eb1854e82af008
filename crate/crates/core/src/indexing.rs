//! Semantic label indexing: recursive balanced B-ary (spherical) k-means
//! over label embeddings, producing a chain of indexing matrices.
//!
//! Each level-t matrix maps the K_t items of layer t onto the K_{t-1}
//! clusters above them (K_0 = 1, K_D = L). Chains built here number child
//! clusters so that internal levels follow `parent = id / B`; labels whose
//! embedding row is all-zero carry no geometry and are placed round-robin
//! after the split converges.

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::LabelEmbedding;
use crate::error::{Error, Result};
use crate::sparse::{assignment_from_indexing, read_matrix, write_matrix, CscMatrix, MatrixBlob, SparseVec};

/// Clustering objective: squared euclidean distance to the mean, or cosine
/// similarity to the normalized mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Kmeans,
    Skmeans,
}

/// A flat label-to-cluster assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub assignments: Vec<u32>,
    pub num_clusters: usize,
}

/// Result of one k-means split: the assignment plus the per-iteration
/// objective trace (non-increasing for k-means, non-decreasing for
/// spherical k-means).
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub assignment: ClusterAssignment,
    pub objectives: Vec<f64>,
}

fn mix_seed(seed: u64, level: u64, node: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(level.wrapping_mul(0x9e37_79b9) ^ splitmix(node)))
}

struct SplitProblem<'a> {
    emb: &'a LabelEmbedding,
    /// Labels with geometry (nonzero rows), as indices into `subset`.
    geometric: Vec<usize>,
    subset: &'a [u32],
    b: usize,
    objective: Objective,
    balanced: bool,
}

impl SplitProblem<'_> {
    fn scores(&self, centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
        // Higher is better for both objectives (negated distance for k-means).
        self.geometric
            .iter()
            .map(|&p| {
                let label = self.subset[p] as usize;
                centroids
                    .iter()
                    .map(|mu| {
                        let dot = self.emb.dot_row(label, mu);
                        match self.objective {
                            Objective::Kmeans => {
                                let mu_sq: f64 = mu.iter().map(|v| v * v).sum();
                                -(self.emb.row_sq_norm(label) - 2.0 * dot + mu_sq)
                            }
                            Objective::Skmeans => {
                                let zn = self.emb.row_sq_norm(label).sqrt();
                                let mn = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
                                if zn == 0.0 || mn == 0.0 {
                                    0.0
                                } else {
                                    dot / (zn * mn)
                                }
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Greedy balanced assignment: points ordered by how much they prefer
    /// their best cluster over the runner-up, each taking the best cluster
    /// that still has capacity. At most `m mod B` clusters may reach
    /// ceil(m/B); the rest stop at floor(m/B).
    fn assign_balanced(&self, scores: &[Vec<f64>]) -> Vec<u32> {
        let m = self.geometric.len();
        let cap_lo = m / self.b;
        let mut extra_tokens = m % self.b;
        let mut order: Vec<usize> = (0..m).collect();
        let margins: Vec<f64> = scores
            .iter()
            .map(|s| {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for &v in s {
                    if v > best {
                        second = best;
                        best = v;
                    } else if v > second {
                        second = v;
                    }
                }
                if second == f64::NEG_INFINITY {
                    0.0
                } else {
                    best - second
                }
            })
            .collect();
        order.sort_by(|&a, &b| margins[b].partial_cmp(&margins[a]).unwrap().then(a.cmp(&b)));

        let mut sizes = vec![0usize; self.b];
        let mut out = vec![0u32; m];
        for p in order {
            let mut best: Option<usize> = None;
            for k in 0..self.b {
                let open = sizes[k] < cap_lo || (extra_tokens > 0 && sizes[k] == cap_lo);
                if !open {
                    continue;
                }
                if best.is_none_or(|cur| scores[p][k] > scores[p][cur]) {
                    best = Some(k);
                }
            }
            let k = best.expect("capacity always remains for unassigned points");
            if sizes[k] == cap_lo {
                extra_tokens -= 1;
            }
            sizes[k] += 1;
            out[p] = k as u32;
        }
        out
    }

    fn assign_plain(&self, scores: &[Vec<f64>]) -> Vec<u32> {
        let m = self.geometric.len();
        let mut out = vec![0u32; m];
        for p in 0..m {
            let mut best = 0usize;
            for k in 1..self.b {
                if scores[p][k] > scores[p][best] {
                    best = k;
                }
            }
            out[p] = best as u32;
        }
        // Repair empty clusters by stealing the point that fits its current
        // cluster worst, from clusters that can spare one.
        loop {
            let mut sizes = vec![0usize; self.b];
            for &a in &out {
                sizes[a as usize] += 1;
            }
            let Some(empty) = (0..self.b).find(|&k| sizes[k] == 0) else { break };
            let victim = (0..m)
                .filter(|&p| sizes[out[p] as usize] >= 2)
                .min_by(|&a, &b| {
                    scores[a][out[a] as usize]
                        .partial_cmp(&scores[b][out[b] as usize])
                        .unwrap()
                        .then(a.cmp(&b))
                });
            match victim {
                Some(p) => out[p] = empty as u32,
                None => break,
            }
        }
        out
    }

    fn assign(&self, centroids: &[Vec<f64>]) -> Vec<u32> {
        let scores = self.scores(centroids);
        if self.balanced {
            self.assign_balanced(&scores)
        } else {
            self.assign_plain(&scores)
        }
    }

    fn centroids(&self, assign: &[u32], prev: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let dim = self.emb.dim();
        let mut sums = vec![vec![0f64; dim]; self.b];
        let mut counts = vec![0usize; self.b];
        for (p, &k) in assign.iter().enumerate() {
            let label = self.subset[self.geometric[p]] as usize;
            self.emb.add_row_to(label, 1.0, &mut sums[k as usize]);
            counts[k as usize] += 1;
        }
        for k in 0..self.b {
            match self.objective {
                Objective::Kmeans => {
                    if counts[k] > 0 {
                        let inv = 1.0 / counts[k] as f64;
                        sums[k].iter_mut().for_each(|v| *v *= inv);
                    } else if let Some(prev) = prev {
                        sums[k].copy_from_slice(&prev[k]);
                    }
                }
                Objective::Skmeans => {
                    let norm: f64 = sums[k].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        sums[k].iter_mut().for_each(|v| *v /= norm);
                    } else if let Some(prev) = prev {
                        sums[k].copy_from_slice(&prev[k]);
                    }
                }
            }
        }
        sums
    }

    fn objective_value(&self, assign: &[u32], centroids: &[Vec<f64>]) -> f64 {
        let mut total = 0f64;
        for (p, &k) in assign.iter().enumerate() {
            let label = self.subset[self.geometric[p]] as usize;
            let mu = &centroids[k as usize];
            let dot = self.emb.dot_row(label, mu);
            total += match self.objective {
                Objective::Kmeans => {
                    let mu_sq: f64 = mu.iter().map(|v| v * v).sum();
                    self.emb.row_sq_norm(label) - 2.0 * dot + mu_sq
                }
                Objective::Skmeans => {
                    let zn = self.emb.row_sq_norm(label).sqrt();
                    let mn = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if zn == 0.0 || mn == 0.0 {
                        0.0
                    } else {
                        dot / (zn * mn)
                    }
                }
            };
        }
        total
    }

    fn improved(&self, new: f64, old: f64) -> bool {
        match self.objective {
            Objective::Kmeans => new <= old,
            Objective::Skmeans => new >= old,
        }
    }
}

/// Round-robin placement over clusters in ascending-size order, so sizes
/// never spread by more than one.
fn place_zero_rows(assign_geo: &[u32], zero_count: usize, b: usize) -> Vec<u32> {
    let mut sizes = vec![0usize; b];
    for &k in assign_geo {
        sizes[k as usize] += 1;
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by_key(|&k| (sizes[k], k));
    (0..zero_count).map(|i| order[i % b] as u32).collect()
}

/// Splits `subset` into `b` clusters under the chosen objective.
///
/// The returned assignment indexes positions of `subset`. No recorded
/// iteration worsens the objective; iteration stops when the assignment is
/// stable, the objective stops improving, or `max_iter` is reached.
pub fn kmeans_partition(
    emb: &LabelEmbedding,
    subset: &[u32],
    b: usize,
    objective: Objective,
    seed: u64,
    max_iter: usize,
    balanced: bool,
) -> Result<KmeansOutcome> {
    if b < 1 {
        return Err(Error::arg("branching must be >= 1"));
    }
    if subset.len() < b {
        return Err(Error::arg(format!(
            "cannot split {} labels into {} clusters",
            subset.len(),
            b
        )));
    }
    let geometric: Vec<usize> =
        (0..subset.len()).filter(|&p| !emb.row_is_zero(subset[p] as usize)).collect();
    let zeros: Vec<usize> =
        (0..subset.len()).filter(|&p| emb.row_is_zero(subset[p] as usize)).collect();

    let prob = SplitProblem { emb, geometric, subset, b, objective, balanced };

    let mut assign_geo: Vec<u32>;
    let mut history = Vec::new();
    if prob.geometric.len() < b {
        // Too few points with geometry for a k-means split; spread them out
        // deterministically and let the zero rows fill the remainder.
        assign_geo = (0..prob.geometric.len() as u32).collect();
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, prob.geometric.len(), b);
        let dim = emb.dim();
        let mut centroids: Vec<Vec<f64>> = picks
            .iter()
            .map(|p| {
                let label = subset[prob.geometric[p]] as usize;
                let mut c = vec![0f64; dim];
                emb.add_row_to(label, 1.0, &mut c);
                if objective == Objective::Skmeans {
                    let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        c.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                c
            })
            .collect();

        assign_geo = prob.assign(&centroids);
        centroids = prob.centroids(&assign_geo, Some(&centroids));
        let mut obj = prob.objective_value(&assign_geo, &centroids);
        history.push(obj);
        for _ in 1..max_iter {
            let next = prob.assign(&centroids);
            if next == assign_geo {
                break;
            }
            let next_centroids = prob.centroids(&next, Some(&centroids));
            let next_obj = prob.objective_value(&next, &next_centroids);
            if !prob.improved(next_obj, obj) {
                break;
            }
            assign_geo = next;
            centroids = next_centroids;
            obj = next_obj;
            history.push(obj);
        }
    }

    let zero_assign = place_zero_rows(&assign_geo, zeros.len(), b);
    let mut assignments = vec![0u32; subset.len()];
    for (i, &p) in prob.geometric.iter().enumerate() {
        assignments[p] = assign_geo[i];
    }
    for (i, &p) in zeros.iter().enumerate() {
        assignments[p] = zero_assign[i];
    }
    Ok(KmeansOutcome {
        assignment: ClusterAssignment { assignments, num_clusters: b },
        objectives: history,
    })
}

/// One level of a cluster chain: an indexing matrix stored as the
/// assignment vector it encodes (exactly one nonzero per row).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexingMatrix {
    parent_of: Vec<u32>,
    num_clusters: usize,
}

impl IndexingMatrix {
    pub fn new(parent_of: Vec<u32>, num_clusters: usize) -> Result<Self> {
        if let Some(&bad) = parent_of.iter().find(|&&k| k as usize >= num_clusters) {
            return Err(Error::arg(format!("cluster id {bad} out of range {num_clusters}")));
        }
        Ok(IndexingMatrix { parent_of, num_clusters })
    }

    /// Items mapped by this level (rows of the matrix).
    pub fn len(&self) -> usize {
        self.parent_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent_of.is_empty()
    }

    /// Clusters at the level above (columns of the matrix).
    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn parent_of(&self, item: usize) -> u32 {
        self.parent_of[item]
    }

    pub fn assignments(&self) -> &[u32] {
        &self.parent_of
    }

    /// Members of each cluster, in ascending item order.
    pub fn children(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (item, &k) in self.parent_of.iter().enumerate() {
            out[k as usize].push(item as u32);
        }
        out
    }

    pub fn to_csc(&self) -> CscMatrix {
        let rows = self.parent_of.len();
        let cols: Vec<SparseVec> = self
            .children()
            .into_iter()
            .map(|members| {
                let entries = members.into_iter().map(|l| (l, 1.0f32)).collect();
                SparseVec::new(rows, entries).expect("membership entries are valid")
            })
            .collect();
        CscMatrix::from_columns(rows, &cols).expect("indexing columns are valid")
    }

    pub fn from_csc(c: &CscMatrix) -> Result<Self> {
        let parent_of = assignment_from_indexing(c)?;
        IndexingMatrix::new(parent_of, c.cols())
    }
}

/// The series of indexing matrices of a hierarchical label clustering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterChain {
    levels: Vec<IndexingMatrix>,
    branching: Option<usize>,
}

/// Per-label split participation counts from chain construction.
#[derive(Debug, Clone)]
pub struct ChainStats {
    pub splits_per_label: Vec<u32>,
}

impl ClusterChain {
    /// Builds from explicit levels; level t maps K_t items to K_{t-1}
    /// clusters, with K_0 = 1 and adjacent shapes composing.
    pub fn from_levels(levels: Vec<IndexingMatrix>, branching: Option<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::arg("a cluster chain needs at least one level"));
        }
        if levels[0].num_clusters() != 1 {
            return Err(Error::shape("the root level must map into a single cluster"));
        }
        for t in 1..levels.len() {
            if levels[t].num_clusters() != levels[t - 1].len() {
                return Err(Error::shape(format!(
                    "level {} maps into {} clusters but level {} has {} items",
                    t + 1,
                    levels[t].num_clusters(),
                    t,
                    levels[t - 1].len()
                )));
            }
        }
        Ok(ClusterChain { levels, branching })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn num_labels(&self) -> usize {
        self.levels.last().unwrap().len()
    }

    pub fn branching(&self) -> Option<usize> {
        self.branching
    }

    /// K_t for t in 1..=D.
    pub fn k_at(&self, t: usize) -> usize {
        self.levels[t - 1].len()
    }

    pub fn level(&self, t: usize) -> &IndexingMatrix {
        &self.levels[t - 1]
    }

    /// Cluster containing `label` at level `t`, from composing the matrices
    /// below it (t = D gives the label itself).
    pub fn cluster_at_level(&self, t: usize, label: usize) -> u32 {
        let mut id = label as u32;
        for level in (t + 1..=self.depth()).rev() {
            id = self.levels[level - 1].parent_of(id as usize);
        }
        id
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = ChainManifest {
            depth: self.depth(),
            branching: self.branching,
            k_per_level: (1..=self.depth()).map(|t| self.k_at(t)).collect(),
        };
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
        for (i, level) in self.levels.iter().enumerate() {
            let path = dir.join(format!("C_{}.mat", i + 1));
            write_matrix(&path, &MatrixBlob::Csc(level.to_csc()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let loc = dir.display().to_string();
        let f = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: ChainManifest = serde_json::from_reader(std::io::BufReader::new(f))?;
        let mut levels = Vec::with_capacity(manifest.depth);
        for t in 1..=manifest.depth {
            let blob = read_matrix(&dir.join(format!("C_{t}.mat")))?;
            let level = IndexingMatrix::from_csc(&blob.into_csc()?)?;
            if level.len() != manifest.k_per_level[t - 1] {
                return Err(Error::format(&loc, format!("level {t} shape disagrees with manifest")));
            }
            levels.push(level);
        }
        ClusterChain::from_levels(levels, manifest.branching)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainManifest {
    depth: usize,
    branching: Option<usize>,
    k_per_level: Vec<usize>,
}

/// Configuration for [`build_cluster_chain`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    pub branching: usize,
    /// Leaf cluster count; must be a power of `branching`.
    pub leaf_clusters: usize,
    pub objective: Objective,
    pub balanced: bool,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            branching: 8,
            leaf_clusters: 8,
            objective: Objective::Skmeans,
            balanced: true,
            max_iter: 20,
            seed: 0,
        }
    }
}

/// Smallest power of `b` whose leaf clusters hold at most `max_leaf_size`
/// labels each.
pub fn auto_leaf_clusters(num_labels: usize, b: usize, max_leaf_size: usize) -> usize {
    let mut k = 1usize;
    while num_labels.div_ceil(k) > max_leaf_size && k.saturating_mul(b) <= num_labels {
        k *= b;
    }
    k
}

fn power_exponent(k: usize, b: usize) -> Option<u32> {
    if k == 1 {
        return Some(0);
    }
    if b < 2 {
        return None;
    }
    let mut cur = 1usize;
    let mut e = 0u32;
    while cur < k {
        cur = cur.checked_mul(b)?;
        e += 1;
    }
    (cur == k).then_some(e)
}

/// Recursive B-ary clustering of the label embeddings into `leaf_clusters`
/// leaves, returning the full indexing chain.
pub fn build_cluster_chain(emb: &LabelEmbedding, cfg: &ChainConfig) -> Result<ClusterChain> {
    build_cluster_chain_with_stats(emb, cfg).map(|(chain, _)| chain)
}

pub fn build_cluster_chain_with_stats(
    emb: &LabelEmbedding,
    cfg: &ChainConfig,
) -> Result<(ClusterChain, ChainStats)> {
    let l = emb.len();
    let k = cfg.leaf_clusters;
    let b = cfg.branching;
    if l == 0 {
        return Err(Error::arg("cannot cluster an empty label set"));
    }
    let Some(exp) = power_exponent(k, b) else {
        return Err(Error::arg(format!("leaf clusters {k} is not a power of branching {b}")));
    };
    if k > l {
        return Err(Error::arg(format!("leaf clusters {k} exceeds label count {l}")));
    }

    let mut nodes: Vec<Vec<u32>> = vec![(0..l as u32).collect()];
    let mut splits_per_label = vec![0u32; l];
    for level in 0..exp {
        for node in &nodes {
            for &label in node {
                splits_per_label[label as usize] += 1;
            }
        }
        let children: Vec<Vec<Vec<u32>>> = nodes
            .par_iter()
            .enumerate()
            .map(|(nid, members)| -> Result<Vec<Vec<u32>>> {
                let outcome = kmeans_partition(
                    emb,
                    members,
                    b,
                    cfg.objective,
                    mix_seed(cfg.seed, level as u64, nid as u64),
                    cfg.max_iter,
                    cfg.balanced,
                )?;
                let mut buckets = vec![Vec::new(); b];
                for (pos, &cl) in outcome.assignment.assignments.iter().enumerate() {
                    buckets[cl as usize].push(members[pos]);
                }
                Ok(buckets)
            })
            .collect::<Result<Vec<_>>>()?;
        nodes = children.into_iter().flatten().collect();
    }

    let mut leaf_assign = vec![0u32; l];
    for (leaf, members) in nodes.iter().enumerate() {
        for &label in members {
            leaf_assign[label as usize] = leaf as u32;
        }
    }

    let depth = exp as usize + 1;
    let mut levels = Vec::with_capacity(depth);
    for t in 1..depth {
        let k_t = b.pow(t as u32);
        let parent_of: Vec<u32> = (0..k_t as u32).map(|j| j / b as u32).collect();
        levels.push(IndexingMatrix::new(parent_of, b.pow(t as u32 - 1))?);
    }
    levels.push(IndexingMatrix::new(leaf_assign, k)?);
    let chain = ClusterChain::from_levels(levels, Some(b))?;
    Ok((chain, ChainStats { splits_per_label }))
}

/// Builds the chain encoded by a flat label-to-leaf assignment, with the
/// internal levels following the B-ary numbering.
pub fn chain_from_leaf_assignment(
    leaf_assign: Vec<u32>,
    leaf_clusters: usize,
    branching: usize,
) -> Result<ClusterChain> {
    let Some(exp) = power_exponent(leaf_clusters, branching) else {
        return Err(Error::arg(format!(
            "leaf clusters {leaf_clusters} is not a power of branching {branching}"
        )));
    };
    let mut levels = Vec::new();
    for t in 1..exp + 1 {
        let k_t = branching.pow(t);
        let parent_of: Vec<u32> = (0..k_t as u32).map(|j| j / branching as u32).collect();
        levels.push(IndexingMatrix::new(parent_of, branching.pow(t - 1))?);
    }
    levels.push(IndexingMatrix::new(leaf_assign, leaf_clusters)?);
    ClusterChain::from_levels(levels, Some(branching))
}

/// Leaf-level cluster sizes of a chain.
pub fn leaf_cluster_sizes(chain: &ClusterChain) -> HashMap<u32, usize> {
    let mut sizes = HashMap::new();
    let leaf = chain.level(chain.depth());
    for &k in leaf.assignments() {
        *sizes.entry(k).or_insert(0) += 1;
    }
    sizes
}
