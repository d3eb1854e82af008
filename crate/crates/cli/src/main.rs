//! End-to-end pipeline: vectorize -> cluster -> train -> predict -> eval.
//!
//! Every command is a pure function of its inputs and the `--seed` flag;
//! rerunning with identical inputs produces byte-identical outputs. Worker
//! threads are capped by `--threads` (env `XRL_THREADS` as fallback).

mod dataset;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use dataset::{read_dataset, read_label_lines, write_dataset, Dataset};
use xrlinear::embedding::{
    embed_pifa, embed_pifa_lf, embed_pii, embed_spectral, LabelEmbedding,
};
use xrlinear::error::{Error, Result};
use xrlinear::indexing::{auto_leaf_clusters, build_cluster_chain, ChainConfig, ClusterChain, Objective};
use xrlinear::inference::{batch_predict, read_predictions, write_predictions, CombinerKind};
use xrlinear::metrics::MetricReport;
use xrlinear::solver::LossKind;
use xrlinear::sparse::CsrMatrix;
use xrlinear::tfidf::{fit_tfidf, TfidfModel};
use xrlinear::trainer::{train_xr_linear, NegativeSampling, TrainerConfig, XrLinearModel};

#[derive(Parser)]
#[command(name = "xrlinear", version, about = "Extreme multilabel ranking with recursive linear models")]
struct Cli {
    /// Worker threads for training and batch prediction (default: cores;
    /// env XRL_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbeddingArg {
    Pii,
    Pifa,
    PifaLf,
    Spectral,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Kmeans,
    Skmeans,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Hinge,
    SquaredHinge,
    Logistic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CombinerArg {
    RankerOnly,
    SigmoidProduct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Tfn,
    Man,
    #[value(name = "tfn+man")]
    TfnMan,
}

/// Label clustering options, shared by `cluster` and `train --chain auto`.
#[derive(Args, Clone)]
struct ClusterOpts {
    /// Label representation used for clustering.
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Pifa)]
    embedding: EmbeddingArg,

    /// Branching factor B of the hierarchical clustering.
    #[arg(long, short = 'B', default_value_t = 8)]
    branching: usize,

    /// Leaf cluster count K (a power of B). Default: smallest power of B
    /// with at most 100 labels per leaf.
    #[arg(long, short = 'K')]
    clusters: Option<usize>,

    #[arg(long, value_enum, default_value_t = ObjectiveArg::Skmeans)]
    objective: ObjectiveArg,

    /// Drop the per-split balance constraint.
    #[arg(long)]
    unbalanced: bool,

    #[arg(long, default_value_t = 20)]
    cluster_max_iter: usize,

    /// Embedding dimension for --embedding spectral.
    #[arg(long, default_value_t = 32)]
    spectral_dim: usize,

    /// Dataset whose feature rows serve as label features (pifa-lf).
    #[arg(long)]
    label_features: Option<PathBuf>,

    /// Blend weight toward the aggregated-feature side (pifa-lf).
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
}

#[derive(Subcommand)]
enum Command {
    /// Build tfidf features from raw text, one document per line.
    Vectorize {
        /// Text corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Optional label file: comma-separated 0-based ids per line.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Label-space size; default: max seen id + 1.
        #[arg(long)]
        num_labels: Option<usize>,
        /// Fit a vocabulary on the corpus and save it here.
        #[arg(long, conflicts_with = "use_vocab")]
        fit_vocab: Option<PathBuf>,
        /// Transform with an existing vocabulary file.
        #[arg(long)]
        use_vocab: Option<PathBuf>,
        /// Minimum document frequency for vocabulary terms.
        #[arg(long, default_value_t = 1)]
        min_df: usize,
        /// Output dataset path.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Cluster the label space into an indexing chain.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        opts: ClusterOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output chain directory.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Train a model; clusters automatically when no chain is given.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Chain directory from `cluster` (default: auto-cluster).
        #[arg(long)]
        chain: Option<PathBuf>,
        #[command(flatten)]
        opts: ClusterOpts,
        #[arg(long, value_enum, default_value_t = SchemeArg::TfnMan)]
        scheme: SchemeArg,
        /// Beam width for matcher-aware shortlists during training.
        #[arg(long, default_value_t = 10)]
        beam_train: usize,
        #[arg(long, value_enum, default_value_t = LossArg::SquaredHinge)]
        loss: LossArg,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Hard-threshold epsilon for trained weights.
        #[arg(long, default_value_t = 0.1)]
        eps: f32,
        #[arg(long, default_value_t = 0.1)]
        solver_tol: f64,
        #[arg(long, default_value_t = 100)]
        solver_max_iter: usize,
        #[arg(long, value_enum, default_value_t = CombinerArg::SigmoidProduct)]
        combiner: CombinerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vocabulary path to record in the model metadata.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output model directory.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Predict top-k labels for every row of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Output prediction file.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Score a prediction file against dataset labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated k values.
        #[arg(long, short, default_value = "1,3,5")]
        k: String,
        /// Exclude instances with no true labels from the means.
        #[arg(long)]
        skip_empty: bool,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn init_threads(threads: Option<usize>) {
    let n = threads.or_else(|| {
        std::env::var("XRL_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // Ignore the error if a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn build_embedding(data: &Dataset, opts: &ClusterOpts) -> Result<LabelEmbedding> {
    match opts.embedding {
        EmbeddingArg::Pii => Ok(embed_pii(&data.labels)),
        EmbeddingArg::Pifa => embed_pifa(&data.features, &data.labels),
        EmbeddingArg::Spectral => embed_spectral(&data.labels, opts.spectral_dim),
        EmbeddingArg::PifaLf => {
            let path = opts.label_features.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--embedding pifa-lf needs --label-features".into())
            })?;
            let lf = read_dataset(path)?;
            let alpha = vec![opts.alpha; data.num_labels()];
            embed_pifa_lf(&data.features, &data.labels, &lf.features, &alpha)
        }
    }
}

fn chain_config(opts: &ClusterOpts, num_labels: usize, seed: u64) -> Result<ChainConfig> {
    if opts.branching < 2 {
        return Err(Error::InvalidArgument("branching must be >= 2".into()));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
    }
    let leaf_clusters = match opts.clusters {
        Some(k) => k,
        None => auto_leaf_clusters(num_labels, opts.branching, 100),
    };
    Ok(ChainConfig {
        branching: opts.branching,
        leaf_clusters,
        objective: match opts.objective {
            ObjectiveArg::Kmeans => Objective::Kmeans,
            ObjectiveArg::Skmeans => Objective::Skmeans,
        },
        balanced: !opts.unbalanced,
        max_iter: opts.cluster_max_iter,
        seed,
    })
}

fn build_chain(data: &Dataset, opts: &ClusterOpts, seed: u64) -> Result<ClusterChain> {
    let cfg = chain_config(opts, data.num_labels(), seed)?;
    let emb = build_embedding(data, opts)?;
    build_cluster_chain(&emb, &cfg)
}

fn cmd_vectorize(
    corpus: &Path,
    labels: Option<&Path>,
    num_labels: Option<usize>,
    fit_vocab: Option<&Path>,
    use_vocab: Option<&Path>,
    min_df: usize,
    output: &Path,
) -> Result<()> {
    let text = std::fs::read_to_string(corpus)?;
    let docs: Vec<&str> = text.lines().collect();
    if docs.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let model = match (fit_vocab, use_vocab) {
        (Some(out), None) => {
            let model = fit_tfidf(&docs, min_df)?;
            model.save(out)?;
            model
        }
        (None, Some(path)) => TfidfModel::load(path)?,
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --fit-vocab or --use-vocab is required".into(),
            ))
        }
    };
    if model.dim() == 0 {
        return Err(Error::InvalidArgument(
            "vocabulary is empty; lower --min-df or check the corpus".into(),
        ));
    }

    let label_rows: Vec<Vec<u32>> = match labels {
        Some(path) => {
            let rows = read_label_lines(path)?;
            if rows.len() != docs.len() {
                return Err(Error::InvalidArgument(format!(
                    "label file has {} lines for {} documents",
                    rows.len(),
                    docs.len()
                )));
            }
            rows
        }
        None => vec![Vec::new(); docs.len()],
    };
    let max_label = label_rows.iter().flatten().max().copied();
    let l = match (num_labels, max_label) {
        (Some(l), Some(max)) if (max as usize) >= l => {
            return Err(Error::InvalidArgument(format!(
                "label id {max} out of range for --num-labels {l}"
            )))
        }
        (Some(l), _) => l,
        (None, Some(max)) => max as usize + 1,
        (None, None) => 0,
    };

    let feature_rows: Vec<xrlinear::SparseVec> =
        docs.par_iter().map(|doc| model.transform(doc)).collect();
    let label_vecs: Vec<xrlinear::SparseVec> = label_rows
        .into_iter()
        .map(|ids| {
            let entries = ids.into_iter().map(|id| (id, 1.0f32)).collect();
            xrlinear::SparseVec::new(l, entries)
        })
        .collect::<Result<_>>()?;
    let data = Dataset {
        features: CsrMatrix::from_rows(model.dim(), &feature_rows)?,
        labels: CsrMatrix::from_rows(l, &label_vecs)?,
    };
    write_dataset(output, &data)?;
    log::info!("vectorized {} documents into {} features", data.num_instances(), data.dim());
    Ok(())
}

fn cmd_cluster(data_path: &Path, opts: &ClusterOpts, seed: u64, output: &Path) -> Result<()> {
    let data = read_dataset(data_path)?;
    let chain = build_chain(&data, opts, seed)?;
    chain.save(output)?;
    let leaves = if chain.depth() >= 2 { chain.k_at(chain.depth() - 1) } else { 1 };
    log::info!(
        "clustered {} labels into {} leaf clusters (depth {})",
        data.num_labels(),
        leaves,
        chain.depth()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_path: &Path,
    chain_dir: Option<&Path>,
    opts: &ClusterOpts,
    scheme: SchemeArg,
    beam_train: usize,
    loss: LossArg,
    lambda: f64,
    eps: f32,
    solver_tol: f64,
    solver_max_iter: usize,
    combiner: CombinerArg,
    seed: u64,
    vocab: Option<&Path>,
    output: &Path,
) -> Result<()> {
    // Validate configuration before any heavy work.
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::InvalidArgument("lambda must be > 0".into()));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument("eps must be >= 0".into()));
    }
    if beam_train < 1 {
        return Err(Error::InvalidArgument("beam-train must be >= 1".into()));
    }
    let scheme = match scheme {
        SchemeArg::Tfn => NegativeSampling::Tfn,
        SchemeArg::Man => NegativeSampling::Man { beam: beam_train },
        SchemeArg::TfnMan => NegativeSampling::TfnPlusMan { beam: beam_train },
    };
    let cfg = TrainerConfig {
        scheme,
        loss: match loss {
            LossArg::Hinge => LossKind::Hinge,
            LossArg::SquaredHinge => LossKind::SquaredHinge,
            LossArg::Logistic => LossKind::Logistic,
        },
        lambda,
        solver_tol,
        solver_max_iter,
        weight_threshold: eps,
        combiner: match combiner {
            CombinerArg::RankerOnly => CombinerKind::RankerOnly,
            CombinerArg::SigmoidProduct => CombinerKind::SigmoidProduct,
        },
        seed,
    };

    let data = read_dataset(data_path)?;
    let chain = match chain_dir {
        Some(dir) => ClusterChain::load(dir)?,
        None => build_chain(&data, opts, seed)?,
    };
    let mut model = train_xr_linear(&data.features, &data.labels, &chain, &cfg)?;
    model.set_vectorizer_ref(vocab.map(|p| p.display().to_string()));
    model.save(output)?;
    let mem = model.memory_footprint();
    log::info!(
        "trained depth-{} model over {} labels ({} unlearnable); serving-block bytes: {} raw nnz, {} with row-index overhead",
        model.depth(),
        model.num_labels(),
        model.meta().unlearnable_labels,
        mem.raw_nnz_bytes,
        mem.with_overhead_bytes
    );
    Ok(())
}

fn cmd_predict(
    model_dir: &Path,
    data_path: &Path,
    beam: usize,
    topk: usize,
    output: &Path,
) -> Result<()> {
    let model = XrLinearModel::load(model_dir)?;
    let data = read_dataset(data_path)?;
    let preds = batch_predict(&model, &data.features, beam, topk)?;
    write_predictions(output, &preds)?;
    log::info!("wrote {} prediction rows", preds.len());
    Ok(())
}

fn cmd_eval(
    pred_path: &Path,
    data_path: &Path,
    k_spec: &str,
    skip_empty: bool,
    json: Option<&Path>,
) -> Result<()> {
    let ks: Vec<usize> = k_spec
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad k value `{tok}`")))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k values must be >= 1".into()));
    }
    let preds = read_predictions(pred_path)?;
    let data = read_dataset(data_path)?;
    if preds.len() != data.num_instances() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction rows for {} instances",
            preds.len(),
            data.num_instances()
        )));
    }
    let truths = data.label_sets();
    let report = MetricReport::aggregate(&preds, &truths, &ks, skip_empty);
    print!("{}", report.render_table());
    if let Some(path) = json {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads);
    match cli.command {
        Command::Vectorize { corpus, labels, num_labels, fit_vocab, use_vocab, min_df, output } => {
            cmd_vectorize(
                &corpus,
                labels.as_deref(),
                num_labels,
                fit_vocab.as_deref(),
                use_vocab.as_deref(),
                min_df,
                &output,
            )
        }
        Command::Cluster { data, opts, seed, output } => cmd_cluster(&data, &opts, seed, &output),
        Command::Train {
            data,
            chain,
            opts,
            scheme,
            beam_train,
            loss,
            lambda,
            eps,
            solver_tol,
            solver_max_iter,
            combiner,
            seed,
            vocab,
            output,
        } => cmd_train(
            &data,
            chain.as_deref(),
            &opts,
            scheme,
            beam_train,
            loss,
            lambda,
            eps,
            solver_tol,
            solver_max_iter,
            combiner,
            seed,
            vocab.as_deref(),
            &output,
        ),
        Command::Predict { model, data, beam, topk, output } => {
            cmd_predict(&model, &data, beam, topk, &output)
        }
        Command::Eval { pred, data, k, skip_empty, json } => {
            cmd_eval(&pred, &data, &k, skip_empty, json.as_deref())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(1);
    }
}
