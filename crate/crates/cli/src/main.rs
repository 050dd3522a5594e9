//! `duat` — build heterogeneous text graphs and train the dual-attention
//! classifier.
//!
//! Subcommands: `build-graph`, `train`, `eval`, `sweep`, `ablate`. Human
//! summaries go to stdout; machine-readable artifacts (graph files,
//! checkpoints, JSON-lines metrics) only to files. Exit codes: 0 success,
//! 2 usage error, 3 data error, 4 numeric failure.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use duat_core::corpus::{load_corpus, CleaningRules, Corpus, Split};
use duat_core::graph::{build_graph, collect_window_stats, load_graph, save_graph, TextGraph};
use duat_core::model::{load_features, load_model, save_model, Activation, Features};
use duat_core::train::{
    ablate, evaluate, hop_sweep, train, MetricsHistory, TrainConfig, TrainError, TrainedModel,
};

const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "duat",
    version,
    about = "Text-graph construction and dual-attention graph classification",
    long_about = "Builds word/document graphs (PMI word-word edges, TF-IDF \
document-word edges) and trains a dual-attention graph classifier over \
sampled k-hop neighborhoods.\n\nThe seed falls back to the DUAT_SEED \
environment variable when --seed is not given. Setting DUAT_ZERO_TIMING=1 \
writes 0.0 in the metrics `seconds` field so repeated runs produce \
byte-identical metrics files."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the text graph from a corpus and write it to a binary file.
    BuildGraph(BuildGraphArgs),
    /// Train a model and optionally write metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved model checkpoint on one split.
    Eval(EvalArgs),
    /// Train one model per hop count and report per-K accuracy.
    Sweep(SweepArgs),
    /// Paired dual-attention vs plain-convolution comparison.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Texts file: UTF-8, one document per line.
    #[arg(long)]
    texts: PathBuf,
    /// Meta file: `id<TAB>split<TAB>label` per line, split in {train,test}.
    #[arg(long)]
    meta: PathBuf,
    /// Keep only words appearing in at least this many documents.
    #[arg(long, default_value_t = 5, value_parser = at_least_one)]
    min_freq: usize,
    /// Override the bundled stop-word list (one word per line).
    #[arg(long)]
    stop_words: Option<PathBuf>,
    /// Sliding-window width for co-occurrence statistics.
    #[arg(long, default_value_t = 20, value_parser = at_least_one)]
    window: usize,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FeatureSource {
    OneHot,
    File,
}

#[derive(Args)]
struct ModelArgs {
    /// Attention heads.
    #[arg(long, default_value_t = 8, value_parser = at_least_one)]
    heads: usize,
    /// Per-head feature width d'.
    #[arg(long, default_value_t = 64, value_parser = at_least_one)]
    dim: usize,
    /// LeakyReLU negative slope for attention scores.
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    leaky_slope: f64,
    /// Node feature source.
    #[arg(long, value_enum, default_value_t = FeatureSource::OneHot)]
    features: FeatureSource,
    /// Feature file (required with --features file).
    #[arg(long)]
    features_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainHyperArgs {
    /// Learning rate.
    #[arg(long, default_value_t = 0.05, value_parser = rate_closed, allow_negative_numbers = true)]
    lr: f64,
    /// Dropout rate on input features and attention coefficients.
    #[arg(long, default_value_t = 0.3, value_parser = rate_half_open, allow_negative_numbers = true)]
    dropout: f64,
    /// Momentum coefficient.
    #[arg(long, default_value_t = 0.9, value_parser = rate_closed, allow_negative_numbers = true)]
    momentum: f64,
    /// Training epochs.
    #[arg(long, default_value_t = 300, value_parser = at_least_one)]
    epochs: usize,
    /// L2 regularization coefficient.
    #[arg(long, default_value_t = 5e-4, value_parser = non_negative, allow_negative_numbers = true)]
    l2: f64,
    /// Labeled train-document centers per batch.
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    batch_size: usize,
    /// Cap on distinct nodes materialized per batch subgraph.
    #[arg(long, default_value_t = 200, value_parser = at_least_one)]
    subgraph_size: usize,
    /// Fraction of train documents held out for validation.
    #[arg(long, default_value_t = 0.0, value_parser = rate_half_open, allow_negative_numbers = true)]
    val_frac: f64,
    /// RNG seed; falls back to DUAT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Graph file produced by build-graph.
    #[arg(long)]
    graph: PathBuf,
    /// Hop count c (1..=3).
    #[arg(long, default_value_t = 1, value_parser = hop_range)]
    hops: usize,
    /// Neighbors sampled per hop.
    #[arg(long, default_value_t = 70, value_parser = at_least_one)]
    fanout: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    /// JSON-lines metrics output, one record per epoch.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Model checkpoint output.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Graph file produced by build-graph.
    #[arg(long)]
    graph: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Neighbors sampled per hop during evaluation.
    #[arg(long, default_value_t = 70, value_parser = at_least_one)]
    fanout: usize,
    /// Documents per evaluation chunk.
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = FeatureSource::OneHot)]
    features: FeatureSource,
    #[arg(long)]
    features_file: Option<PathBuf>,
    /// RNG seed; falls back to DUAT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Graph file; when omitted the graph is built in memory.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Neighbors sampled per hop (the hop-sweep experiment uses 10).
    #[arg(long, default_value_t = 10, value_parser = at_least_one)]
    fanout: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    /// Comma-separated hop counts to sweep.
    #[arg(long = "hops", default_value = "1,2,3", value_parser = parse_hop_list)]
    hop_list: HopList,
    /// JSON output, one object per row.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Graph file; when omitted the graph is built in memory.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Hop count c (1..=3).
    #[arg(long, default_value_t = 1, value_parser = hop_range)]
    hops: usize,
    /// Neighbors sampled per hop.
    #[arg(long, default_value_t = 70, value_parser = at_least_one)]
    fanout: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
    /// Comma-separated seeds for paired runs; defaults to the single seed.
    #[arg(long, value_parser = parse_seed_list)]
    seeds: Option<SeedList>,
    /// JSON output, one object per paired run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct HopList(Vec<usize>);

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn at_least_one(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("{s:?} is not an integer"))?;
    if v < 1 {
        return Err("must be at least 1".into());
    }
    Ok(v)
}

fn hop_range(s: &str) -> Result<usize, String> {
    let v = at_least_one(s)?;
    if v > 3 {
        return Err("hop count must be in 1..=3".into());
    }
    Ok(v)
}

fn rate_closed(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} outside [0, 1]"));
    }
    Ok(v)
}

fn rate_half_open(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("{v} outside [0, 1)"));
    }
    Ok(v)
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v < 0.0 {
        return Err(format!("{v} is negative"));
    }
    Ok(v)
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("{other:?} is not one of train, test")),
    }
}

fn parse_hop_list(s: &str) -> Result<HopList, String> {
    let mut hops = Vec::new();
    for part in s.split(',') {
        let k = hop_range(part.trim())?;
        hops.push(k);
    }
    if hops.is_empty() {
        return Err("hop list is empty".into());
    }
    Ok(HopList(hops))
}

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in s.split(',') {
        seeds.push(
            part.trim()
                .parse()
                .map_err(|_| format!("{part:?} is not a seed"))?,
        );
    }
    Ok(SeedList(seeds))
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("DUAT_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn zero_timing() -> bool {
    std::env::var("DUAT_ZERO_TIMING").map(|v| v == "1").unwrap_or(false)
}

fn load_corpus_from(args: &CorpusArgs) -> Result<Corpus, CliError> {
    let rules = match &args.stop_words {
        Some(path) => CleaningRules::with_stop_words_file(path)
            .map_err(|e| CliError::data(format!("stop words: {e}")))?,
        None => CleaningRules::default(),
    };
    load_corpus(&args.texts, &args.meta, &rules, args.min_freq)
        .map_err(|e| CliError::data(e.to_string()))
}

fn load_graph_checked(path: &Path, corpus: &Corpus) -> Result<TextGraph, CliError> {
    let graph = load_graph(path).map_err(|e| CliError::data(e.to_string()))?;
    if graph.n_docs() != corpus.n_docs() || graph.n_words() != corpus.vocabulary.len() {
        return Err(CliError::data(format!(
            "graph file has {} docs / {} words but the corpus rebuilt from --texts/--meta \
             has {} docs / {} words; pass the same --min-freq/--stop-words used at build time",
            graph.n_docs(),
            graph.n_words(),
            corpus.n_docs(),
            corpus.vocabulary.len()
        )));
    }
    Ok(graph)
}

fn graph_for(
    args_graph: &Option<PathBuf>,
    corpus: &Corpus,
    window: usize,
) -> Result<TextGraph, CliError> {
    match args_graph {
        Some(path) => load_graph_checked(path, corpus),
        None => {
            let stats = collect_window_stats(corpus, window);
            Ok(build_graph(corpus, &stats))
        }
    }
}

fn features_for(
    source: FeatureSource,
    file: &Option<PathBuf>,
    graph: &TextGraph,
) -> Result<Features, CliError> {
    match source {
        FeatureSource::OneHot => Ok(Features::OneHot {
            nodes: graph.n_nodes(),
        }),
        FeatureSource::File => {
            let path = file
                .as_ref()
                .ok_or_else(|| CliError::data("--features file requires --features-file"))?;
            let features =
                load_features(path).map_err(|e| CliError::data(format!("features: {e}")))?;
            if features.node_count() != graph.n_nodes() {
                return Err(CliError::data(format!(
                    "feature file covers {} nodes but the graph has {}",
                    features.node_count(),
                    graph.n_nodes()
                )));
            }
            Ok(features)
        }
    }
}

fn train_config(model: &ModelArgs, hyper: &TrainHyperArgs, hops: usize, fanout: usize) -> TrainConfig {
    TrainConfig {
        lr: hyper.lr,
        momentum: hyper.momentum,
        dropout: hyper.dropout,
        epochs: hyper.epochs,
        heads: model.heads,
        d_prime: model.dim,
        hops,
        fanout,
        batch_size: hyper.batch_size,
        subgraph_size: hyper.subgraph_size,
        lambda: hyper.l2,
        seed: resolve_seed(hyper.seed),
        leaky_slope: model.leaky_slope,
        activation: Activation::Elu,
        val_frac: hyper.val_frac,
        record_timing: !zero_timing(),
    }
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<(), CliError> {
    let corpus = load_corpus_from(&args.corpus)?;
    let stats = collect_window_stats(&corpus, args.corpus.window);
    let graph = build_graph(&corpus, &stats);
    save_graph(&graph, &args.out).map_err(|e| CliError::data(e.to_string()))?;
    println!(
        "built graph: {} docs + {} words = {} nodes, {} stored edges \
         ({} windows, window {})",
        graph.n_docs(),
        graph.n_words(),
        graph.n_nodes(),
        graph.edge_count(),
        stats.total_windows(),
        args.corpus.window
    );
    println!(
        "labels: {} classes, {} train / {} test documents",
        corpus.n_labels(),
        corpus.train_ids().len(),
        corpus.test_ids().len()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Write one standalone JSON record per epoch, truncating any existing file.
fn write_metrics(history: &MetricsHistory, path: &Path) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::data(format!("metrics {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for record in &history.epochs {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::data(format!("metrics encoding: {e}")))?;
        writeln!(w, "{line}").map_err(|e| CliError::data(format!("metrics write: {e}")))?;
    }
    w.flush()
        .map_err(|e| CliError::data(format!("metrics write: {e}")))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let corpus = load_corpus_from(&args.corpus)?;
    let graph = load_graph_checked(&args.graph, &corpus)?;
    let features = features_for(args.model.features, &args.model.features_file, &graph)?;
    let config = train_config(&args.model, &args.hyper, args.hops, args.fanout);

    let outcome = train(&config, &corpus, &graph, &features)?;
    for rec in &outcome.history.epochs {
        println!(
            "epoch {:>4}/{} train_loss {:.4} train_acc {:.4} test_acc {:.4} ({:.2}s)",
            rec.epoch, config.epochs, rec.train_loss, rec.train_acc, rec.test_acc, rec.seconds
        );
    }
    if let Some(acc) = outcome.val_accuracy {
        println!(
            "validation accuracy {acc:.4} (holdout fraction {})",
            config.val_frac
        );
    }
    if let Some(path) = &args.metrics {
        write_metrics(&outcome.history, path)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &args.model_out {
        save_model(&outcome.model.params, outcome.model.arm, path)
            .map_err(|e| CliError::data(e.to_string()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let corpus = load_corpus_from(&args.corpus)?;
    let graph = load_graph_checked(&args.graph, &corpus)?;
    let features = features_for(args.features, &args.features_file, &graph)?;
    let (params, arm) = load_model(&args.model).map_err(|e| CliError::data(e.to_string()))?;
    let model = TrainedModel {
        params,
        arm,
        fanout: args.fanout,
        batch_size: args.batch_size,
        eval_seed: resolve_seed(args.seed).wrapping_add(1),
    };
    let acc = evaluate(&model, &corpus, &graph, &features, args.split)?;
    let split = match args.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!("{split} accuracy {acc:.4}");
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let corpus = load_corpus_from(&args.corpus)?;
    let graph = graph_for(&args.graph, &corpus, args.corpus.window)?;
    let features = features_for(args.model.features, &args.model.features_file, &graph)?;
    let config = train_config(&args.model, &args.hyper, 1, args.fanout);

    let rows = hop_sweep(&config, &corpus, &graph, &features, &args.hop_list.0)?;
    println!("{:>4} {:>10} {:>10} {:>9}", "K", "train_acc", "test_acc", "seconds");
    for row in &rows {
        println!(
            "{:>4} {:>10.4} {:>10.4} {:>9.2}",
            row.hops, row.train_acc, row.test_acc, row.seconds
        );
    }
    if let Some(path) = &args.out {
        let mut body = String::new();
        for row in &rows {
            let line = serde_json::to_string(row)
                .map_err(|e| CliError::data(format!("sweep encoding: {e}")))?;
            let _ = writeln!(body, "{line}");
        }
        std::fs::write(path, body)
            .map_err(|e| CliError::data(format!("sweep {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let corpus = load_corpus_from(&args.corpus)?;
    let graph = graph_for(&args.graph, &corpus, args.corpus.window)?;
    let features = features_for(args.model.features, &args.model.features_file, &graph)?;
    let base = train_config(&args.model, &args.hyper, args.hops, args.fanout);
    let seeds = args.seeds.map(|s| s.0).unwrap_or_else(|| vec![base.seed]);

    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let config = TrainConfig {
            seed,
            ..base.clone()
        };
        let report = ablate(&config, &corpus, &graph, &features)?;
        println!(
            "seed {:>3}: dual-attention {:.4}  plain-convolution {:.4}",
            report.seed, report.dual_attention_test_acc, report.plain_convolution_test_acc
        );
        reports.push(report);
    }
    let mean = |f: fn(&duat_core::train::AblationReport) -> f64| {
        reports.iter().map(f).sum::<f64>() / reports.len() as f64
    };
    println!(
        "mean over {} seed(s): dual-attention {:.4}  plain-convolution {:.4}",
        reports.len(),
        mean(|r| r.dual_attention_test_acc),
        mean(|r| r.plain_convolution_test_acc)
    );
    if let Some(path) = &args.out {
        let mut body = String::new();
        for report in &reports {
            let line = serde_json::to_string(report)
                .map_err(|e| CliError::data(format!("ablate encoding: {e}")))?;
            let _ = writeln!(body, "{line}");
        }
        std::fs::write(path, body)
            .map_err(|e| CliError::data(format!("ablate {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
