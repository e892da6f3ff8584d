use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use easing_core::baselines::{pagerank, personalized_pagerank, restart_from_values, PageRankConfig};
use easing_core::config::RunConfig;
use easing_core::graph::{
    features_to_csv, labels_to_csv, load_features, load_graph, load_labels, split_dataset, split_labels, HetGraph,
    ImportanceDataset, NodeFeatureSet, SplitRatios,
};
use easing_core::metrics::MetricsReport;
use easing_core::model::ModelContext;
use easing_core::params::Checkpoint;
use easing_core::synth::generate_synthetic;
use easing_core::trainer::{
    generate_pseudo_labels, inference_rng, loss_log_csv, predict, predictions_csv, pseudo_labels_csv, train,
    DjePair,
};
use easing_core::{Error, Result};

const SEED_ENV: &str = "EASING_SEED";

#[derive(Parser)]
#[command(name = "easing", version, about = "Semi-supervised node importance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model pair and write checkpoint, logs, predictions and metrics.
    Train(TrainArgs),
    /// Recompute metrics for a split from a checkpoint.
    Eval(EvalArgs),
    /// Emit pseudo-labels for the unlabeled pool.
    Pseudo(PseudoArgs),
    /// Score nodes with PageRank or personalized PageRank.
    Baseline(BaselineArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Collect metrics JSON from run directories into one CSV.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    struct_features: PathBuf,
    #[arg(long)]
    text_features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// `desk` or `full`; applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    split: SplitArg,
}

#[derive(Args)]
struct PseudoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 5)]
    passes: usize,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Pr,
    Ppr,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Restart {
    /// Restart mass proportional to training labels.
    Labels,
    Uniform,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.85)]
    damping: f64,
    #[arg(long, value_enum, default_value = "labels")]
    restart: Restart,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    log1p_labels: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    edge_types: usize,
    #[arg(long, default_value_t = 5.0)]
    avg_degree: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Share of nodes written to labels.csv; labels_full.csv holds all.
    #[arg(long, default_value_t = 0.3)]
    labeled_fraction: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding metrics_*.json files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pseudo(a) => cmd_pseudo(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn max_label_id(labels: &[(usize, f64)]) -> usize {
    labels.iter().map(|(id, _)| id + 1).max().unwrap_or(0)
}

struct Loaded {
    graph: HetGraph,
    features: NodeFeatureSet,
    dataset: ImportanceDataset,
}

fn load_data(data: &DataArgs, log1p: bool, seed: u64) -> Result<Loaded> {
    let labels = load_labels(&data.labels, log1p)?;
    let graph = load_graph(&data.edges, false, max_label_id(&labels))?;
    let features = load_features(&data.struct_features, &data.text_features, graph.node_count())?;
    let dataset = split_for(&graph, &labels, seed)?;
    Ok(Loaded {
        graph,
        features,
        dataset,
    })
}

fn split_for(graph: &HetGraph, labels: &[(usize, f64)], seed: u64) -> Result<ImportanceDataset> {
    let candidates: Vec<usize> = (0..graph.node_count()).collect();
    split_dataset(labels, &candidates, SplitRatios::default(), seed)
}

fn split_metrics(pair: &DjePair, ctx: &ModelContext<'_>, split: &[(usize, f64)], rc: &RunConfig) -> Result<MetricsReport> {
    let nodes: Vec<usize> = split.iter().map(|(id, _)| *id).collect();
    let truth: Vec<f64> = split.iter().map(|(_, v)| *v).collect();
    let pred: Vec<f64> = predict(pair, ctx, &nodes, rc.combine).iter().map(|e| e.s_hat).collect();
    MetricsReport::compute(&pred, &truth, rc.k)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::default();
    if let Some(s) = env_seed()? {
        rc.seed = s;
    }
    if let Some(p) = &a.preset {
        rc.apply_preset(p)?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        rc.apply_text(&text, path)?;
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if let Some(e) = a.epochs {
        rc.epochs = e;
    }
    if let Some(l) = a.lambda {
        rc.lambda = l;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        rc.set(k.trim(), v.trim())?;
    }
    rc.validate()?;

    let data = load_data(&a.data, rc.log1p_labels, rc.seed)?;
    let types = data.graph.edge_type_count();
    let dje = rc.dje_config(types);
    let ctx = ModelContext::new(&dje, &data.graph, &data.features)?;
    let pair = DjePair::init(dje, rc.seed)?;
    let out = train(pair, &data.dataset, &ctx, &rc.train_config())?;

    create_dir(&a.out_dir)?;
    let mut ck = Checkpoint::default();
    rc.push_to(&mut ck, types);
    out.pair.push_to(&mut ck);
    ck.save(&a.out_dir.join("checkpoint.bin"))?;
    write(&a.out_dir.join("config.txt"), rc.to_text())?;
    write(&a.out_dir.join("loss_log.csv"), loss_log_csv(&out.log))?;
    let all: Vec<usize> = (0..data.graph.node_count()).collect();
    write(
        &a.out_dir.join("predictions.csv"),
        predictions_csv(&all, &predict(&out.pair, &ctx, &all, rc.combine)),
    )?;
    let val = split_metrics(&out.pair, &ctx, &data.dataset.val, &rc)?;
    let test = split_metrics(&out.pair, &ctx, &data.dataset.test, &rc)?;
    write(&a.out_dir.join("metrics_val.json"), val.to_json())?;
    write(&a.out_dir.join("metrics_test.json"), test.to_json())?;
    eprintln!(
        "trained {} epochs, best epoch {}, val nrmse {:.5}, test nrmse {:.5}",
        out.log.len(),
        out.best_epoch,
        val.nrmse,
        test.nrmse
    );
    Ok(())
}

struct Restored {
    rc: RunConfig,
    pair: DjePair,
    data: Loaded,
}

fn restore(checkpoint: &Path, data: &DataArgs) -> Result<Restored> {
    let ck = Checkpoint::load(checkpoint)?;
    let (rc, types) = RunConfig::from_checkpoint(&ck)?;
    let data = load_data(data, rc.log1p_labels, rc.seed)?;
    if data.graph.edge_type_count() != types {
        return Err(Error::Data {
            path: checkpoint.to_path_buf(),
            msg: format!(
                "checkpoint expects {types} edge types, graph has {}",
                data.graph.edge_type_count()
            ),
        });
    }
    let pair = DjePair::from_checkpoint(rc.dje_config(types), &ck)?;
    Ok(Restored { rc, pair, data })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let r = restore(&a.checkpoint, &a.data)?;
    let ctx = ModelContext::new(&r.pair.config, &r.data.graph, &r.data.features)?;
    let split = match a.split {
        SplitArg::Val => &r.data.dataset.val,
        SplitArg::Test => &r.data.dataset.test,
    };
    let report = split_metrics(&r.pair, &ctx, split, &r.rc)?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_pseudo(a: PseudoArgs) -> Result<()> {
    let r = restore(&a.checkpoint, &a.data)?;
    let ctx = ModelContext::new(&r.pair.config, &r.data.graph, &r.data.features)?;
    let mut rng = inference_rng(r.rc.seed);
    let labels = generate_pseudo_labels(&r.pair, &ctx, &r.data.dataset.unlabeled_pool, a.passes, &mut rng)?;
    let csv = pseudo_labels_csv(&labels);
    match &a.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn scores_csv(scores: &[f64]) -> String {
    let mut s = String::from("node_id,score\n");
    for (id, v) in scores.iter().enumerate() {
        s.push_str(&format!("{id},{v}\n"));
    }
    s
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let labels = load_labels(&a.labels, a.log1p_labels)?;
    let graph = load_graph(&a.edges, false, max_label_id(&labels))?;
    let (train_labels, val, test) = split_labels(&labels, SplitRatios::default(), seed)?;
    let cfg = PageRankConfig {
        damping: a.damping,
        ..PageRankConfig::default()
    };
    let scores = match (a.method, a.restart) {
        (Method::Pr, _) => pagerank(&graph, cfg)?,
        (Method::Ppr, Restart::Uniform) => {
            let n = graph.node_count();
            personalized_pagerank(&graph, cfg, &vec![1.0 / n as f64; n])?
        }
        (Method::Ppr, Restart::Labels) => {
            let restart = restart_from_values(graph.node_count(), &train_labels)?;
            personalized_pagerank(&graph, cfg, &restart)?
        }
    };
    let name = match a.method {
        Method::Pr => "pr",
        Method::Ppr => "ppr",
    };
    create_dir(&a.out_dir)?;
    write(&a.out_dir.join(format!("{name}_scores.csv")), scores_csv(&scores))?;
    for (part, tag) in [(&val, "val"), (&test, "test")] {
        let pred: Vec<f64> = part.iter().map(|(id, _)| scores[*id]).collect();
        let truth: Vec<f64> = part.iter().map(|(_, v)| *v).collect();
        match MetricsReport::compute(&pred, &truth, a.k) {
            Ok(report) => write(&a.out_dir.join(format!("{name}_metrics_{tag}.json")), report.to_json())?,
            Err(e) => eprintln!("warning: no {tag} metrics: {e}"),
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if !(a.labeled_fraction > 0.0 && a.labeled_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction {} must be in (0, 1]",
            a.labeled_fraction
        )));
    }
    let seed = resolve_seed(a.seed)?;
    let data = generate_synthetic(a.nodes, a.edge_types, a.avg_degree, a.dim, seed)?;
    create_dir(&a.out_dir)?;
    data.graph.write_tsv(&a.out_dir.join("edges.tsv"))?;
    write(
        &a.out_dir.join("struct_features.csv"),
        features_to_csv(&data.features.structural),
    )?;
    write(
        &a.out_dir.join("text_features.csv"),
        features_to_csv(&data.features.textual),
    )?;
    let full: Vec<(usize, f64)> = data.labels.iter().copied().enumerate().collect();
    let n_lab = ((a.nodes as f64 * a.labeled_fraction).round() as usize).clamp(1, a.nodes);
    // spread labeled ids evenly over the id range
    let labeled: Vec<(usize, f64)> = (0..n_lab).map(|i| full[i * a.nodes / n_lab]).collect();
    write(&a.out_dir.join("labels.csv"), labels_to_csv(&labeled))?;
    write(&a.out_dir.join("labels_full.csv"), labels_to_csv(&full))?;
    Ok(())
}

const REPORT_FIELDS: [&str; 7] = ["mae", "rmse", "nrmse", "spearman", "precision_at_k", "ndcg_at_k", "k"];

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut csv = format!("run,file,{}\n", REPORT_FIELDS.join(","));
    for run in &a.runs {
        let mut files: Vec<PathBuf> = fs::read_dir(run)
            .map_err(|e| Error::Io {
                path: run.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.contains("metrics_") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| Error::Io {
                path: f.clone(),
                source: e,
            })?;
            let r = MetricsReport::from_json(&text).map_err(|e| Error::Data {
                path: f.clone(),
                msg: e.to_string(),
            })?;
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                run.display(),
                name.trim_end_matches(".json"),
                r.mae,
                r.rmse,
                r.nrmse,
                r.spearman,
                r.precision_at_k,
                r.ndcg_at_k,
                r.k
            ));
        }
    }
    match &a.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
