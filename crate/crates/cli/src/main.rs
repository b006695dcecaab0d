use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relgraph::graph::{build_graph, EdgeType, NodeKind};
use relgraph::nn::checkpoint;
use relgraph::parallel::Parallelism;
use relgraph::pretrain::{phase1_finetune, split_corpus, CorpusSplit, EpochLog, TrainConfig};
use relgraph::store::{load_corpus, load_database_with, save_corpus, LoadOptions, DEFAULT_NULL_TOKEN};
use relgraph::synth::{generate_synthetic_corpus, SynthSpec};
use relgraph::tasks::{
    assemble_report, compare_to_paper, evaluate_variant, train_variant, VariantSpec, BASELINE, OURS,
};
use relgraph::tokenizer::{build_vocabulary, Vocabulary};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

const VOCAB_FILE: &str = "vocab.txt";
const LOG_FILE: &str = "train_log.jsonl";
const LOCK_FILE: &str = ".relgraph.lock";

#[derive(Parser)]
#[command(name = "relgraph", version, about = "Relational masked-reconstruction pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus of FK-linked databases.
    GenSynthetic(GenArgs),
    /// Load and validate databases, printing a summary of each.
    IngestValidate(SourceArgs),
    /// Build the schema graph of one database and print its size.
    BuildGraph(SourceArgs),
    /// Phase-1 fine-tuning, then phase-2 GNN training per variant.
    Pretrain(PretrainArgs),
    /// Score trained checkpoints on the test split.
    Evaluate(EvaluateArgs),
    /// Write the node and edge lists of one database's graph.
    ExportGraph(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    databases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SourceArgs {
    /// A manifest file or a directory holding `manifest.json`.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    manifest: Option<PathBuf>,
    /// A directory of database directories.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_NULL_TOKEN)]
    null_token: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = DEFAULT_NULL_TOKEN)]
    null_token: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_enum)]
    parallelism: Option<ParallelismArg>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// 1 stops after phase 1; 2 resumes from an existing phase-1 checkpoint.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: Option<u8>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ParallelismArg {
    Sequential,
    Rayon,
}

/// Experiment file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    corpus_dir: PathBuf,
    output_dir: PathBuf,
    #[serde(default = "default_variants")]
    variants: Vec<String>,
    #[serde(default = "default_null_token")]
    null_token: String,
    #[serde(default)]
    train: TrainConfig,
}

fn default_variants() -> Vec<String> {
    vec![BASELINE.into(), OURS.into()]
}

fn default_null_token() -> String {
    DEFAULT_NULL_TOKEN.into()
}

/// Bad input from the command line or config file: exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Resolved {
    cfg: RunConfig,
    variants: Vec<VariantSpec>,
}

fn resolve(args: &RunArgs) -> Result<Resolved> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", args.config.display())))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    cfg.corpus_dir = base.join(&cfg.corpus_dir);
    cfg.output_dir = base.join(&cfg.output_dir);
    if let Some(c) = &args.corpus {
        cfg.corpus_dir = c.clone();
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(v) = &args.variants {
        cfg.variants = v.clone();
    }
    if let Some(r) = args.runs {
        cfg.train.n_runs = r;
    }
    if let Some(p) = args.parallelism {
        cfg.train.parallelism = match p {
            ParallelismArg::Sequential => Parallelism::Sequential,
            ParallelismArg::Rayon => Parallelism::Rayon,
        };
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.variants.is_empty() {
        return Err(usage("no variants requested"));
    }
    let variants = cfg
        .variants
        .iter()
        .map(|n| VariantSpec::by_name(n).map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Resolved { cfg, variants })
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("output directory {} is locked by {}", dir.display(), path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn run_dir(out: &Path, run: usize) -> PathBuf {
    if run == 0 {
        out.to_path_buf()
    } else {
        out.join(format!("run{run}"))
    }
}

fn checkpoint_name(variant: &VariantSpec) -> String {
    if !variant.use_gnn {
        "phase1.ckpt".into()
    } else if variant.name == OURS {
        "phase2-best.ckpt".into()
    } else {
        format!("phase2-best-{}.ckpt", variant.name)
    }
}

struct Prepared {
    corpus: Vec<relgraph::store::RelationalDatabase>,
    split: CorpusSplit,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let opts = LoadOptions {
        null_token: cfg.null_token.clone(),
    };
    let corpus =
        load_corpus(&cfg.corpus_dir, &opts).with_context(|| format!("loading corpus {}", cfg.corpus_dir.display()))?;
    let t = &cfg.train;
    let split = split_corpus(&corpus, t.split, t.split_unit, t.split_seed)?;
    Ok(Prepared { corpus, split })
}

fn append_logs(path: &Path, run: usize, variant: &str, logs: &[EpochLog]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for l in logs {
        let mut v = serde_json::to_value(l)?;
        v["run"] = run.into();
        v["variant"] = variant.into();
        writeln!(f, "{v}")?;
    }
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let Resolved { cfg, variants } = resolve(&args.run)?;
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let p = prepare(&cfg)?;
    let vocab_path = out.join(VOCAB_FILE);
    let vocab = if args.phase == Some(2) {
        Vocabulary::load(&vocab_path)?
    } else {
        let v = build_vocabulary(&p.split.train, cfg.train.min_freq)?;
        v.save(&vocab_path)?;
        v
    };
    for run in 0..cfg.train.n_runs {
        let rc = cfg.train.for_run(run);
        let dir = run_dir(out, run);
        fs::create_dir_all(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let p1_path = dir.join("phase1.ckpt");
        let phase1 = if args.phase == Some(2) {
            checkpoint::load(&p1_path)?
        } else {
            let _ = fs::remove_file(&log_path);
            let (state, logs) = phase1_finetune(&rc, &p.split.train, &p.split.val, &vocab)?;
            checkpoint::save(&state, &p1_path)?;
            append_logs(&log_path, run, "phase1", &logs)?;
            state
        };
        if args.phase == Some(1) {
            continue;
        }
        for v in variants.iter().filter(|v| v.use_gnn) {
            let (state, logs) = train_variant(&rc, &p.split, &vocab, v, Some(&phase1))?;
            checkpoint::save(&state, &dir.join(checkpoint_name(v)))?;
            append_logs(&log_path, run, &v.name, &logs)?;
        }
        eprintln!("run {run}: checkpoints in {}", dir.display());
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let Resolved { cfg, variants } = resolve(&args.run)?;
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let p = prepare(&cfg)?;
    let vocab = Vocabulary::load(&out.join(VOCAB_FILE))?;
    let mut per_variant = vec![Vec::new(); variants.len()];
    for run in 0..cfg.train.n_runs {
        let rc = cfg.train.for_run(run);
        let dir = run_dir(out, run);
        for (v, acc) in variants.iter().zip(per_variant.iter_mut()) {
            let state = checkpoint::load(&dir.join(checkpoint_name(v)))?;
            acc.push(evaluate_variant(&state, &p.split, &vocab, v, &rc, run)?);
        }
    }
    let report = assemble_report(&p.corpus, &cfg.train, &p.split, &vocab, &variants, per_variant);
    let mut text = report.to_table();
    if report.variant(BASELINE).is_some() && report.variant(OURS).is_some() {
        text.push('\n');
        for f in compare_to_paper(&report)? {
            text.push_str(&f.message);
            text.push('\n');
        }
    }
    fs::write(out.join("report.json"), report.to_json() + "\n")?;
    fs::write(out.join("report.txt"), &text)?;
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_gen_synthetic(args: &GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid spec {}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = args.databases {
        spec.n_databases = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(v) = args.vocab_size {
        spec.vocab_size = v;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = generate_synthetic_corpus(&spec)?;
    save_corpus(&corpus, &args.out, DEFAULT_NULL_TOKEN)?;
    outln!("wrote {} databases to {}", corpus.len(), args.out.display());
    Ok(())
}

fn load_sources(args: &SourceArgs) -> Result<Vec<relgraph::store::RelationalDatabase>> {
    let opts = LoadOptions {
        null_token: args.null_token.clone(),
    };
    match (&args.manifest, &args.corpus) {
        (Some(m), _) => Ok(vec![load_database_with(m, &opts)?]),
        (None, Some(c)) => Ok(load_corpus(c, &opts)?),
        (None, None) => Err(usage("one of --manifest or --corpus is required")),
    }
}

fn cmd_ingest_validate(args: &SourceArgs) -> Result<()> {
    for db in load_sources(args)? {
        outln!(
            "{}: {} tables, {} rows, {} columns, {} foreign keys: ok",
            db.name,
            db.tables.len(),
            db.num_rows(),
            db.num_columns(),
            db.foreign_keys.len()
        );
    }
    Ok(())
}

fn cmd_build_graph(args: &SourceArgs) -> Result<()> {
    for db in load_sources(args)? {
        let g = build_graph(&db)?;
        let nodes = |k| g.nodes.iter().filter(|n| n.kind == k).count();
        let edges = |t| g.undirected_edges().filter(|e| e.etype == t).count();
        outln!(
            "{}: {} nodes ({} table, {} column, {} row), {} edges ({} row_in_table, {} col_in_table, {} cell_link, {} fk_link)",
            db.name,
            g.num_nodes(),
            nodes(NodeKind::Table),
            nodes(NodeKind::Column),
            nodes(NodeKind::Row),
            g.num_undirected_edges(),
            edges(EdgeType::RowInTable),
            edges(EdgeType::ColInTable),
            edges(EdgeType::CellLink),
            edges(EdgeType::FkLink),
        );
    }
    Ok(())
}

fn cmd_export_graph(args: &ExportArgs) -> Result<()> {
    let opts = LoadOptions {
        null_token: args.null_token.clone(),
    };
    let db = load_database_with(&args.manifest, &opts)?;
    let g = build_graph(&db)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("nodes.txt"), g.export_nodes(&db))?;
    fs::write(args.out.join("edges.txt"), g.export_edges())?;
    outln!(
        "{} nodes, {} edges written to {}",
        g.num_nodes(),
        g.edges.len(),
        args.out.display()
    );
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RELGRAPH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("RELGRAPH_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::IngestValidate(a) => cmd_ingest_validate(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ExportGraph(a) => cmd_export_graph(a),
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their
/// parent's message.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
