use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relforge::docforge::{shrink_on_oversize, DocContext, DocError, DocParams, DocRecord, Document};
use relforge::evalharness::{
    auroc, ground_truth_oracle, mae, run_grid, sample_test, token_stats_of, train_head, GridSpec, Mode, RunOptions,
};
use relforge::inference::{build_grid, classification_score, median_predict};
use relforge::mlphead::TrainConfig;
use relforge::relstore::IndexedStore;
use relforge::scorer::{Backend, HttpScorer, MockScorer, Scorer, ScorerConfig, ScorerServer};
use relforge::synth::{SynthConfig, SynthDb, SynthTask};
use relforge::taskdef::{open_task, sample_in_context, LoadedTask, Metric, SplitKind, TaskRow, TaskType};

#[derive(Parser)]
#[command(name = "relforge", version, about = "Relational rows to LLM documents and predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a schema manifest and its CSVs and copy them into a store directory.
    Ingest(IngestArgs),
    /// Build documents for one split of a task.
    BuildDocs(BuildDocsArgs),
    /// Score documents and decode predictions.
    Infer(InferArgs),
    /// Train an MLP head on last-token embeddings.
    TrainHead(TrainHeadArgs),
    /// Compute the task metric for a predictions file.
    Evaluate(EvaluateArgs),
    /// Sweep document parameters and select by validation metric.
    Grid(GridArgs),
    /// Serve the mock scorer over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic retail database and task.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TaskArgs {
    /// Task manifest.
    #[arg(long)]
    task: PathBuf,
    /// Store directory (with schema.json) or schema manifest. Defaults to
    /// the task manifest's directory.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ScorerArgs {
    /// `mock`, or the base URL of a scoring server.
    #[arg(long, env = "RELFORGE_SCORER_URL", default_value = "mock")]
    scorer: String,
    /// Mock only: answer from the task's ground truth (needs --task and --store).
    #[arg(long)]
    oracle: bool,
    /// Mock only: invert the oracle's labels.
    #[arg(long, requires = "oracle")]
    invert: bool,
    /// Mock only: reject documents above this many tokens.
    #[arg(long)]
    context_limit: Option<usize>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Mock only: embedding width.
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDocsArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// e.g. "n_inc=8,n_rel=8,n_nest=4,d=1".
    #[arg(long)]
    params: String,
    #[arg(long, default_value = "test")]
    split: SplitKind,
    #[arg(long, env = "RELFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Rows sampled from the split.
    #[arg(long, default_value_t = 10_000)]
    cap: usize,
    /// Shrink documents above this token estimate.
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    docs: PathBuf,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value = "metric-aware")]
    mode: Mode,
    /// Needed for regression tasks and for --oracle.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Regression candidates per document.
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, env = "RELFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    params: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, env = "RELFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    test_cap: usize,
    /// Head checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Test-row predictions.
    #[arg(long)]
    preds: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitKind,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// `default`, or e.g. "n_inc=0,8;n_rel=0,8;n_nest=0,4;d=0,1".
    #[arg(long, default_value = "default")]
    grid: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long, default_value = "metric-aware")]
    mode: Mode,
    /// Comma-separated seeds.
    #[arg(long, env = "RELFORGE_SEED", default_value = "0")]
    seeds: String,
    #[arg(long, default_value_t = 10_000)]
    test_cap: usize,
    #[arg(long, default_value_t = 10_000)]
    val_cap: usize,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, env = "RELFORGE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// churn, order-count or repeat-buyer.
    #[arg(long, default_value = "churn")]
    task: SynthTask,
    #[arg(long, env = "RELFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    customers: usize,
    #[arg(long, default_value_t = 3_000)]
    orders: usize,
    #[arg(long, default_value_t = 6_000)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    seed_times: usize,
    #[arg(long, default_value_t = 40)]
    rows_per_time: usize,
}

/// One line of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    row_id: usize,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<DocParams>,
    prediction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn manifest_path(store: &Path) -> PathBuf {
    if store.is_dir() {
        store.join("schema.json")
    } else {
        store.to_path_buf()
    }
}

fn load(task: &Path, store: Option<&Path>) -> Result<(IndexedStore, LoadedTask)> {
    let manifest = match store {
        Some(s) => manifest_path(s),
        None => task.parent().unwrap_or_else(|| Path::new(".")).join("schema.json"),
    };
    let store = IndexedStore::open(&manifest).with_context(|| format!("loading store {}", manifest.display()))?;
    let task = open_task(task, &store).with_context(|| format!("loading task {}", task.display()))?;
    Ok((store, task))
}

fn make_scorer(args: &ScorerArgs, ctx: Option<(&IndexedStore, &LoadedTask)>, seed: u64) -> Result<Box<dyn Scorer>> {
    if args.scorer != "mock" {
        let cfg = ScorerConfig {
            backend: Backend::Http,
            endpoint: Some(args.scorer.clone()),
            top_k: args.top_k,
            max_in_flight: args.max_in_flight,
            timeout: Duration::from_secs(args.timeout_secs),
            ..Default::default()
        };
        cfg.validate()?;
        return Ok(Box::new(HttpScorer::new(&cfg)?));
    }
    let mut mock = if args.oracle {
        let (store, task) = ctx.ok_or_else(|| anyhow!("--oracle needs --task and --store"))?;
        let rows: Vec<TaskRow> = [SplitKind::Train, SplitKind::Validation, SplitKind::Test]
            .iter()
            .flat_map(|k| task.split.get(*k).iter().cloned())
            .collect();
        MockScorer::oracle(ground_truth_oracle(store, &task.spec, &rows), args.invert).with_seed(seed)
    } else {
        MockScorer::hashed(seed, args.embed_dim)
    };
    mock = mock.with_dim(args.embed_dim).with_max_in_flight(args.max_in_flight);
    mock.top_k = args.top_k;
    if let Some(limit) = args.context_limit {
        mock = mock.with_context_limit(limit);
    }
    Ok(Box::new(mock))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn ingest(args: IngestArgs) -> Result<()> {
    let store = IndexedStore::open(&args.schema)?;
    let src = args.schema.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(&args.out)?;
    let mut schema = store.schema();
    for spec in &mut schema.tables {
        let from = src.join(spec.file.clone().unwrap_or_else(|| format!("{}.csv", spec.name)));
        let file = format!("{}.csv", spec.name);
        fs::copy(&from, args.out.join(&file)).with_context(|| format!("copying {}", from.display()))?;
        spec.file = Some(file);
    }
    fs::write(args.out.join("schema.json"), schema.to_manifest_json())?;
    let report = serde_json::json!({
        "tables": store.tables().iter().map(|t| serde_json::json!({
            "name": t.name(),
            "rows": t.len(),
            "fact": t.is_fact(),
            "timestamp_column": t.spec.timestamp_column,
        })).collect::<Vec<_>>(),
        "links": store.links().len(),
        "total_rows": store.total_rows(),
        "dangling_references": store.dangling_references().len(),
    });
    fs::write(args.out.join("ingest_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "ingested {} tables, {} rows, {} links into {}",
        store.tables().len(),
        store.total_rows(),
        store.links().len(),
        args.out.display()
    );
    Ok(())
}

/// Builds a document, halving n_inc and n_rel while it exceeds the limit.
fn build_fitting(ctx: &DocContext<'_>, row: &TaskRow, params: DocParams, inc: &[TaskRow]) -> Result<Document, DocError> {
    let mut p = params;
    loop {
        match ctx.build_document(row, p, inc) {
            Err(DocError::Oversize { .. }) if shrink_on_oversize(p) != p => {
                log::info!("row {}: oversize at {p}, shrinking", row.id);
                p = shrink_on_oversize(p);
            }
            other => return other,
        }
    }
}

fn build_docs(args: BuildDocsArgs) -> Result<()> {
    let (store, task) = load(&args.task.task, args.task.store.as_deref())?;
    let params: DocParams = args.params.parse::<DocParams>()?.with_seed(args.seed);
    let rows = sample_test(task.split.get(args.split), args.cap, args.seed);
    let mut ctx = DocContext::new(&task.spec, &store, &task.split.train);
    ctx.max_tokens = args.max_tokens;
    let spec = &task.spec;

    let shared = if args.split == SplitKind::Train {
        None
    } else {
        let before = rows.iter().map(|r| r.seed_time).min().unwrap_or(i64::MAX);
        Some(sample_in_context(spec.task_type, &task.split.train, params.n_inc, before, args.seed))
    };
    let workers = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    let built = relforge::scorer::fan_out(&rows, workers, |row| {
        let own;
        let inc = match &shared {
            Some(s) => s.as_slice(),
            None => {
                own = sample_in_context(spec.task_type, &task.split.train, params.n_inc, row.seed_time, args.seed ^ row.id as u64);
                own.as_slice()
            }
        };
        build_fitting(&ctx, row, params, inc)
    });
    let mut records = Vec::with_capacity(rows.len());
    let mut tokens = Vec::with_capacity(rows.len());
    for (row, doc) in rows.iter().zip(built) {
        match doc {
            Ok(doc) => {
                tokens.push(doc.token_estimate);
                let mut rec = DocRecord::from_document(&doc, args.split.as_str(), row.target.as_ref());
                rec.task_type = Some(spec.task_type);
                records.push(rec);
            }
            Err(e) => log::warn!("row {}: {e}", row.id),
        }
    }
    write_jsonl(&args.out, &records)?;
    let stats = token_stats_of(&tokens).map(|s| s.to_string()).unwrap_or_else(|_| "n/a".into());
    println!("wrote {} documents to {} (tokens {stats})", records.len(), args.out.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    if args.mode != Mode::MetricAware {
        bail!("infer supports --mode metric-aware; use train-head for MLP heads");
    }
    let docs: Vec<DocRecord> = read_jsonl(&args.docs)?;
    let loaded = match &args.task {
        Some(t) => Some(load(t, args.store.as_deref())?),
        None if args.store.is_some() => bail!("--store needs --task"),
        None => None,
    };
    let task_type = match (&loaded, docs.first().and_then(|d| d.task_type)) {
        (Some((_, t)), _) => t.spec.task_type,
        (None, Some(t)) => t,
        (None, None) => TaskType::BinaryClassification,
    };
    let scorer = make_scorer(&args.scorer, loaded.as_ref().map(|(s, t)| (s, t)), args.seed)?;
    let grid = match task_type {
        TaskType::BinaryClassification => None,
        TaskType::Regression => {
            let (_, task) = loaded
                .as_ref()
                .ok_or_else(|| anyhow!("regression documents need --task and --store for the candidate grid"))?;
            let targets: Vec<f64> = task.split.train.iter().filter_map(TaskRow::target_f64).collect();
            Some(build_grid(&targets, args.candidates)?)
        }
    };
    let scorer = scorer.as_ref();
    let results = relforge::scorer::fan_out(&docs, scorer.max_in_flight(), |d| {
        let prompt = d.scoring_prompt();
        match &grid {
            None => scorer.next_token_distribution(&prompt).map(|dist| classification_score(&dist)),
            Some(g) => median_predict(&prompt, g, scorer).map(|m| m.value),
        }
    });
    let mut failed = 0;
    let preds: Vec<PredictionRecord> = docs
        .iter()
        .zip(results)
        .map(|(d, r)| {
            let (prediction, error) = match r {
                Ok(v) => (Some(v), None),
                Err(e) => {
                    failed += 1;
                    (None, Some(e.to_string()))
                }
            };
            PredictionRecord {
                row_id: d.row_id,
                split: d.split.clone(),
                params: Some(d.params),
                prediction,
                error,
            }
        })
        .collect();
    write_jsonl(&args.out, &preds)?;
    println!("wrote {} predictions ({failed} failed) to {}", preds.len(), args.out.display());
    Ok(())
}

fn train_head_cmd(args: TrainHeadArgs) -> Result<()> {
    let (store, task) = load(&args.task.task, args.task.store.as_deref())?;
    let params: DocParams = args.params.parse()?;
    let scorer = make_scorer(&args.scorer, Some((&store, &task)), args.seed)?;
    let opts = RunOptions {
        mode: Mode::MlpHead,
        seeds: vec![args.seed],
        n_train: args.n_train,
        test_cap: args.test_cap,
        train: TrainConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            lr0: args.lr,
            seed: args.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = train_head(&task.spec, &task.split, &store, params, scorer.as_ref(), &opts).map_err(|e| anyhow!(e))?;
    run.head.save(&args.out)?;
    if let Some(path) = &args.preds {
        write_jsonl(
            path,
            run.test_predictions.iter().map(|(id, p)| PredictionRecord {
                row_id: *id,
                split: "test".into(),
                params: Some(params),
                prediction: *p,
                error: None,
            }),
        )?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "head": args.out,
            "best_epoch": run.history.best_epoch,
            "val_metric": run.val_metric,
            "test_metric": run.test_metric,
            "failures": run.failures.len(),
            "shrinks": run.shrinks.len(),
        }))?
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (_, task) = load(&args.task.task, args.task.store.as_deref())?;
    let preds: Vec<PredictionRecord> = read_jsonl(&args.preds)?;
    let rows = task.split.get(args.split);
    let mut by_id = std::collections::HashMap::new();
    for p in preds.iter().filter(|p| p.split == args.split.as_str()) {
        by_id.insert(p.row_id, p.prediction);
    }
    let (mut scores, mut targets) = (Vec::new(), Vec::new());
    let (mut missing, mut failed) = (0usize, 0usize);
    for r in rows {
        let Some(y) = r.target_f64() else { continue };
        match by_id.get(&r.id) {
            Some(Some(p)) => {
                scores.push(*p);
                targets.push(y);
            }
            Some(None) => failed += 1,
            None => missing += 1,
        }
    }
    if scores.is_empty() {
        bail!("no predictions match {} rows of {}", args.split.as_str(), task.spec.name);
    }
    let value = match task.spec.metric {
        Metric::Auroc => auroc(&scores, &targets)?,
        Metric::Mae => mae(&scores, &targets)?,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "task": task.spec.name,
            "split": args.split.as_str(),
            "metric": task.spec.metric,
            "value": value,
            "n": scores.len(),
            "missing": missing,
            "failed": failed,
        }))?
    );
    Ok(())
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    if s == "default" {
        return Ok(GridSpec::default());
    }
    let mut g = GridSpec::default();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| anyhow!("`{part}` is not key=values"))?;
        let vals = v
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("grid values for {k}"))?;
        match k.trim() {
            "n_inc" => g.n_inc_choices = vals,
            "n_rel" => g.n_rel_choices = vals,
            "n_nest" => g.n_nest_choices = vals,
            "d" => g.d_choices = vals,
            other => bail!("unknown grid knob `{other}`"),
        }
    }
    Ok(g)
}

fn grid(args: GridArgs) -> Result<()> {
    let (store, task) = load(&args.task.task, args.task.store.as_deref())?;
    let seeds = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .context("--seeds")?;
    let scorer = make_scorer(&args.scorer, Some((&store, &task)), seeds.first().copied().unwrap_or(0))?;
    let spec = parse_grid(&args.grid)?;
    let opts = RunOptions {
        mode: args.mode,
        seeds,
        test_cap: args.test_cap,
        val_cap: args.val_cap,
        max_candidates: args.candidates,
        max_doc_tokens: args.max_tokens,
        n_train: args.n_train,
        ..Default::default()
    };
    let report = run_grid(&task.spec, &task.split, &store, &spec, scorer.as_ref(), &opts);
    fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for c in &report.configs {
        println!(
            "{:<32} val={:<8} test={:<8} tokens={}{}",
            c.params.to_string(),
            fmt(c.val_metric),
            fmt(c.test_metric),
            c.tokens,
            if c.valid { "" } else { "  (invalid)" }
        );
    }
    match report.selected {
        Some(p) => println!(
            "selected {p}: val={} test={}",
            fmt(report.selected_val_metric),
            fmt(report.selected_test_metric)
        ),
        None => println!("no valid configuration"),
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    if args.scorer.scorer != "mock" {
        bail!("serve only hosts the mock scorer");
    }
    let loaded = match &args.task {
        Some(t) => Some(load(t, args.store.as_deref())?),
        None if args.store.is_some() => bail!("--store needs --task"),
        None => None,
    };
    let scorer = make_scorer(&args.scorer, loaded.as_ref().map(|(s, t)| (s, t)), args.seed)?;
    let server = ScorerServer::start(Arc::from(scorer), &args.addr)?;
    println!("serving mock scorer on {}", server.url());
    server.wait();
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        task: args.task,
        n_customers: args.customers,
        n_orders: args.orders,
        n_items: args.items,
        n_seed_times: args.seed_times,
        rows_per_seed_time: args.rows_per_time,
        ..Default::default()
    };
    let db = SynthDb::generate(&cfg);
    let (schema, task) = db.write(&args.out)?;
    println!("wrote {} rows: schema {} task {}", db.total_rows(), schema.display(), task.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(a),
        Command::BuildDocs(a) => build_docs(a),
        Command::Infer(a) => infer(a),
        Command::TrainHead(a) => train_head_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Grid(a) => grid(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}
