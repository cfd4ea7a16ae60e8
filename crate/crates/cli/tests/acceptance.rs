//! Acceptance checks. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;

use relforge::docforge::{DefaultTokenizer, DocContext, DocParams, Document, Tokenizer};
use relforge::evalharness::{auroc, ground_truth_oracle, run_grid, GridSpec, RunOptions};
use relforge::inference::{build_grid, median_predict, CandidateGrid};
use relforge::mlphead::{train, validation_metric, HeadDataset, MlpHead, OutputMode, TrainConfig};
use relforge::relstore::IndexedStore;
use relforge::scorer::{
    Backend, Embedding, HttpScorer, MockScorer, Scorer, ScorerConfig, ScorerError, ScorerServer, TokenDistribution,
};
use relforge::synth::{SynthConfig, SynthDb, SynthTask};
use relforge::taskdef::{sample_in_context, LoadedTask, TaskRow};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> DocParams {
    DocParams::new(
        rng.gen_range(0..=16),
        rng.gen_range(0..=16),
        rng.gen_range(0..=8),
        rng.gen_range(0..=2),
    )
}

fn random_store(rng: &mut ChaCha8Rng) -> (IndexedStore, LoadedTask) {
    let task = *[SynthTask::Churn, SynthTask::OrderCount, SynthTask::RepeatBuyer]
        .choose(rng)
        .unwrap();
    let cfg = SynthConfig {
        seed: rng.gen(),
        task,
        n_customers: rng.gen_range(40..=300),
        n_products: rng.gen_range(10..=50),
        n_orders: rng.gen_range(300..=3_000),
        n_items: rng.gen_range(500..=6_000),
        n_seed_times: rng.gen_range(8..=20),
        rows_per_seed_time: rng.gen_range(10..=40),
        ..Default::default()
    };
    SynthDb::generate(&cfg).load().expect("synthetic store loads")
}

fn all_rows(task: &LoadedTask) -> Vec<TaskRow> {
    let s = &task.split;
    s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect()
}

/// JSON lines after the natural-language context, parsed in order.
fn parsed_blocks(doc: &Document) -> Result<Vec<Json>, String> {
    doc.blocks()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("row {}: bad JSON line: {e}", doc.task_row_id)))
        .collect()
}

/// Every `*_ts` string anywhere under `v`.
fn fact_times<'a>(v: &'a Json, out: &mut Vec<&'a str>) {
    match v {
        Json::Object(m) => {
            for (k, x) in m {
                if k.ends_with("_ts") {
                    if let Json::String(s) = x {
                        out.push(s);
                    }
                }
                fact_times(x, out);
            }
        }
        Json::Array(a) => a.iter().for_each(|x| fact_times(x, out)),
        _ => {}
    }
}

// AC1: no fact row at or after the test row's seed time appears anywhere in
// the document.
fn ac1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut docs = 0usize;
    let mut stamps = 0usize;
    let mut leaks = Vec::new();
    while docs < 10_000 {
        let (store, task) = random_store(&mut rng);
        let ctx = DocContext::new(&task.spec, &store, &task.split.train);
        let rows = all_rows(&task);
        let jobs: Vec<(TaskRow, DocParams, u64, bool)> = (0..1_700)
            .map(|_| (rows.choose(&mut rng).unwrap().clone(), random_params(&mut rng), rng.gen(), rng.gen()))
            .collect();
        let workers = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
        let results = relforge::scorer::fan_out(&jobs, workers, |(row, p, seed, any_time)| {
            // Half the pools ignore the test row's time; the builder must filter them.
            let before = if *any_time { i64::MAX } else { row.seed_time };
            let pool = sample_in_context(task.spec.task_type, &task.split.train, p.n_inc, before, *seed);
            let doc = ctx.build_document(row, *p, &pool).map_err(|e| e.to_string())?;
            let blocks = parsed_blocks(&doc)?;
            let seed_time = blocks
                .last()
                .and_then(|b| b.get(&task.spec.seed_time_column))
                .and_then(Json::as_str)
                .ok_or("test block lacks its seed time")?
                .to_string();
            let mut times = Vec::new();
            blocks.iter().for_each(|b| fact_times(b, &mut times));
            let mut bad = Vec::new();
            for t in &times {
                if t.len() != seed_time.len() || !t.ends_with('Z') {
                    return Err(format!("unexpected timestamp format {t}"));
                }
                if **t >= *seed_time {
                    bad.push(format!("row {} ({p}): {t} >= {seed_time}", row.id));
                }
            }
            Ok::<_, String>((times.len(), bad))
        });
        for r in results {
            let (n, bad) = r?;
            stamps += n;
            leaks.extend(bad);
            docs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(leaks.is_empty(), || format!("{} leaked fact rows, e.g. {}", leaks.len(), leaks[0]))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{docs} docs, {stamps} fact timestamps checked, 0 leaks, {secs:.1}s"))
}

/// Checks nesting caps on one parsed entity and collects nested table names.
fn check_nesting(v: &Json, n_nest: usize, depth: usize, d: usize, tables: &mut Vec<String>) -> Result<(), String> {
    let Json::Object(m) = v else { return Ok(()) };
    for (k, x) in m {
        if let Json::Array(kids) = x {
            ensure(depth < d, || format!("`{k}` nested at depth {} > d={d}", depth + 1))?;
            ensure(kids.len() <= n_nest, || format!("`{k}` has {} children > n_nest={n_nest}", kids.len()))?;
            tables.push(k.clone());
            for kid in kids {
                check_nesting(kid, n_nest, depth + 1, d, tables)?;
            }
        }
    }
    Ok(())
}

// AC2: nesting caps, depth cap, one expansion per table, and exact example
// counts.
fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut docs, mut nested) = (0usize, 0usize);
    while docs < 1_000 {
        let (store, task) = random_store(&mut rng);
        let train = &task.split.train;
        let ctx = DocContext::new(&task.spec, &store, train);
        let rows = all_rows(&task);
        for _ in 0..250 {
            let row = rows.choose(&mut rng).unwrap();
            let p = random_params(&mut rng);
            let pool = sample_in_context(task.spec.task_type, train, 16, i64::MAX, rng.gen());
            let doc = ctx.build_document(row, p, &pool).map_err(|e| e.to_string())?;
            let blocks = parsed_blocks(&doc)?;
            let tag = format!("row {} ({p})", row.id);

            let eligible: Vec<usize> = pool.iter().filter(|r| r.seed_time < row.seed_time).map(|r| r.id).collect();
            let want_inc = p.n_inc.min(eligible.len());
            let inc_ids: HashSet<usize> = eligible.iter().take(want_inc).copied().collect();
            let related = train
                .iter()
                .filter(|r| r.seed_time < row.seed_time && r.fkey_values == row.fkey_values && !inc_ids.contains(&r.id))
                .count();
            let want_rel = p.n_rel.min(related);
            ensure(blocks.len() == want_inc + want_rel + 1, || {
                format!("{tag}: {} blocks, want {want_inc} in-context + {want_rel} related + 1", blocks.len())
            })?;
            ensure(doc.parts.n_inc == want_inc && doc.parts.n_rel <= p.n_rel, || {
                format!("{tag}: parts {:?}", doc.parts)
            })?;

            for b in &blocks {
                let mut tables = Vec::new();
                check_nesting(b, p.n_nest, 0, p.d, &mut tables).map_err(|e| format!("{tag}: {e}"))?;
                let unique: HashSet<&String> = tables.iter().collect();
                ensure(unique.len() == tables.len(), || format!("{tag}: a table is expanded twice: {tables:?}"))?;
                nested += tables.len();
            }
            docs += 1;
        }
    }
    Ok(format!("{docs} docs, {nested} nested groups within caps"))
}

/// Reference JSON writer with `": "` and `", "` separators.
fn canonical(v: &Json, out: &mut String) {
    match v {
        Json::Object(m) => {
            out.push('{');
            for (i, (k, x)) in m.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push_str(": ");
                canonical(x, out);
            }
            out.push('}');
        }
        Json::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

// AC3: target placement, round-trip parsing and byte-identical regeneration.
fn ac3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut docs = 0usize;
    while docs < 1_000 {
        let (store, task) = random_store(&mut rng);
        let target = task.spec.target_column.clone();
        let rows = all_rows(&task);
        let jobs: Vec<(TaskRow, DocParams, u64)> = (0..250)
            .map(|_| (rows.choose(&mut rng).unwrap().clone(), random_params(&mut rng), rng.gen()))
            .collect();
        let build = |row: &TaskRow, p: DocParams, seed: u64| {
            let ctx = DocContext::new(&task.spec, &store, &task.split.train);
            let pool = sample_in_context(task.spec.task_type, &task.split.train, p.n_inc, row.seed_time, seed);
            ctx.build_document(row, p, &pool).map_err(|e| e.to_string())
        };
        for (row, p, seed) in &jobs {
            let doc = build(row, *p, *seed)?;
            let tag = format!("row {} ({p})", row.id);
            let lines: Vec<&str> = doc.blocks().collect();
            let blocks = parsed_blocks(&doc)?;
            let (test, examples) = blocks.split_last().ok_or("no blocks")?;
            for b in examples {
                let last = b.as_object().and_then(|m| m.keys().next_back()).ok_or("example is not an object")?;
                ensure(*last == target, || format!("{tag}: example ends with `{last}`"))?;
            }
            ensure(test.get(&target).is_none(), || format!("{tag}: test block carries the target"))?;
            for (line, v) in lines.iter().zip(&blocks) {
                let mut again = String::new();
                canonical(v, &mut again);
                ensure(again == *line, || format!("{tag}: round trip differs:\n{line}\n{again}"))?;
            }
            let twin = build(row, *p, *seed)?;
            ensure(twin.text == doc.text, || format!("{tag}: regeneration differs"))?;
            docs += 1;
        }
    }
    Ok(format!("{docs} docs: targets placed, round trips exact, regeneration identical"))
}

fn pair_count_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

// AC4: AUROC against a pair-count oracle and under monotone transforms.
fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let transforms: [fn(f64) -> f64; 4] = [|x| x.exp(), |x| x * x * x + x, |x| 3.0 * x - 7.0, |x| x.atan()];
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=500);
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        labels.shuffle(&mut rng);
        // Coarse levels so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64 * 4.0 - 2.0)
            .collect();
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pair_count_auroc(&scores, &labels);
        worst = worst.max((got - want).abs());
        for f in transforms {
            let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let again = auroc(&moved, &labels).map_err(|e| e.to_string())?;
            worst = worst.max((again - got).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 instances, max deviation {worst:e}"))
}

/// Answers continuation requests from a fixed table.
struct TableScorer(std::collections::HashMap<String, f64>);

impl Scorer for TableScorer {
    fn next_token_distribution(&self, _: &str) -> Result<TokenDistribution, ScorerError> {
        Err(ScorerError::Config("unused".into()))
    }

    fn continuation_logprob(&self, _: &str, continuation: &str) -> Result<f64, ScorerError> {
        Ok(self.0[continuation])
    }

    fn embed_last_token(&self, _: &str) -> Result<Embedding, ScorerError> {
        Err(ScorerError::Config("unused".into()))
    }
}

// AC5: the decoded value minimizes expected absolute error over the grid.
fn ac5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..1_000 {
        let m = rng.gen_range(2..=1_024);
        let grid: CandidateGrid = if rng.gen_bool(0.5) {
            let lo = rng.gen_range(-50i64..50);
            build_grid(&[lo as f64, (lo + m as i64 - 1) as f64], 1_024)
        } else {
            let lo = rng.gen_range(-100.0..100.0);
            build_grid(&[lo, lo + rng.gen_range(0.5..500.0)], m)
        }
        .map_err(|e| e.to_string())?;
        ensure(grid.len() == m, || format!("case {case}: grid has {} values, want {m}", grid.len()))?;
        // Sparse, peaked or flat distributions, with repeated weights.
        let style = rng.gen_range(0..3);
        let lps: Vec<f64> = (0..m)
            .map(|_| match style {
                0 if rng.gen_bool(0.8) => f64::NEG_INFINITY,
                1 => -(rng.gen_range(0..4) as f64),
                _ => rng.gen_range(-30.0..0.0),
            })
            .collect();
        let mut lps = lps;
        let k = rng.gen_range(0..m);
        lps[k] = -1.0;
        let table = grid.rendered().iter().cloned().zip(lps.iter().copied()).collect();
        let got = median_predict("{\"target\": ", &grid, &TableScorer(table))
            .map_err(|e| e.to_string())?
            .value;

        let top = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lps.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let v = grid.values();
        let risk = |c: f64| v.iter().zip(&w).map(|(x, wi)| wi / z * (x - c).abs()).sum::<f64>();
        let best = v.iter().map(|&c| risk(c)).fold(f64::INFINITY, f64::min);
        let mine = risk(got);
        ensure(v.contains(&got), || format!("case {case}: {got} is not a grid value"))?;
        ensure(mine <= best + 1e-9 * best.abs().max(1.0), || {
            format!("case {case}: risk {mine} at {got}, minimum {best}")
        })?;
    }
    Ok("1000 distributions, every output in the argmin set".into())
}

// AC6: analytic gradients against central differences.
fn ac6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for case in 0..100 {
        for mode in [OutputMode::Logit, OutputMode::Linear] {
            let dim = rng.gen_range(1..=12);
            let hidden = rng.gen_range(1..=12);
            let head = MlpHead::init(dim, hidden, mode, rng.gen()).map_err(|e| e.to_string())?;
            let n = rng.gen_range(1..=16);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let ts: Vec<f64> = (0..n)
                .map(|_| match mode {
                    OutputMode::Logit => f64::from(rng.gen_bool(0.5) as u8),
                    OutputMode::Linear => rng.gen_range(-3.0..3.0),
                })
                .collect();
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let (_, grads) = head.loss_and_grad(&refs, &ts).map_err(|e| e.to_string())?;
            let analytic = grads.flat();
            let base = head.params();
            let h = 1e-6;
            let mut numeric = Vec::with_capacity(base.len());
            let mut probe = head.clone();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params(&p);
                let up = probe.loss_and_grad(&refs, &ts).map_err(|e| e.to_string())?.0;
                p[i] = base[i] - h;
                probe.set_params(&p);
                let down = probe.loss_and_grad(&refs, &ts).map_err(|e| e.to_string())?.0;
                numeric.push((up - down) / (2.0 * h));
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
            ensure(rel <= 1e-4, || format!("case {case} {mode:?}: relative error {rel:e}"))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("200 cases, max relative error {worst:e}"))
}

// AC7: the default training recipe separates two Gaussian clusters.
fn ac7() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let normal = rand_distr_normal();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..1_000 {
        let y = (i % 2) as f64;
        let centre = if y == 1.0 { 1.0 } else { -1.0 };
        let x: Vec<f64> = (0..32).map(|_| centre + normal(&mut rng)).collect();
        points.push(Embedding::new(x).map_err(|e| e.to_string())?);
        labels.push(y);
    }
    let val = HeadDataset::new(points.split_off(800), labels.split_off(800)).map_err(|e| e.to_string())?;
    let data = HeadDataset::new(points, labels).map_err(|e| e.to_string())?;
    // The recipe leaves batch size open; 256 gives too few steps at this size.
    let cfg = TrainConfig {
        batch_size: 32,
        ..Default::default()
    };
    ensure(cfg.lr0 == 1e-4 && cfg.epochs == 100 && cfg.weight_decay == 1e-3 && cfg.hidden == 10, || {
        "recipe defaults changed".into()
    })?;
    let head = MlpHead::init(32, cfg.hidden, OutputMode::Logit, 7).map_err(|e| e.to_string())?;
    let (head, _) = train(head, &data, Some(&val), &cfg).map_err(|e| e.to_string())?;
    let score = validation_metric(&head, &val).ok_or("no validation AUROC")?;
    let secs = start.elapsed().as_secs_f64();
    ensure(score >= 0.99, || format!("val AUROC {score:.4}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("val AUROC {score:.4} in {secs:.2}s (800 train / 200 val, batch 32)"))
}

/// Box-Muller standard normal.
fn rand_distr_normal() -> impl Fn(&mut ChaCha8Rng) -> f64 {
    |rng: &mut ChaCha8Rng| {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn relforge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relforge"))
        .args(args)
        .env_remove("RELFORGE_SCORER_URL")
        .env_remove("RELFORGE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("relforge {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn metric_value(stdout: &str) -> Result<f64, String> {
    let v: Json = serde_json::from_str(stdout).map_err(|e| format!("evaluate output: {e}"))?;
    v["value"].as_f64().ok_or_else(|| "evaluate printed no value".into())
}

// AC8: CLI pipeline with the oracle and inverted mocks, then the full grid.
fn ac8(dir: &Path) -> Outcome {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    relforge(&["synth", "--out", &p("raw")])?;
    relforge(&["ingest", "--schema", &p("raw/schema.json"), "--out", &p("store")])?;
    let report: Json = serde_json::from_str(&std::fs::read_to_string(dir.join("store/ingest_report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let tables = report["tables"].as_array().map_or(0, Vec::len);
    let rows = report["total_rows"].as_u64().unwrap_or(0);
    ensure(tables == 5 && (8_000..=12_000).contains(&rows), || format!("store has {tables} tables, {rows} rows"))?;

    let (task, store) = (p("raw/customer-churn.json"), p("store"));
    let params = "n_inc=8,n_rel=8,n_nest=4,d=1";
    relforge(&["build-docs", "--task", &task, "--store", &store, "--params", params, "--out", &p("docs.jsonl")])?;
    let mut values = Vec::new();
    for (name, invert) in [("oracle", false), ("inverted", true)] {
        let out = p(&format!("{name}.jsonl"));
        let docs = p("docs.jsonl");
        let mut args = vec!["infer", "--docs", &docs, "--scorer", "mock", "--oracle"];
        args.extend(["--task", &task, "--store", &store, "--out", &out]);
        if invert {
            args.push("--invert");
        }
        relforge(&args)?;
        values.push(metric_value(&relforge(&["evaluate", "--preds", &out, "--task", &task, "--store", &store])?)?);
    }
    ensure(values == [1.0, 0.0], || format!("oracle/inverted AUROC {values:?}"))?;

    let start = Instant::now();
    relforge(&[
        "grid", "--task", &task, "--store", &store, "--scorer", "mock", "--oracle", "--report", &p("report.json"),
    ])?;
    let secs = start.elapsed().as_secs_f64();
    let report: Json = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let n = report["configs"].as_array().map_or(0, Vec::len);
    ensure(n == 54, || format!("grid ran {n} configs"))?;
    ensure(report["selected_test_metric"].as_f64() == Some(1.0), || {
        format!("selected test metric {}", report["selected_test_metric"])
    })?;
    ensure(secs < 300.0, || format!("grid took {secs:.1}s"))?;
    Ok(format!(
        "{rows} rows; oracle AUROC 1.0, inverted 0.0; 54-config grid in {secs:.1}s"
    ))
}

/// Records the token count of every next-token prompt.
struct Recorder {
    inner: MockScorer,
    counts: Mutex<Vec<usize>>,
}

impl Scorer for Recorder {
    fn next_token_distribution(&self, document: &str) -> Result<TokenDistribution, ScorerError> {
        self.counts.lock().unwrap().push(DefaultTokenizer.count(document));
        self.inner.next_token_distribution(document)
    }

    fn continuation_logprob(&self, document: &str, continuation: &str) -> Result<f64, ScorerError> {
        self.inner.continuation_logprob(document, continuation)
    }

    fn embed_last_token(&self, document: &str) -> Result<Embedding, ScorerError> {
        self.inner.embed_last_token(document)
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}

// AC9: a 413 for one oversized document halves its example counts once.
fn ac9() -> Outcome {
    let opts = RunOptions::default();
    // Customers idle between two seed times yield equal-sized prompts, so
    // search for a database and setting whose largest prompt is unique.
    let mut setting = None;
    'search: for db_seed in 0..10 {
        let (store, task) = SynthDb::generate(&SynthConfig {
            seed: db_seed,
            ..Default::default()
        })
        .load()
        .map_err(|e| e.to_string())?;
        let oracle = ground_truth_oracle(&store, &task.spec, &all_rows(&task));
        for (n_nest, d) in [(4, 1), (8, 1), (2, 1), (8, 0)] {
            let grid = GridSpec::single(DocParams::new(16, 16, n_nest, d));
            let recorder = Recorder {
                inner: MockScorer::oracle(oracle.clone(), false),
                counts: Mutex::new(Vec::new()),
            };
            run_grid(&task.spec, &task.split, &store, &grid, &recorder, &opts);
            let mut counts = recorder.counts.into_inner().unwrap();
            counts.sort_unstable();
            if counts[counts.len() - 1] > counts[counts.len() - 2] {
                setting = Some((store, task, oracle, grid, counts));
                break 'search;
            }
        }
    }
    let (store, task, oracle, grid, counts) = setting.ok_or("no setting with a unique largest document")?;
    let runner_up = counts[counts.len() - 2];
    let limit = runner_up;
    let server = ScorerServer::start(
        Arc::new(MockScorer::oracle(oracle, false).with_context_limit(limit)),
        "127.0.0.1:0",
    )
    .map_err(|e| e.to_string())?;
    let http = HttpScorer::new(&ScorerConfig {
        backend: Backend::Http,
        endpoint: Some(server.url()),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let report = run_grid(&task.spec, &task.split, &store, &grid, &http, &opts);
    let c = &report.configs[0];
    ensure(server.rejected() == 1, || format!("{} requests rejected", server.rejected()))?;
    ensure(c.shrinks.len() == 1, || format!("{} shrink events", c.shrinks.len()))?;
    let s = &c.shrinks[0];
    ensure(
        (s.from.n_inc, s.from.n_rel, s.to.n_inc, s.to.n_rel) == (16, 16, 8, 8),
        || format!("shrink {} -> {}", s.from, s.to),
    )?;
    ensure(c.failures.is_empty() && c.valid, || format!("{} failures", c.failures.len()))?;
    ensure(c.test_metric == Some(1.0), || format!("test metric {:?}", c.test_metric))?;
    Ok(format!(
        "limit {limit} tokens: row {} ({:?}) shrank (16,16)->(8,8), {} of {} prompts sent as built",
        s.row_id,
        s.split,
        counts.len() - 1,
        counts.len()
    ))
}

// AC10: token statistics per config and monotone growth in every knob.
fn ac10(dir: &Path) -> Outcome {
    let text = std::fs::read_to_string(dir.join("report.json")).map_err(|e| format!("needs the grid report: {e}"))?;
    let report: Json = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let configs = report["configs"].as_array().ok_or("no configs")?;
    let mut means = std::collections::HashMap::new();
    for c in configs {
        let p: DocParams = serde_json::from_value(c["params"].clone()).map_err(|e| e.to_string())?;
        let tokens = c["tokens"].as_str().ok_or("tokens missing")?;
        let (mean, std) = tokens.split_once(" ± ").ok_or_else(|| format!("{p}: tokens `{tokens}`"))?;
        let well_formed = [mean, std].iter().all(|s| {
            s.split_once('.').is_some_and(|(a, b)| a.parse::<u64>().is_ok() && b.len() == 1 && b.parse::<u8>().is_ok())
        });
        ensure(well_formed, || format!("{p}: tokens `{tokens}`"))?;
        let m = c["token_stats"]["mean"].as_f64().ok_or_else(|| format!("{p}: no token mean"))?;
        ensure(format!("{m:.1}") == mean, || format!("{p}: {tokens} vs mean {m}"))?;
        means.insert(p.key(), m);
    }
    let mut keys: Vec<_> = means.keys().copied().collect();
    keys.sort_unstable();
    let mut pairs = 0;
    for &(a, b, c, d) in &keys {
        let next = |knob: usize| {
            keys.iter()
                .filter(|k| {
                    let same = [k.0 == a, k.1 == b, k.2 == c, k.3 == d];
                    let bigger = [k.0 > a, k.1 > b, k.2 > c, k.3 > d];
                    bigger[knob] && (0..4).all(|i| i == knob || same[i])
                })
                .min()
                .copied()
        };
        for knob in 0..4 {
            if let Some(k) = next(knob) {
                pairs += 1;
                let (lo, hi) = (means[&(a, b, c, d)], means[&k]);
                ensure(hi >= lo, || format!("mean tokens fall from {lo} at {:?} to {hi} at {k:?}", (a, b, c, d)))?;
            }
        }
    }
    Ok(format!("{} configs report mean ± std; {pairs} neighbouring pairs non-decreasing", configs.len()))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("[PASS] {name} {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("[FAIL] {name} {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let results = [
        run("AC1", ac1),
        run("AC2", ac2),
        run("AC3", ac3),
        run("AC4", ac4),
        run("AC5", ac5),
        run("AC6", ac6),
        run("AC7", ac7),
        run("AC8", || ac8(dir.path())),
        run("AC9", ac9),
        run("AC10", || ac10(dir.path())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
