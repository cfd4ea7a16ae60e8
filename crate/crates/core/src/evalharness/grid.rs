use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{auroc, mae, sample_test, token_stats_of, TokenStats, TEST_CAP, VAL_CAP};
use crate::docforge::{shrink_on_oversize, DocContext, DocError, DocParams, Document};
use crate::inference::{build_grid, classification_score, median_predict, CandidateGrid};
use crate::mlphead::{self, HeadDataset, MlpHead, OutputMode, TrainConfig, TrainHistory};
use crate::relstore::IndexedStore;
use crate::scorer::{fan_out, Embedding, Scorer, ScorerError};
use crate::taskdef::{sample_in_context, Metric, SplitKind, TaskRow, TaskSpec, TaskSplit, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Positive-token probability (AUROC) or grid median (MAE).
    MetricAware,
    /// Last-token embeddings fed to a trained MLP head.
    MlpHead,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metric-aware" | "metric_aware" => Ok(Mode::MetricAware),
            "mlp-head" | "mlp_head" => Ok(Mode::MlpHead),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_inc_choices: Vec<usize>,
    pub n_rel_choices: Vec<usize>,
    pub n_nest_choices: Vec<usize>,
    pub d_choices: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_inc_choices: vec![0, 8, 16],
            n_rel_choices: vec![0, 8, 16],
            n_nest_choices: vec![0, 4, 8],
            d_choices: vec![0, 1],
        }
    }
}

impl GridSpec {
    pub fn single(p: DocParams) -> Self {
        Self {
            n_inc_choices: vec![p.n_inc],
            n_rel_choices: vec![p.n_rel],
            n_nest_choices: vec![p.n_nest],
            d_choices: vec![p.d],
        }
    }

    /// Every combination, in lexicographic `(n_inc, n_rel, n_nest, d)` order.
    pub fn points(&self) -> Vec<DocParams> {
        let sorted = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut out = Vec::new();
        for &a in &sorted(&self.n_inc_choices) {
            for &b in &sorted(&self.n_rel_choices) {
                for &c in &sorted(&self.n_nest_choices) {
                    for &d in &sorted(&self.d_choices) {
                        out.push(DocParams::new(a, b, c, d));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub test_cap: usize,
    pub val_cap: usize,
    /// Regression candidates per document.
    pub max_candidates: usize,
    /// Documents above this estimate are shrunk before reaching the scorer.
    pub max_doc_tokens: Option<usize>,
    /// Largest tolerated fraction of failed validation and test rows.
    pub failure_tolerance: f64,
    /// Training documents embedded per seed in MLP mode.
    pub n_train: usize,
    pub train: TrainConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::MetricAware,
            seeds: vec![0],
            test_cap: TEST_CAP,
            val_cap: VAL_CAP,
            max_candidates: 100,
            max_doc_tokens: None,
            failure_tolerance: 0.01,
            n_train: 10_000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkEvent {
    pub seed: u64,
    pub split: SplitKind,
    pub row_id: usize,
    pub from: DocParams,
    pub to: DocParams,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFailure {
    pub seed: u64,
    pub split: SplitKind,
    pub row_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub params: DocParams,
    pub valid: bool,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    /// Test-document tokens as `mean ± std`.
    pub tokens: String,
    pub token_stats: Option<TokenStats>,
    pub n_val: usize,
    pub n_test: usize,
    pub per_seed: Vec<SeedResult>,
    pub failures: Vec<RowFailure>,
    pub shrinks: Vec<ShrinkEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub metric: Metric,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub configs: Vec<ConfigResult>,
    pub selected: Option<DocParams>,
    pub selected_val_metric: Option<f64>,
    pub selected_test_metric: Option<f64>,
}

impl RunReport {
    pub fn config(&self, p: &DocParams) -> Option<&ConfigResult> {
        self.configs.iter().find(|c| c.params.key() == p.key())
    }
}

struct Processed<T> {
    value: Result<T, String>,
    tokens: Option<usize>,
    shrinks: Vec<(DocParams, DocParams, String)>,
}

/// Builds and scores one document, halving `n_inc` and `n_rel` on every
/// context-length failure until the document fits or cannot shrink further.
fn process_row<T>(
    ctx: &DocContext<'_>,
    row: &TaskRow,
    params: DocParams,
    inc: &[TaskRow],
    score: &(dyn Fn(&Document) -> Result<T, ScorerError> + Sync),
) -> Processed<T> {
    let mut p = params;
    let mut shrinks = Vec::new();
    let mut shrink = |p: &mut DocParams, reason: String| -> bool {
        let next = shrink_on_oversize(*p);
        if next == *p {
            return false;
        }
        log::info!("row {}: {reason}; shrinking {} -> {}", row.id, p, next);
        shrinks.push((*p, next, reason));
        *p = next;
        true
    };
    loop {
        let doc = match ctx.build_document(row, p, inc) {
            Ok(doc) => doc,
            Err(e @ DocError::Oversize { .. }) => {
                if shrink(&mut p, e.to_string()) {
                    continue;
                }
                return Processed {
                    value: Err(e.to_string()),
                    tokens: None,
                    shrinks,
                };
            }
            Err(e) => {
                return Processed {
                    value: Err(e.to_string()),
                    tokens: None,
                    shrinks,
                }
            }
        };
        match score(&doc) {
            Ok(v) => {
                return Processed {
                    value: Ok(v),
                    tokens: Some(doc.token_estimate),
                    shrinks,
                }
            }
            Err(e) if e.is_context_length() => {
                if shrink(&mut p, e.to_string()) {
                    continue;
                }
                return Processed {
                    value: Err(e.to_string()),
                    tokens: Some(doc.token_estimate),
                    shrinks,
                };
            }
            Err(e) => {
                return Processed {
                    value: Err(e.to_string()),
                    tokens: Some(doc.token_estimate),
                    shrinks,
                }
            }
        }
    }
}

struct SeedData {
    seed: u64,
    shared_inc: Vec<TaskRow>,
    val: Vec<TaskRow>,
    test: Vec<TaskRow>,
    train: Vec<TaskRow>,
}

/// Per-seed collector of row outcomes.
#[derive(Default)]
struct Tally {
    failures: Vec<RowFailure>,
    shrinks: Vec<ShrinkEvent>,
    test_tokens: Vec<usize>,
    hard: usize,
    rows: usize,
}

impl Tally {
    fn absorb<T>(&mut self, seed: u64, split: SplitKind, rows: &[TaskRow], out: Vec<Processed<T>>) -> Vec<Option<T>> {
        let mut values = Vec::with_capacity(out.len());
        for (row, p) in rows.iter().zip(out) {
            for (from, to, reason) in p.shrinks {
                self.shrinks.push(ShrinkEvent {
                    seed,
                    split,
                    row_id: row.id,
                    from,
                    to,
                    reason,
                });
            }
            if split == SplitKind::Test {
                if let (Some(t), true) = (p.tokens, p.value.is_ok()) {
                    self.test_tokens.push(t);
                }
            }
            if split != SplitKind::Train {
                self.rows += 1;
            }
            match p.value {
                Ok(v) => values.push(Some(v)),
                Err(error) => {
                    if split != SplitKind::Train {
                        self.hard += 1;
                    }
                    self.failures.push(RowFailure {
                        seed,
                        split,
                        row_id: row.id,
                        error,
                    });
                    values.push(None);
                }
            }
        }
        values
    }
}

struct HeadFit {
    val_preds: Vec<Option<f64>>,
    test_preds: Vec<Option<f64>>,
    trained: Option<(MlpHead, TrainHistory)>,
    error: Option<String>,
}

fn metric_of(metric: Metric, rows: &[TaskRow], preds: &[Option<f64>]) -> Option<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .zip(preds)
        .filter_map(|(r, p)| Some(((*p)?, r.target_f64()?)))
        .unzip();
    match metric {
        Metric::Auroc => auroc(&p, &t).ok(),
        Metric::Mae => mae(&p, &t).ok(),
    }
}

fn mean_of(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = xs.iter().copied().collect();
    let vals = vals?;
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn mix(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Runner<'a> {
    spec: &'a TaskSpec,
    ctx: DocContext<'a>,
    scorer: &'a dyn Scorer,
    opts: &'a RunOptions,
    candidates: Option<CandidateGrid>,
    seeds: Vec<SeedData>,
}

impl Runner<'_> {
    fn metric_aware_score(&self) -> impl Fn(&Document) -> Result<f64, ScorerError> + Sync + '_ {
        move |doc: &Document| {
            let prompt = doc.scoring_prompt();
            match &self.candidates {
                None => self
                    .scorer
                    .next_token_distribution(&prompt)
                    .map(|d| classification_score(&d)),
                Some(grid) => median_predict(&prompt, grid, self.scorer).map(|m| m.value),
            }
        }
    }

    fn embed(&self) -> impl Fn(&Document) -> Result<Embedding, ScorerError> + Sync + '_ {
        move |doc: &Document| self.scorer.embed_last_token(&doc.scoring_prompt())
    }

    fn run_rows<T: Send>(
        &self,
        rows: &[TaskRow],
        params: DocParams,
        inc: &[TaskRow],
        score: &(dyn Fn(&Document) -> Result<T, ScorerError> + Sync),
    ) -> Vec<Processed<T>> {
        fan_out(rows, self.scorer.max_in_flight(), |row| {
            process_row(&self.ctx, row, params, inc, score)
        })
    }

    fn run_seed(&self, sd: &SeedData, params: DocParams, tally: &mut Tally) -> SeedResult {
        let params = params.with_seed(sd.seed);
        let metric = self.spec.metric;
        let (val_preds, test_preds) = match self.opts.mode {
            Mode::MetricAware => {
                let score = self.metric_aware_score();
                let v = self.run_rows(&sd.val, params, &sd.shared_inc, &score);
                let t = self.run_rows(&sd.test, params, &sd.shared_inc, &score);
                (
                    tally.absorb(sd.seed, SplitKind::Validation, &sd.val, v),
                    tally.absorb(sd.seed, SplitKind::Test, &sd.test, t),
                )
            }
            Mode::MlpHead => {
                let fit = self.head_run(sd, params, tally);
                (fit.val_preds, fit.test_preds)
            }
        };
        SeedResult {
            seed: sd.seed,
            val_metric: metric_of(metric, &sd.val, &val_preds),
            test_metric: metric_of(metric, &sd.test, &test_preds),
        }
    }

    /// Embeds train, validation and test documents, trains a head and
    /// predicts validation and test rows.
    fn head_run(&self, sd: &SeedData, params: DocParams, tally: &mut Tally) -> HeadFit {
        let embed = self.embed();
        let train_out = fan_out(&sd.train, self.scorer.max_in_flight(), |row| {
            let inc = sample_in_context(
                self.spec.task_type,
                self.ctx.train,
                params.n_inc,
                row.seed_time,
                mix(sd.seed, row.id),
            );
            process_row(&self.ctx, row, params, &inc, &embed)
        });
        let train_emb = tally.absorb(sd.seed, SplitKind::Train, &sd.train, train_out);
        let v = self.run_rows(&sd.val, params, &sd.shared_inc, &embed);
        let t = self.run_rows(&sd.test, params, &sd.shared_inc, &embed);
        let val_emb = tally.absorb(sd.seed, SplitKind::Validation, &sd.val, v);
        let test_emb = tally.absorb(sd.seed, SplitKind::Test, &sd.test, t);
        match self.fit_head(sd.seed, &sd.train, train_emb, &sd.val, &val_emb) {
            Ok((head, history)) => {
                let predict = |e: &Option<Embedding>| e.as_ref().and_then(|e| head.predict(e).ok());
                HeadFit {
                    val_preds: val_emb.iter().map(predict).collect(),
                    test_preds: test_emb.iter().map(predict).collect(),
                    trained: Some((head, history)),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("{params}: head training failed: {e}");
                HeadFit {
                    val_preds: vec![None; sd.val.len()],
                    test_preds: vec![None; sd.test.len()],
                    trained: None,
                    error: Some(e),
                }
            }
        }
    }

    fn fit_head(
        &self,
        seed: u64,
        train_rows: &[TaskRow],
        train_emb: Vec<Option<Embedding>>,
        val_rows: &[TaskRow],
        val_emb: &[Option<Embedding>],
    ) -> Result<(MlpHead, TrainHistory), String> {
        let collect = |rows: &[TaskRow], emb: Vec<Option<Embedding>>| -> Result<HeadDataset, String> {
            let (x, y): (Vec<Embedding>, Vec<f64>) = rows
                .iter()
                .zip(emb)
                .filter_map(|(r, e)| Some((e?, r.target_f64()?)))
                .unzip();
            HeadDataset::new(x, y).map_err(|e| e.to_string())
        };
        let train = collect(train_rows, train_emb)?;
        let val = collect(val_rows, val_emb.to_vec())?;
        let dim = train.dim().ok_or("no training embeddings")?;
        let mode = match self.spec.task_type {
            TaskType::BinaryClassification => OutputMode::Logit,
            TaskType::Regression => OutputMode::Linear,
        };
        let cfg = TrainConfig {
            seed,
            ..self.opts.train.clone()
        };
        let head = MlpHead::init(dim, cfg.hidden, mode, seed).map_err(|e| e.to_string())?;
        let val = (!val.is_empty()).then_some(&val);
        mlphead::train(head, &train, val, &cfg).map_err(|e| e.to_string())
    }

    fn run_point(&self, params: DocParams) -> ConfigResult {
        let mut tally = Tally::default();
        let per_seed: Vec<SeedResult> = self.seeds.iter().map(|sd| self.run_seed(sd, params, &mut tally)).collect();
        let val_metric = mean_of(&per_seed.iter().map(|s| s.val_metric).collect::<Vec<_>>());
        let test_metric = mean_of(&per_seed.iter().map(|s| s.test_metric).collect::<Vec<_>>());
        let rate = if tally.rows == 0 {
            1.0
        } else {
            tally.hard as f64 / tally.rows as f64
        };
        let valid = rate <= self.opts.failure_tolerance && val_metric.is_some();
        if !valid {
            log::warn!("{params}: invalid (failure rate {rate:.4}, validation metric {val_metric:?})");
        }
        let token_stats = token_stats_of(&tally.test_tokens).ok();
        ConfigResult {
            params,
            valid,
            val_metric,
            test_metric,
            tokens: token_stats.map(|s| s.to_string()).unwrap_or_else(|| "n/a".into()),
            token_stats,
            n_val: self.seeds.iter().map(|s| s.val.len()).sum(),
            n_test: self.seeds.iter().map(|s| s.test.len()).sum(),
            per_seed,
            failures: tally.failures,
            shrinks: tally.shrinks,
        }
    }
}

impl<'a> Runner<'a> {
    fn new(
        spec: &'a TaskSpec,
        split: &'a TaskSplit,
        store: &'a IndexedStore,
        scorer: &'a dyn Scorer,
        opts: &'a RunOptions,
        max_inc: usize,
    ) -> Self {
        let mut ctx = DocContext::new(spec, store, &split.train);
        ctx.max_tokens = opts.max_doc_tokens;

        let candidates = match (opts.mode, spec.task_type) {
            (Mode::MetricAware, TaskType::Regression) => {
                let targets: Vec<f64> = split.train.iter().filter_map(TaskRow::target_f64).collect();
                match build_grid(&targets, opts.max_candidates) {
                    Ok(g) => Some(g),
                    Err(e) => {
                        log::error!("cannot build candidate grid: {e}");
                        None
                    }
                }
            }
            _ => None,
        };

        let seeds: Vec<SeedData> = opts
            .seeds
            .iter()
            .map(|&seed| {
                let val = sample_test(&split.validation, opts.val_cap, seed);
                let test = sample_test(&split.test, opts.test_cap, seed);
                let before = val.iter().chain(&test).map(|r| r.seed_time).min().unwrap_or(i64::MAX);
                let shared_inc = sample_in_context(spec.task_type, &split.train, max_inc, before, seed);
                let train = match opts.mode {
                    Mode::MlpHead => {
                        let n = opts.n_train.min(opts.train.max_train);
                        crate::taskdef::uniform_sample(&split.train, n, i64::MAX, seed)
                    }
                    Mode::MetricAware => Vec::new(),
                };
                SeedData {
                    seed,
                    shared_inc,
                    val,
                    test,
                    train,
                }
            })
            .collect();

        Runner {
            spec,
            ctx,
            scorer,
            opts,
            candidates,
            seeds,
        }
    }
}

/// Outcome of [`train_head`].
#[derive(Debug, Clone)]
pub struct HeadRun {
    pub head: MlpHead,
    pub history: TrainHistory,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    /// `(test row id, prediction)` for every sampled test row.
    pub test_predictions: Vec<(usize, Option<f64>)>,
    pub failures: Vec<RowFailure>,
    pub shrinks: Vec<ShrinkEvent>,
}

/// Trains one MLP head for `params` with the first seed of `opts` and
/// predicts the sampled test rows.
pub fn train_head(
    spec: &TaskSpec,
    split: &TaskSplit,
    store: &IndexedStore,
    params: DocParams,
    scorer: &dyn Scorer,
    opts: &RunOptions,
) -> Result<HeadRun, String> {
    let opts = RunOptions {
        mode: Mode::MlpHead,
        seeds: vec![opts.seeds.first().copied().unwrap_or(0)],
        ..opts.clone()
    };
    let runner = Runner::new(spec, split, store, scorer, &opts, params.n_inc);
    let sd = &runner.seeds[0];
    let mut tally = Tally::default();
    let fit = runner.head_run(sd, params.with_seed(sd.seed), &mut tally);
    let (head, history) = fit.trained.ok_or_else(|| fit.error.unwrap_or_default())?;
    Ok(HeadRun {
        val_metric: metric_of(spec.metric, &sd.val, &fit.val_preds),
        test_metric: metric_of(spec.metric, &sd.test, &fit.test_preds),
        test_predictions: sd.test.iter().map(|r| r.id).zip(fit.test_preds).collect(),
        head,
        history,
        failures: tally.failures,
        shrinks: tally.shrinks,
    })
}

/// Sweeps `grid`, scoring validation and test documents for each point,
/// and selects the point with the best validation metric.
///
/// Each seed draws its own test and validation subsamples and one shared
/// in-context set, used by every validation and test document of that seed.
pub fn run_grid(
    spec: &TaskSpec,
    split: &TaskSplit,
    store: &IndexedStore,
    grid: &GridSpec,
    scorer: &dyn Scorer,
    opts: &RunOptions,
) -> RunReport {
    let points = grid.points();
    let max_inc = points.iter().map(|p| p.n_inc).max().unwrap_or(0);
    let runner = Runner::new(spec, split, store, scorer, opts, max_inc);

    let mut configs = Vec::with_capacity(points.len());
    for p in points {
        let r = runner.run_point(p);
        log::info!(
            "{}: {p} val={:?} test={:?} tokens={}",
            spec.name,
            r.val_metric,
            r.test_metric,
            r.tokens
        );
        configs.push(r);
    }

    let higher = spec.metric.higher_is_better();
    let mut best: Option<&ConfigResult> = None;
    for c in configs.iter().filter(|c| c.valid) {
        let v = c.val_metric.expect("valid configs have a metric");
        let better = match best {
            None => true,
            Some(b) => {
                let bv = b.val_metric.expect("valid");
                if higher {
                    v > bv
                } else {
                    v < bv
                }
            }
        };
        if better {
            best = Some(c);
        }
    }

    RunReport {
        task: spec.name.clone(),
        metric: spec.metric,
        mode: opts.mode,
        seeds: opts.seeds.clone(),
        selected: best.map(|c| c.params),
        selected_val_metric: best.and_then(|c| c.val_metric),
        selected_test_metric: best.and_then(|c| c.test_metric),
        configs,
    }
}
