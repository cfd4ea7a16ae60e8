//! Prediction tasks: task-table splits with seed times and targets, and the
//! samplers used to draw in-context examples.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::relstore::{parse_timestamp, DType, IndexedStore, Link, StoreError, Value};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("task manifest: {0}")]
    Parse(String),
    #[error("task reference: {0}")]
    Reference(String),
    #[error("{split} row {row}: {message}")]
    Row {
        split: &'static str,
        row: usize,
        message: String,
    },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Mae,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Auroc)
    }
}

/// One foreign-key column of the task table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityFkey {
    pub column: String,
    pub link: Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub db_description: String,
    pub task_description: String,
    pub task_type: TaskType,
    pub metric: Metric,
    pub entity_fkeys: Vec<EntityFkey>,
    pub seed_time_column: String,
    pub target_column: String,
}

/// One row of a task table.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    /// Ordinal within its split.
    pub id: usize,
    /// Values aligned with [`TaskSpec::entity_fkeys`].
    pub fkey_values: Vec<Value>,
    pub seed_time: i64,
    pub target: Option<Value>,
}

impl TaskRow {
    pub fn target_f64(&self) -> Option<f64> {
        self.target.as_ref().and_then(Value::as_f64)
    }

    fn is_positive(&self) -> bool {
        self.target_f64() == Some(1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<TaskRow>,
    pub validation: Vec<TaskRow>,
    pub test: Vec<TaskRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl TaskSplit {
    pub fn get(&self, kind: SplitKind) -> &[TaskRow] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    /// Checks `max(train) <= min(validation) <= min(test)` on seed times and
    /// describes each violation. Empty splits are reported too.
    pub fn check_monotone(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for (kind, rows) in [
            (SplitKind::Train, &self.train),
            (SplitKind::Validation, &self.validation),
            (SplitKind::Test, &self.test),
        ] {
            if rows.is_empty() {
                warnings.push(format!("{} split is empty", kind.as_str()));
            }
        }
        let max_train = self.train.iter().map(|r| r.seed_time).max();
        let min_val = self.validation.iter().map(|r| r.seed_time).min();
        let min_test = self.test.iter().map(|r| r.seed_time).min();
        if let (Some(a), Some(b)) = (max_train, min_val) {
            if a > b {
                warnings.push(format!("latest train seed time {a} is after earliest validation seed time {b}"));
            }
        }
        if let (Some(b), Some(c)) = (min_val, min_test) {
            if b > c {
                warnings.push(format!("earliest validation seed time {b} is after earliest test seed time {c}"));
            }
        }
        warnings
    }
}

/// A loaded task together with non-fatal findings.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub spec: TaskSpec,
    pub split: TaskSplit,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct FkeyEntry {
    column: String,
    table: String,
    pk_column: String,
}

#[derive(Deserialize)]
struct SplitPaths {
    train: String,
    validation: String,
    test: String,
}

#[derive(Deserialize)]
struct TaskManifest {
    name: String,
    #[serde(default)]
    db_description: String,
    #[serde(default)]
    task_description: String,
    task_type: TaskType,
    metric: Metric,
    seed_time_column: String,
    target_column: String,
    entity_fkeys: Vec<FkeyEntry>,
    splits: SplitPaths,
}

/// Parses a task manifest and validates it against the store. Returns the
/// spec and the three split paths (unresolved).
pub fn parse_task_manifest(
    manifest_text: &str,
    store: &IndexedStore,
) -> Result<(TaskSpec, [String; 3]), TaskError> {
    let m: TaskManifest =
        serde_json::from_str(manifest_text).map_err(|e| TaskError::Parse(e.to_string()))?;
    let consistent = matches!(
        (m.task_type, m.metric),
        (TaskType::BinaryClassification, Metric::Auroc) | (TaskType::Regression, Metric::Mae)
    );
    if !consistent {
        return Err(TaskError::Parse(format!(
            "task type {:?} is incompatible with metric {:?}",
            m.task_type, m.metric
        )));
    }
    if m.entity_fkeys.is_empty() {
        return Err(TaskError::Parse("entity_fkeys must not be empty".into()));
    }
    let mut entity_fkeys = Vec::with_capacity(m.entity_fkeys.len());
    for fk in m.entity_fkeys {
        let table = store
            .table(&fk.table)
            .ok_or_else(|| TaskError::Reference(format!("unknown table `{}`", fk.table)))?;
        let pk = table.spec.primary_key().map(|i| table.spec.columns[i].name.as_str());
        if pk != Some(fk.pk_column.as_str()) {
            return Err(TaskError::Reference(format!(
                "`{}` is not the primary key of `{}`",
                fk.pk_column, fk.table
            )));
        }
        entity_fkeys.push(EntityFkey {
            link: Link {
                fkey_table: m.name.clone(),
                fkey_column: fk.column.clone(),
                pkey_table: fk.table,
                pkey_column: fk.pk_column,
            },
            column: fk.column,
        });
    }
    let spec = TaskSpec {
        name: m.name,
        db_description: m.db_description,
        task_description: m.task_description,
        task_type: m.task_type,
        metric: m.metric,
        entity_fkeys,
        seed_time_column: m.seed_time_column,
        target_column: m.target_column,
    };
    Ok((spec, [m.splits.train, m.splits.validation, m.splits.test]))
}

/// Loads a task manifest and its split CSVs (paths relative to `base_dir`).
pub fn load_task(manifest_text: &str, base_dir: &Path, store: &IndexedStore) -> Result<LoadedTask, TaskError> {
    let (spec, paths) = parse_task_manifest(manifest_text, store)?;
    let read = |p: &str| {
        let path = base_dir.join(p);
        fs::read_to_string(&path).map_err(|e| TaskError::Io(format!("{}: {e}", path.display())))
    };
    let split = TaskSplit {
        train: parse_split_csv(&spec, store, SplitKind::Train, &read(&paths[0])?)?,
        validation: parse_split_csv(&spec, store, SplitKind::Validation, &read(&paths[1])?)?,
        test: parse_split_csv(&spec, store, SplitKind::Test, &read(&paths[2])?)?,
    };
    let warnings = split.check_monotone();
    for w in &warnings {
        log::warn!("task {}: {w}", spec.name);
    }
    Ok(LoadedTask { spec, split, warnings })
}

/// Convenience wrapper reading the manifest from disk.
pub fn open_task(manifest_path: &Path, store: &IndexedStore) -> Result<LoadedTask, TaskError> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| TaskError::Io(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_task(&text, base, store)
}

fn parse_target(task_type: TaskType, cell: &str) -> Result<Value, String> {
    let cell = cell.trim();
    match task_type {
        TaskType::BinaryClassification => {
            let x = match cell.to_ascii_lowercase().as_str() {
                "true" => 1.0,
                "false" => 0.0,
                _ => cell
                    .parse::<f64>()
                    .map_err(|_| format!("`{cell}` is not a binary target"))?,
            };
            if x == 0.0 || x == 1.0 {
                Ok(Value::Int(x as i64))
            } else {
                Err(format!("classification target must be 0 or 1, found `{cell}`"))
            }
        }
        TaskType::Regression => {
            if let Ok(i) = cell.parse::<i64>() {
                return Ok(Value::Int(i));
            }
            match cell.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(Value::Float(x)),
                _ => Err(format!("`{cell}` is not a real target")),
            }
        }
    }
}

/// Parses one split CSV. Extra columns are ignored; the target column may be
/// missing or empty only in the test split.
pub fn parse_split_csv(
    spec: &TaskSpec,
    store: &IndexedStore,
    kind: SplitKind,
    csv_text: &str,
) -> Result<Vec<TaskRow>, TaskError> {
    let split = kind.as_str();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| TaskError::Parse(format!("{split}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let mut fk_cols = Vec::new();
    for fk in &spec.entity_fkeys {
        let idx = find(&fk.column)
            .ok_or_else(|| TaskError::Parse(format!("{split}: missing column `{}`", fk.column)))?;
        let table = store
            .table(&fk.link.pkey_table)
            .ok_or_else(|| TaskError::Reference(fk.link.pkey_table.clone()))?;
        let dtype = table
            .spec
            .primary_key()
            .map(|i| table.spec.columns[i].dtype)
            .unwrap_or(DType::Text);
        fk_cols.push((idx, dtype));
    }
    let seed_idx = find(&spec.seed_time_column).ok_or_else(|| {
        TaskError::Parse(format!("{split}: missing column `{}`", spec.seed_time_column))
    })?;
    let target_idx = find(&spec.target_column);
    if target_idx.is_none() && kind != SplitKind::Test {
        return Err(TaskError::Parse(format!(
            "{split}: missing target column `{}`",
            spec.target_column
        )));
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let err = |message: String| TaskError::Row {
            split,
            row: i + 1,
            message,
        };
        let record = record.map_err(|e| err(e.to_string()))?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let mut fkey_values = Vec::with_capacity(fk_cols.len());
        for &(idx, dtype) in &fk_cols {
            fkey_values.push(Value::parse_cell(field(idx), dtype).map_err(err)?);
        }
        let seed_time = parse_timestamp(field(seed_idx)).map_err(err)?;
        let target = match target_idx.map(field) {
            Some(cell) if !cell.is_empty() => Some(parse_target(spec.task_type, cell).map_err(err)?),
            _ if kind == SplitKind::Test => None,
            _ => return Err(err(format!("missing target `{}`", spec.target_column))),
        };
        rows.push(TaskRow {
            id: i,
            fkey_values,
            seed_time,
            target,
        });
    }
    Ok(rows)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Class-balanced sample of train rows strictly older than `before`.
///
/// Positives get `ceil(n/2)` slots and negatives `floor(n/2)`; a class that
/// runs short hands its slots to the other. The result alternates
/// positive/negative while both last. Within a class the order is a seeded
/// shuffle, so a smaller `n` with the same seed yields a prefix-compatible
/// subset.
pub fn stratified_sample(train: &[TaskRow], n: usize, before: i64, seed: u64) -> Vec<TaskRow> {
    let mut rng = rng_for(seed);
    let (mut pos, mut neg): (Vec<&TaskRow>, Vec<&TaskRow>) = train
        .iter()
        .filter(|r| r.seed_time < before && r.target.is_some())
        .partition(|r| r.is_positive());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let want_pos = n.div_ceil(2);
    let want_neg = n / 2;
    let mut take_pos = want_pos.min(pos.len());
    let mut take_neg = want_neg.min(neg.len());
    take_pos += (want_neg - take_neg).min(pos.len() - take_pos);
    take_neg += (n - take_pos - take_neg).min(neg.len() - take_neg);

    let mut out = Vec::with_capacity(take_pos + take_neg);
    let (mut p, mut q) = (pos[..take_pos].iter(), neg[..take_neg].iter());
    loop {
        let a = p.next();
        let b = q.next();
        if a.is_none() && b.is_none() {
            break;
        }
        out.extend(a.map(|r| (*r).clone()));
        out.extend(b.map(|r| (*r).clone()));
    }
    out
}

/// Uniform sample without replacement of rows strictly older than `before`.
pub fn uniform_sample(rows: &[TaskRow], n: usize, before: i64, seed: u64) -> Vec<TaskRow> {
    let mut rng = rng_for(seed);
    let mut eligible: Vec<&TaskRow> = rows.iter().filter(|r| r.seed_time < before).collect();
    eligible.shuffle(&mut rng);
    eligible.into_iter().take(n).cloned().collect()
}

/// Picks the in-context sampler for the task type.
pub fn sample_in_context(
    task_type: TaskType,
    train: &[TaskRow],
    n: usize,
    before: i64,
    seed: u64,
) -> Vec<TaskRow> {
    match task_type {
        TaskType::BinaryClassification => stratified_sample(train, n, before, seed),
        TaskType::Regression => uniform_sample(train, n, before, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: usize, t: i64, y: i64) -> TaskRow {
        TaskRow {
            id,
            fkey_values: vec![Value::Int(id as i64)],
            seed_time: t,
            target: Some(Value::Int(y)),
        }
    }

    fn pool(n_pos: usize, n_neg: usize) -> Vec<TaskRow> {
        (0..n_pos)
            .map(|i| row(i, i as i64, 1))
            .chain((0..n_neg).map(|i| row(n_pos + i, i as i64, 0)))
            .collect()
    }

    fn counts(rows: &[TaskRow]) -> (usize, usize) {
        let p = rows.iter().filter(|r| r.is_positive()).count();
        (p, rows.len() - p)
    }

    #[test]
    fn stratified_even_split() {
        assert_eq!(counts(&stratified_sample(&pool(50, 50), 8, 1000, 1)), (4, 4));
    }

    #[test]
    fn stratified_odd_split_favours_positives() {
        assert_eq!(counts(&stratified_sample(&pool(50, 50), 5, 1000, 1)), (3, 2));
    }

    #[test]
    fn stratified_single_class_fallback() {
        assert_eq!(counts(&stratified_sample(&pool(0, 50), 8, 1000, 1)), (0, 8));
        assert_eq!(counts(&stratified_sample(&pool(2, 50), 8, 1000, 1)), (2, 6));
    }

    #[test]
    fn stratified_interleaves_classes() {
        let s = stratified_sample(&pool(50, 50), 6, 1000, 3);
        let labels: Vec<bool> = s.iter().map(|r| r.is_positive()).collect();
        assert_eq!(labels, vec![true, false, true, false, true, false]);
    }

    #[test]
    fn stratified_smaller_n_is_prefix() {
        let p = pool(40, 40);
        let big = stratified_sample(&p, 16, 1000, 9);
        let small = stratified_sample(&p, 8, 1000, 9);
        assert_eq!(&big[..8], &small[..]);
    }

    #[test]
    fn uniform_edge_cases() {
        let p = pool(10, 10);
        assert!(uniform_sample(&p, 0, 1000, 1).is_empty());
        assert_eq!(uniform_sample(&p, 50, 1000, 1).len(), 20);
        assert_eq!(uniform_sample(&p, 7, 1000, 1), uniform_sample(&p, 7, 1000, 1));
    }

    #[test]
    fn distinct_seeds_give_distinct_samples() {
        let p = pool(500, 500);
        assert_ne!(uniform_sample(&p, 20, 10_000, 1), uniform_sample(&p, 20, 10_000, 2));
        assert_ne!(stratified_sample(&p, 20, 10_000, 1), stratified_sample(&p, 20, 10_000, 2));
    }

    #[test]
    fn split_monotonicity_warns() {
        let split = TaskSplit {
            train: vec![row(0, 10, 0)],
            validation: vec![row(0, 5, 1)],
            test: vec![],
        };
        let w = split.check_monotone();
        assert_eq!(w.len(), 2, "{w:?}");
    }

    proptest! {
        #[test]
        fn samples_respect_before(
            times in prop::collection::vec((0i64..100, 0i64..2), 0..80),
            n in 0usize..30,
            before in 0i64..110,
            seed in any::<u64>(),
        ) {
            let rows: Vec<TaskRow> = times.iter().enumerate().map(|(i, &(t, y))| row(i, t, y)).collect();
            let eligible: Vec<&TaskRow> = rows.iter().filter(|r| r.seed_time < before).collect();
            let (ep, en) = counts(&eligible.iter().map(|r| (*r).clone()).collect::<Vec<_>>());

            let s = stratified_sample(&rows, n, before, seed);
            prop_assert!(s.iter().all(|r| r.seed_time < before));
            prop_assert_eq!(s.len(), n.min(ep + en));
            let (sp, sn) = counts(&s);
            if ep >= n.div_ceil(2) && en >= n / 2 {
                prop_assert_eq!((sp, sn), (n.div_ceil(2), n / 2));
            }
            if ep > 0 && en > 0 && n >= 2 {
                prop_assert!(sp > 0 && sn > 0);
            }

            let u = uniform_sample(&rows, n, before, seed);
            prop_assert!(u.iter().all(|r| r.seed_time < before));
            prop_assert_eq!(u.len(), n.min(eligible.len()));
            let mut ids: Vec<usize> = u.iter().map(|r| r.id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), u.len());
        }
    }
}
