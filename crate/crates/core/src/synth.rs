//! Synthetic five-table retail database with task splits, for demos and
//! tests.
//!
//! ```text
//! regions  <- customers <- orders <- order_items -> products
//!                  ^--------------------------- referrer_id
//! ```
//!
//! `orders` and `order_items` are fact tables; their timestamp columns are
//! named `<table>_ts`. Timestamps fall on a six-hour grid so that rows can
//! coincide exactly with midnight seed times.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::relstore::{format_timestamp, load_schema, load_table, IndexedStore};
use crate::taskdef::{parse_split_csv, parse_task_manifest, LoadedTask, SplitKind, TaskError, TaskSplit};

const DAY: i64 = 86_400;
const SLOT: i64 = 6 * 3_600;

/// Which target the task table carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    /// 1 when the customer places no order within the horizon.
    Churn,
    /// Number of orders within the horizon (regression).
    OrderCount,
    /// 1 when the customer placed at least two orders before the seed time.
    RepeatBuyer,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::Churn => "customer-churn",
            SynthTask::OrderCount => "customer-orders",
            SynthTask::RepeatBuyer => "customer-repeat",
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "churn" | "customer-churn" => Ok(SynthTask::Churn),
            "order-count" | "customer-orders" => Ok(SynthTask::OrderCount),
            "repeat-buyer" | "customer-repeat" => Ok(SynthTask::RepeatBuyer),
            other => Err(format!("unknown synthetic task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub task: SynthTask,
    pub n_regions: usize,
    pub n_customers: usize,
    pub n_products: usize,
    pub n_orders: usize,
    pub n_items: usize,
    /// Epoch seconds of the first day.
    pub start: i64,
    pub days: i64,
    pub horizon_days: i64,
    pub n_seed_times: usize,
    pub rows_per_seed_time: usize,
    /// Chance that an item's referrer is null.
    pub null_referrer_rate: f64,
}

impl Default for SynthConfig {
    /// About 10k database rows.
    fn default() -> Self {
        Self {
            seed: 0,
            task: SynthTask::Churn,
            n_regions: 5,
            n_customers: 300,
            n_products: 50,
            n_orders: 3_000,
            n_items: 6_000,
            start: 1_672_531_200, // 2023-01-01
            days: 365,
            horizon_days: 30,
            n_seed_times: 20,
            rows_per_seed_time: 40,
            null_referrer_rate: 0.7,
        }
    }
}

/// Generated manifests and CSV contents.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDb {
    pub schema_json: String,
    /// `(table name, csv text)` in schema order.
    pub tables: Vec<(String, String)>,
    pub task_json: String,
    /// Train, validation and test CSVs.
    pub splits: [String; 3],
    pub task_name: String,
}

const SEGMENTS: [&str; 3] = ["consumer", "smb", "enterprise"];
const CATEGORIES: [&str; 4] = ["books", "garden", "toys", "tools"];
const CHANNELS: [&str; 3] = ["web", "app", "store"];

fn schema_json() -> String {
    r#"{"tables": [
  {"name": "regions", "file": "regions.csv", "columns": [
    {"name": "region_id", "dtype": "int", "primary_key": true},
    {"name": "region_name", "dtype": "text"}]},
  {"name": "customers", "file": "customers.csv", "columns": [
    {"name": "customer_id", "dtype": "int", "primary_key": true},
    {"name": "region_id", "dtype": "int", "foreign_key": {"table": "regions", "column": "region_id"}},
    {"name": "segment", "dtype": "text"},
    {"name": "age", "dtype": "int"}]},
  {"name": "products", "file": "products.csv", "columns": [
    {"name": "product_id", "dtype": "int", "primary_key": true},
    {"name": "category", "dtype": "text"},
    {"name": "price", "dtype": "float"}]},
  {"name": "orders", "file": "orders.csv", "timestamp_column": "orders_ts", "columns": [
    {"name": "order_id", "dtype": "int", "primary_key": true},
    {"name": "customer_id", "dtype": "int", "foreign_key": {"table": "customers", "column": "customer_id"}},
    {"name": "orders_ts", "dtype": "timestamp"},
    {"name": "channel", "dtype": "text"},
    {"name": "total", "dtype": "float"}]},
  {"name": "order_items", "file": "order_items.csv", "timestamp_column": "order_items_ts", "columns": [
    {"name": "item_id", "dtype": "int", "primary_key": true},
    {"name": "order_id", "dtype": "int", "foreign_key": {"table": "orders", "column": "order_id"}},
    {"name": "product_id", "dtype": "int", "foreign_key": {"table": "products", "column": "product_id"}},
    {"name": "referrer_id", "dtype": "int", "foreign_key": {"table": "customers", "column": "customer_id"}},
    {"name": "quantity", "dtype": "int"},
    {"name": "order_items_ts", "dtype": "timestamp"}]}
]}
"#
    .to_string()
}

fn task_json(task: SynthTask) -> String {
    let (kind, metric, desc) = match task {
        SynthTask::Churn => (
            "binary_classification",
            "auroc",
            "Predict whether the customer places no order in the next 30 days.",
        ),
        SynthTask::OrderCount => ("regression", "mae", "Predict how many orders the customer places in the next 30 days."),
        SynthTask::RepeatBuyer => (
            "binary_classification",
            "auroc",
            "Predict whether the customer has already ordered at least twice.",
        ),
    };
    let name = task.name();
    serde_json::to_string_pretty(&serde_json::json!({
        "name": name,
        "db_description": "Retail database of customers, orders and order items.",
        "task_description": desc,
        "task_type": kind,
        "metric": metric,
        "seed_time_column": "seed_time",
        "target_column": "target",
        "entity_fkeys": [{"column": "customer_id", "table": "customers", "pk_column": "customer_id"}],
        "splits": {
            "train": format!("{name}_train.csv"),
            "validation": format!("{name}_validation.csv"),
            "test": format!("{name}_test.csv"),
        }
    }))
    .expect("task manifest serializes")
}

impl SynthDb {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_regions = cfg.n_regions.max(1);
        let n_customers = cfg.n_customers.max(1);
        let n_products = cfg.n_products.max(1);
        let slots = (cfg.days * DAY / SLOT).max(1);

        let mut regions = String::from("region_id,region_name\n");
        for r in 0..n_regions {
            writeln!(regions, "{r},region-{r}").unwrap();
        }
        let mut customers = String::from("customer_id,region_id,segment,age\n");
        // Per-customer order propensity gives a spread of churn labels.
        let mut weight = Vec::with_capacity(n_customers);
        for c in 0..n_customers {
            let seg = SEGMENTS[rng.gen_range(0..SEGMENTS.len())];
            writeln!(customers, "{c},{},{seg},{}", rng.gen_range(0..n_regions), rng.gen_range(18..80)).unwrap();
            weight.push(rng.gen_range(0.05f64..1.0).powi(2));
        }
        let total_weight: f64 = weight.iter().sum();
        let mut products = String::from("product_id,category,price\n");
        let mut prices = Vec::with_capacity(n_products);
        for p in 0..n_products {
            let price = f64::from(rng.gen_range(100..10_000u32)) / 100.0;
            prices.push(price);
            writeln!(products, "{p},{},{price}", CATEGORIES[rng.gen_range(0..CATEGORIES.len())]).unwrap();
        }

        // Orders: customer drawn by weight, time on the six-hour grid.
        let mut order_rows: Vec<(usize, i64)> = (0..cfg.n_orders)
            .map(|_| {
                let mut x = rng.gen_range(0.0..total_weight);
                let mut c = 0;
                while c + 1 < n_customers && x >= weight[c] {
                    x -= weight[c];
                    c += 1;
                }
                (c, cfg.start + rng.gen_range(0..slots) * SLOT)
            })
            .collect();
        order_rows.sort_by_key(|&(c, t)| (t, c));
        let mut orders = String::from("order_id,customer_id,orders_ts,channel,total\n");
        for (i, (c, t)) in order_rows.iter().enumerate() {
            let total = f64::from(rng.gen_range(500..50_000u32)) / 100.0;
            writeln!(
                orders,
                "{i},{c},{},{},{total}",
                format_timestamp(*t),
                CHANNELS[rng.gen_range(0..CHANNELS.len())]
            )
            .unwrap();
        }
        let mut items = String::from("item_id,order_id,product_id,referrer_id,quantity,order_items_ts\n");
        if !order_rows.is_empty() {
            for i in 0..cfg.n_items {
                let o = rng.gen_range(0..order_rows.len());
                // Items may land a slot after their order.
                let t = order_rows[o].1 + rng.gen_range(0..2) * SLOT;
                let referrer = if rng.gen_bool(cfg.null_referrer_rate.clamp(0.0, 1.0)) {
                    String::new()
                } else {
                    rng.gen_range(0..n_customers).to_string()
                };
                writeln!(
                    items,
                    "{i},{o},{},{referrer},{},{}",
                    rng.gen_range(0..n_products),
                    rng.gen_range(1..5),
                    format_timestamp(t)
                )
                .unwrap();
            }
        }

        // Seed times at midnight, spread over the back two thirds of the range.
        let horizon = cfg.horizon_days * DAY;
        let first = cfg.start + (cfg.days / 3) * DAY;
        let last = (cfg.start + cfg.days * DAY - horizon).max(first);
        let n_times = cfg.n_seed_times.max(3);
        let step_days = ((last - first) / DAY / (n_times as i64 - 1).max(1)).max(1);
        let mut per_customer: Vec<Vec<i64>> = vec![Vec::new(); n_customers];
        for &(c, t) in &order_rows {
            per_customer[c].push(t);
        }
        let n_train = (n_times * 7).div_ceil(10).min(n_times - 2);
        let n_val = ((n_times - n_train) / 2).max(1);
        let header = "customer_id,seed_time,target\n";
        let mut splits = [header.to_string(), header.to_string(), header.to_string()];
        for k in 0..n_times {
            let seed_time = first + k as i64 * step_days * DAY;
            let split = if k < n_train {
                0
            } else if k < n_train + n_val {
                1
            } else {
                2
            };
            let mut picked: Vec<usize> = rand::seq::index::sample(
                &mut rng,
                n_customers,
                cfg.rows_per_seed_time.min(n_customers),
            )
            .into_vec();
            picked.sort_unstable();
            for c in picked {
                let ts = &per_customer[c];
                let before = ts.iter().filter(|&&t| t < seed_time).count();
                let within = ts.iter().filter(|&&t| t >= seed_time && t < seed_time + horizon).count();
                let target = match cfg.task {
                    SynthTask::Churn => u8::from(within == 0).to_string(),
                    SynthTask::OrderCount => within.to_string(),
                    SynthTask::RepeatBuyer => u8::from(before >= 2).to_string(),
                };
                writeln!(splits[split], "{c},{},{target}", format_timestamp(seed_time)).unwrap();
            }
        }

        SynthDb {
            schema_json: schema_json(),
            tables: vec![
                ("regions".into(), regions),
                ("customers".into(), customers),
                ("products".into(), products),
                ("orders".into(), orders),
                ("order_items".into(), items),
            ],
            task_json: task_json(cfg.task),
            splits,
            task_name: cfg.task.name().to_string(),
        }
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(|(_, csv)| csv.lines().count() - 1).sum()
    }

    /// Writes `schema.json`, the table CSVs, `<task>.json` and the split
    /// CSVs into `dir`. Returns the schema and task manifest paths.
    pub fn write(&self, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let schema = dir.join("schema.json");
        fs::write(&schema, &self.schema_json)?;
        for (name, csv) in &self.tables {
            fs::write(dir.join(format!("{name}.csv")), csv)?;
        }
        let task = dir.join(format!("{}.json", self.task_name));
        fs::write(&task, &self.task_json)?;
        for (kind, csv) in ["train", "validation", "test"].iter().zip(&self.splits) {
            fs::write(dir.join(format!("{}_{kind}.csv", self.task_name)), csv)?;
        }
        Ok((schema, task))
    }

    /// Builds the store and task in memory.
    pub fn load(&self) -> Result<(IndexedStore, LoadedTask), TaskError> {
        let schema = load_schema(&self.schema_json)?;
        let tables = self
            .tables
            .iter()
            .map(|(name, csv)| load_table(&schema, name, csv))
            .collect::<Result<Vec<_>, _>>()?;
        let store = IndexedStore::build(tables, schema.links)?;
        let (spec, _) = parse_task_manifest(&self.task_json, &store)?;
        let split = TaskSplit {
            train: parse_split_csv(&spec, &store, SplitKind::Train, &self.splits[0])?,
            validation: parse_split_csv(&spec, &store, SplitKind::Validation, &self.splits[1])?,
            test: parse_split_csv(&spec, &store, SplitKind::Test, &self.splits[2])?,
        };
        let warnings = split.check_monotone();
        Ok((store, LoadedTask { spec, split, warnings }))
    }
}
