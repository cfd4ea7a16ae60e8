use std::sync::OnceLock;

use proptest::prelude::*;

use relforge::docforge::{shrink_on_oversize, DocContext, DocParams};
use relforge::evalharness::{auroc, token_stats_of};
use relforge::inference::lower_median;
use relforge::mlphead::{MlpHead, OutputMode};
use relforge::relstore::IndexedStore;
use relforge::scorer::Embedding;
use relforge::synth::{SynthConfig, SynthDb, SynthTask};
use relforge::taskdef::{sample_in_context, LoadedTask, TaskRow};

fn fixture() -> &'static (IndexedStore, LoadedTask, Vec<TaskRow>) {
    static CELL: OnceLock<(IndexedStore, LoadedTask, Vec<TaskRow>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (store, task) = SynthDb::generate(&SynthConfig {
            task: SynthTask::OrderCount,
            n_customers: 80,
            n_orders: 800,
            n_items: 1_600,
            ..Default::default()
        })
        .load()
        .unwrap();
        let s = &task.split;
        let rows = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        (store, task, rows)
    })
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-20i32..20, n).prop_map(|v| v.into_iter().map(f64::from).collect::<Vec<_>>()),
            prop::collection::vec(any::<bool>(), n - 2).prop_map(|v| {
                let mut l: Vec<f64> = v.into_iter().map(|b| f64::from(u8::from(b))).collect();
                l.extend([0.0, 1.0]);
                l
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_is_bounded_and_antisymmetric((scores, labels) in labelled()) {
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&negated, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn lower_median_minimizes_absolute_risk(weights in prop::collection::vec(0u8..5, 1..40)) {
        prop_assume!(weights.iter().any(|&w| w > 0));
        let total: f64 = weights.iter().map(|&w| f64::from(w)).sum();
        let probs: Vec<f64> = weights.iter().map(|&w| f64::from(w) / total).collect();
        let values: Vec<f64> = (0..probs.len()).map(|i| i as f64 * 0.5).collect();
        let risk = |c: f64| values.iter().zip(&probs).map(|(v, p)| p * (v - c).abs()).sum::<f64>();
        let best = values.iter().map(|&c| risk(c)).fold(f64::INFINITY, f64::min);
        prop_assert!(risk(lower_median(&values, &probs)) <= best + 1e-12);
    }

    #[test]
    fn shrinking_halves_examples_only(a in 0usize..64, b in 0usize..64, n in 0usize..9, d in 0usize..3) {
        let p = DocParams::new(a, b, n, d);
        let q = shrink_on_oversize(p);
        prop_assert_eq!((q.n_inc, q.n_rel, q.n_nest, q.d), (a / 2, b / 2, n, d));
    }

    #[test]
    fn token_stats_render_one_decimal(xs in prop::collection::vec(0usize..50_000, 1..30)) {
        let s = token_stats_of(&xs).unwrap().to_string();
        let (m, sd) = s.split_once(" ± ").unwrap();
        prop_assert!(m.split_once('.').unwrap().1.len() == 1 && sd.split_once('.').unwrap().1.len() == 1);
    }

    #[test]
    fn checkpoints_reproduce_outputs(dim in 1usize..20, hidden in 1usize..16, seed in any::<u64>(), linear in any::<bool>()) {
        let mode = if linear { OutputMode::Linear } else { OutputMode::Logit };
        let head = MlpHead::init(dim, hidden, mode, seed).unwrap();
        let back = MlpHead::from_json(&head.to_json()).unwrap();
        let x = Embedding::new((0..dim).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        prop_assert!((head.forward(&x).unwrap() - back.forward(&x).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn documents_are_leak_free_and_within_caps(
        pick in any::<prop::sample::Index>(),
        n_inc in 0usize..10,
        n_rel in 0usize..10,
        n_nest in 0usize..6,
        d in 0usize..3,
        seed in any::<u64>(),
    ) {
        let (store, task, rows) = fixture();
        let row = &rows[pick.index(rows.len())];
        let pool = sample_in_context(task.spec.task_type, &task.split.train, 16, i64::MAX, seed);
        let ctx = DocContext::new(&task.spec, store, &task.split.train);
        let doc = ctx.build_document(row, DocParams::new(n_inc, n_rel, n_nest, d), &pool).unwrap();
        prop_assert!(doc.parts.n_inc <= n_inc && doc.parts.n_rel <= n_rel);
        let cutoff = relforge::docforge::value_to_json(&relforge::relstore::Value::Timestamp(row.seed_time));
        let cutoff = cutoff.trim_matches('"').to_string();
        let blocks: Vec<serde_json::Value> = doc.blocks().map(|l| serde_json::from_str(l).unwrap()).collect();
        prop_assert_eq!(blocks.len(), doc.parts.n_inc + doc.parts.n_rel + 1);
        fn walk(v: &serde_json::Value, depth: usize, caps: (usize, usize), cutoff: &str) -> Result<(), TestCaseError> {
            if let serde_json::Value::Object(m) = v {
                for (k, x) in m {
                    if let (true, Some(t)) = (k.ends_with("_ts"), x.as_str()) {
                        prop_assert!(t < cutoff, "{} >= {}", t, cutoff);
                    }
                    if let serde_json::Value::Array(kids) = x {
                        prop_assert!(depth < caps.1 && kids.len() <= caps.0);
                        for kid in kids {
                            walk(kid, depth + 1, caps, cutoff)?;
                        }
                    }
                }
            }
            Ok(())
        }
        for b in &blocks {
            walk(b, 0, (n_nest, d), &cutoff)?;
        }
    }
}
