use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relgraph::graph::{attach_features, build_graph, Propagation};
use relgraph::nn::checkpoint;
use relgraph::nn::gcn::{Activation, GcnParams};
use relgraph::nn::tensor::Tensor;
use relgraph::nn::{ModelConfig, ModelState};
use relgraph::parallel::Parallelism;
use relgraph::pretrain::{affected_nodes, materialize_graph_sample, GraphContext, TaskScores};
use relgraph::store::{column_statistics, load_database, Cell, RelationalDatabase};
use relgraph::synth::{generate_synthetic_corpus, SynthSpec};
use relgraph::tasks::{RunResult, VariantResult, VariantSpec};
use relgraph::tokenizer::{build_vocabulary, sample_mask_targets, MaskRates};

fn small_corpus(seed: u64, n: usize) -> Vec<RelationalDatabase> {
    generate_synthetic_corpus(&SynthSpec {
        n_databases: n,
        tables_per_db: (1, 3),
        rows: (1, 8),
        cols: (1, 3),
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        d_ff: 5,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_round_trip(seed in 0u64..10_000) {
        let dir = tempfile::tempdir().unwrap();
        for db in small_corpus(seed, 3) {
            let a = dir.path().join(format!("{}-a", db.name));
            db.save(&a, "__NULL__").unwrap();
            let loaded = load_database(&a).unwrap();
            prop_assert_eq!(&loaded, &db);
            let b = dir.path().join(format!("{}-b", db.name));
            loaded.save(&b, "__NULL__").unwrap();
            prop_assert_eq!(load_database(&b).unwrap(), loaded);
        }
    }

    #[test]
    fn synthetic_references_resolve(seed in 0u64..10_000) {
        for db in small_corpus(seed, 3) {
            for fk in &db.foreign_keys {
                let child = db.table(&fk.from_table).unwrap();
                let parent = db.table(&fk.to_table).unwrap();
                let cc = child.def.column_index(&fk.from_column).unwrap();
                let pc = parent.def.column_index(&fk.to_column).unwrap();
                for row in &child.rows {
                    if let Cell::Value(v) = &row[cc] {
                        prop_assert!(parent.rows.iter().any(|p| p[pc] == Cell::Value(v.clone())));
                    }
                }
            }
        }
    }

    #[test]
    fn column_statistics_match_scan(seed in 0u64..10_000) {
        for db in small_corpus(seed, 2) {
            for t in &db.tables {
                for (c, def) in t.def.columns.iter().enumerate() {
                    let s = column_statistics(&db, &t.def.name, &def.name).unwrap();
                    let values: Vec<&str> = t.rows.iter().filter_map(|r| r[c].value()).collect();
                    prop_assert_eq!(s.null_count, t.rows.len() - values.len());
                    prop_assert_eq!(s.distinct_count, values.iter().collect::<HashSet<_>>().len());
                    let nums: Vec<f64> = if def.dtype.is_numeric() {
                        values.iter().filter_map(|v| v.parse::<f64>().ok()).collect()
                    } else {
                        Vec::new()
                    };
                    prop_assert_eq!(s.min, nums.iter().copied().reduce(f64::min));
                    prop_assert_eq!(s.max, nums.iter().copied().reduce(f64::max));
                }
            }
        }
    }

    #[test]
    fn table_reordering_relabels_topology(seed in 0u64..10_000, rot in 1usize..3) {
        let db = &small_corpus(seed, 1)[0];
        let g = build_graph(db).unwrap();
        let n_t = db.tables.len();
        let mut moved = db.clone();
        moved.tables.rotate_left(rot % n_t);
        for t in &mut moved.tables {
            t.def.name = format!("renamed_{}", t.def.name);
        }
        for fk in &mut moved.foreign_keys {
            fk.from_table = format!("renamed_{}", fk.from_table);
            fk.to_table = format!("renamed_{}", fk.to_table);
        }
        let h = build_graph(&moved).unwrap();
        let original_table = |t: usize| (t + rot % n_t) % n_t;
        let key = |g: &relgraph::graph::SchemaGraph, i: usize, relabel: bool| {
            let n = g.nodes[i];
            (n.kind, if relabel { original_table(n.table) } else { n.table }, n.index)
        };
        let multiset = |g: &relgraph::graph::SchemaGraph, relabel: bool| {
            let mut m = BTreeMap::new();
            for e in &g.edges {
                *m.entry((key(g, e.src, relabel), key(g, e.dst, relabel), e.etype)).or_insert(0) += 1;
            }
            m
        };
        prop_assert_eq!(multiset(&g, false), multiset(&h, true));
    }

    #[test]
    fn node_features_are_finite(seed in 0u64..10_000, stats in any::<bool>()) {
        let corpus = small_corpus(seed, 2);
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let cfg = ModelConfig { stats_enabled: stats, ..tiny_model() };
        let state = ModelState::init(cfg, vocab.len(), seed).unwrap();
        for db in &corpus {
            let g = build_graph(db).unwrap();
            let f = attach_features(&g, db, &vocab, &state.params.encoder, stats, Parallelism::Sequential).unwrap();
            prop_assert!(f.is_finite());
            prop_assert_eq!(f.stats.is_some(), stats);
        }
    }

    #[test]
    fn gcn_is_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..20);
        let d = rng.gen_range(1..6);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(0.3) {
                    edges.push((a, b));
                }
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let h = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let gcn = GcnParams::init(d, 2, false, true, Activation::Relu, 0.7, &mut rng);
        let (out, _) = gcn.forward(&Propagation::from_edges(n, &edges), &h, None).unwrap();

        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut ph = h.zeros_like();
        for i in 0..n {
            ph.row_mut(perm[i]).copy_from_slice(h.row(i));
        }
        let (pout, _) = gcn.forward(&Propagation::from_edges(n, &pedges), &ph, None).unwrap();
        for i in 0..n {
            for (a, b) in out.row(i).iter().zip(pout.row(perm[i])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable(seed in 0u64..10_000, stats in any::<bool>(), layers in 0usize..3) {
        let cfg = ModelConfig { stats_enabled: stats, n_enc_layers: layers, ..tiny_model() };
        let state = ModelState::init(cfg, 20, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        checkpoint::save(&state, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        checkpoint::save(&checkpoint::load(&p).unwrap(), &p).unwrap();
        prop_assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn masks_touch_exactly_the_affected_nodes(seed in 0u64..10_000) {
        let corpus = small_corpus(seed, 1);
        let db = &corpus[0];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let state = ModelState::init(tiny_model(), vocab.len(), seed).unwrap();
        let ctx = GraphContext::new(db, &state, &vocab, Parallelism::Sequential).unwrap();
        let rates = MaskRates { cell_rate: 0.3, col_rate: 0.5, tab_rate: 1.0 };
        for spec in sample_mask_targets(db, rates, seed) {
            let s = materialize_graph_sample(&ctx, &spec, &vocab, &state).unwrap();
            let changed: Vec<usize> = (0..ctx.graph.num_nodes())
                .filter(|&i| s.features.values.row(i) != ctx.base.values.row(i))
                .collect();
            let mut want = affected_nodes(&ctx.graph, db, &spec);
            want.sort_unstable();
            prop_assert_eq!(changed, want);
        }
    }

    #[test]
    fn report_means_follow_runs(values in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..6)) {
        let runs: Vec<RunResult> = values
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| RunResult {
                run: i,
                model_seed: i as u64,
                accuracy: TaskScores { missing_values: a, column_names: b, table_names: c },
            })
            .collect();
        let r = VariantResult::from_runs(VariantSpec::ours(), runs.clone());
        let n = runs.len() as f64;
        let mean = |f: fn(&TaskScores) -> f64| runs.iter().map(|r| f(&r.accuracy)).sum::<f64>() / n;
        prop_assert!((r.mean.missing_values - mean(|s| s.missing_values)).abs() < 1e-12);
        prop_assert!((r.mean.column_names - mean(|s| s.column_names)).abs() < 1e-12);
        prop_assert!((r.mean.table_names - mean(|s| s.table_names)).abs() < 1e-12);
    }
}
