//! Two-phase masked-reconstruction training.
//!
//! Phase 1 trains encoder and decoder on single masked rows. Phase 2 freezes
//! the encoder, caches every node's unmasked embedding once per database,
//! and trains the GCN (and by default the decoder) on graph samples in which
//! only the nodes touched by the mask are re-encoded.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    attach_features, build_graph, node_sequence, sample_subgraph, Fanout, NodeFeatures, NodeKind, Propagation,
    SchemaGraph,
};
use crate::nn::decoder::padded_target;
use crate::nn::tensor::Tensor;
use crate::nn::{AdamConfig, Gradients, ModelConfig, ModelState};
use crate::parallel::{map_ordered, map_range, Parallelism};
use crate::store::RelationalDatabase;
use crate::tokenizer::{
    sample_mask_targets, serialize_for_row_model, MaskKind, MaskRates, MaskSpec, MaskTarget, TokenId, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

/// What a split assigns: whole databases, or individual tables (cross-split
/// foreign keys are dropped).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Database,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mask_rates: MaskRates,
    /// Targets used for validation and test accuracy.
    pub eval_rates: MaskRates,
    /// Per-hop neighbour caps (`null` = all); absent means the full graph.
    pub fanout: Option<Vec<Fanout>>,
    pub model_seed: u64,
    pub mask_seed: u64,
    pub sample_seed: u64,
    pub split_seed: u64,
    pub split: SplitRatios,
    pub split_unit: SplitUnit,
    pub n_runs: usize,
    pub min_freq: usize,
    pub freeze_decoder: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            phase1_epochs: 20,
            phase2_epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            mask_rates: MaskRates::default(),
            eval_rates: MaskRates::ALL,
            fanout: None,
            model_seed: 1,
            mask_seed: 2,
            sample_seed: 3,
            split_seed: 4,
            split: SplitRatios::default(),
            split_unit: SplitUnit::Database,
            n_runs: 3,
            min_freq: 1,
            freeze_decoder: false,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask_rates.validate()?;
        self.eval_rates.validate()?;
        let r = self.split;
        if [r.train, r.val, r.test].iter().any(|x| !(0.0..=1.0).contains(x))
            || (r.train + r.val + r.test - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}/{}/{}",
                r.train, r.val, r.test
            )));
        }
        if self.batch_size == 0 || self.n_runs == 0 || self.min_freq == 0 {
            return Err(Error::Config("batch_size, n_runs and min_freq must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(f) = &self.fanout {
            if f.is_empty() {
                return Err(Error::Config("fanout must list at least one hop".into()));
            }
        }
        Ok(())
    }

    /// Configuration for run `r`: only the model seed moves.
    pub fn for_run(&self, run: usize) -> TrainConfig {
        TrainConfig {
            model_seed: self.model_seed.wrapping_add(run as u64),
            ..self.clone()
        }
    }
}

/// SplitMix64 over a base seed and a list of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts.iter().chain(std::iter::once(&0x5EED)) {
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub database: String,
    pub table: String,
    pub split: SplitName,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<RelationalDatabase>,
    pub val: Vec<RelationalDatabase>,
    pub test: Vec<RelationalDatabase>,
    /// Every table with its split, in corpus order.
    pub assignment: Vec<SplitAssignment>,
}

impl CorpusSplit {
    pub fn part(&self, which: SplitName) -> &[RelationalDatabase] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `(database, table)` pairs in one split.
    pub fn tables(&self, which: SplitName) -> BTreeSet<(String, String)> {
        self.part(which)
            .iter()
            .flat_map(|db| db.tables.iter().map(|t| (db.name.clone(), t.def.name.clone())))
            .collect()
    }
}

fn split_counts(n: usize, r: SplitRatios) -> (usize, usize) {
    let train = ((n as f64 * r.train).round() as usize).min(n);
    let val = ((n as f64 * r.val).round() as usize).min(n - train);
    (train, val)
}

/// Seeded shuffle of the split units, then the first `round(n·train)` go to
/// train, the next `round(n·val)` to validation and the rest to test.
pub fn split_corpus(
    corpus: &[RelationalDatabase],
    ratios: SplitRatios,
    unit: SplitUnit,
    seed: u64,
) -> Result<CorpusSplit> {
    let probe = TrainConfig {
        split: ratios,
        ..TrainConfig::default()
    };
    probe.validate()?;
    let units: Vec<(usize, Option<usize>)> = match unit {
        SplitUnit::Database => (0..corpus.len()).map(|d| (d, None)).collect(),
        SplitUnit::Table => corpus
            .iter()
            .enumerate()
            .flat_map(|(d, db)| (0..db.tables.len()).map(move |t| (d, Some(t))))
            .collect(),
    };
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val) = split_counts(units.len(), ratios);
    let mut which = vec![SplitName::Test; units.len()];
    for (pos, &u) in order.iter().enumerate() {
        which[u] = if pos < n_train {
            SplitName::Train
        } else if pos < n_train + n_val {
            SplitName::Val
        } else {
            SplitName::Test
        };
    }

    // Per database and table, the split it landed in.
    let mut table_split: Vec<Vec<SplitName>> = corpus.iter().map(|db| vec![SplitName::Test; db.tables.len()]).collect();
    for (&(d, t), &s) in units.iter().zip(&which) {
        match t {
            Some(t) => table_split[d][t] = s,
            None => table_split[d].iter_mut().for_each(|x| *x = s),
        }
    }

    let mut out = CorpusSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        assignment: Vec::new(),
    };
    for (d, db) in corpus.iter().enumerate() {
        for (t, table) in db.tables.iter().enumerate() {
            out.assignment.push(SplitAssignment {
                database: db.name.clone(),
                table: table.def.name.clone(),
                split: table_split[d][t],
            });
        }
        for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let keep: Vec<usize> = (0..db.tables.len()).filter(|&t| table_split[d][t] == s).collect();
            if keep.is_empty() {
                continue;
            }
            let sub = if keep.len() == db.tables.len() {
                db.clone()
            } else {
                let names: BTreeSet<&str> = keep.iter().map(|&t| db.tables[t].def.name.as_str()).collect();
                RelationalDatabase {
                    name: db.name.clone(),
                    tables: keep.iter().map(|&t| db.tables[t].clone()).collect(),
                    foreign_keys: db
                        .foreign_keys
                        .iter()
                        .filter(|fk| names.contains(fk.from_table.as_str()) && names.contains(fk.to_table.as_str()))
                        .cloned()
                        .collect(),
                }
            };
            match s {
                SplitName::Train => out.train.push(sub),
                SplitName::Val => out.val.push(sub),
                SplitName::Test => out.test.push(sub),
            }
        }
    }
    Ok(out)
}

/// Exact-match accuracy per task: missing values (cells), column names and
/// table names.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub missing_values: f64,
    pub column_names: f64,
    pub table_names: f64,
}

impl TaskScores {
    pub fn get(&self, kind: MaskKind) -> f64 {
        match kind {
            MaskKind::Cell => self.missing_values,
            MaskKind::ColumnName => self.column_names,
            MaskKind::TableName => self.table_names,
        }
    }

    pub fn set(&mut self, kind: MaskKind, v: f64) {
        match kind {
            MaskKind::Cell => self.missing_values = v,
            MaskKind::ColumnName => self.column_names = v,
            MaskKind::TableName => self.table_names = v,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.missing_values + self.column_names + self.table_names) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<TaskScores>,
    pub wall_time: f64,
}

/// Row-only training example.
#[derive(Debug, Clone)]
pub struct RowSample {
    pub ids: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Masked row serializations for one epoch, in canonical (shuffled) order.
/// Targets whose mask was truncated away are skipped.
pub fn row_samples(
    dbs: &[RelationalDatabase],
    vocab: &Vocabulary,
    rates: MaskRates,
    seed: u64,
    max_seq_len: usize,
) -> Result<Vec<RowSample>> {
    let mut out = Vec::new();
    for (i, db) in dbs.iter().enumerate() {
        for spec in sample_mask_targets(db, rates, derive_seed(seed, &[i as u64])) {
            match serialize_for_row_model(db, &spec, vocab, max_seq_len) {
                Ok(seq) => out.push(RowSample {
                    ids: seq.ids,
                    target: spec.target_tokens(db, vocab),
                }),
                Err(Error::MaskTargetNotInRow(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX])));
    Ok(out)
}

fn reduce(state: &ModelState, parts: Vec<Result<Gradients>>) -> Result<Gradients> {
    let mut total = state.new_gradients();
    for g in parts {
        total.accumulate(&g?);
    }
    Ok(total)
}

/// Summed gradients of a row batch. Per-sample work runs under `mode`; the
/// sum is always taken in sample order.
pub fn row_batch_gradients(state: &ModelState, batch: &[RowSample], mode: Parallelism) -> Result<Gradients> {
    let parts = map_ordered(batch, mode, |s| {
        let mut g = state.new_gradients();
        state.row_loss(&s.ids, &s.target, Some(&mut g))?;
        Ok(g)
    });
    reduce(state, parts)
}

fn run_batches<S: Sync>(
    state: &mut ModelState,
    cfg: &TrainConfig,
    samples: &[S],
    grads: impl Fn(&ModelState, &[S]) -> Result<Gradients>,
) -> Result<f64> {
    let mut loss = 0.0;
    let mut n = 0usize;
    for batch in samples.chunks(cfg.batch_size) {
        let g = grads(state, batch)?;
        loss += g.loss_sum;
        n += g.samples;
        if g.samples > 0 {
            state.adam_step(&g, &cfg.adam)?;
        }
    }
    Ok(if n == 0 { 0.0 } else { loss / n as f64 })
}

/// Phase 1: encoder + decoder on masked single rows, fresh masks each epoch.
pub fn phase1_finetune(
    cfg: &TrainConfig,
    train: &[RelationalDatabase],
    val: &[RelationalDatabase],
    vocab: &Vocabulary,
) -> Result<(ModelState, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let mut state = ModelState::init(cfg.model, vocab.len(), cfg.model_seed)?;
    let mut logs = Vec::with_capacity(cfg.phase1_epochs);
    for epoch in 0..cfg.phase1_epochs {
        let start = Instant::now();
        let samples = row_samples(
            train,
            vocab,
            cfg.mask_rates,
            derive_seed(cfg.mask_seed, &[1, epoch as u64]),
            cfg.model.max_seq_len,
        )?;
        if samples.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let train_loss = run_batches(&mut state, cfg, &samples, |s, b| {
            row_batch_gradients(s, b, cfg.parallelism)
        })?;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate_all(&state, val, vocab, EvalMode::RowOnly, cfg)?)
        };
        let log = EpochLog {
            phase: 1,
            epoch,
            train_loss,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!("phase 1 epoch {epoch}: loss {train_loss:.4}");
        logs.push(log);
    }
    Ok((state, logs))
}

/// A database with its graph and the frozen encoder's unmasked node
/// features.
pub struct GraphContext<'a> {
    pub db: &'a RelationalDatabase,
    pub graph: SchemaGraph,
    pub prop: Propagation,
    pub base: NodeFeatures,
}

impl<'a> GraphContext<'a> {
    pub fn new(
        db: &'a RelationalDatabase,
        state: &ModelState,
        vocab: &Vocabulary,
        parallelism: Parallelism,
    ) -> Result<Self> {
        let graph = build_graph(db)?;
        let prop = graph.propagation();
        let base = attach_features(
            &graph,
            db,
            vocab,
            &state.params.encoder,
            state.config.stats_enabled,
            parallelism,
        )?;
        Ok(Self { db, graph, prop, base })
    }
}

pub fn build_contexts<'a>(
    dbs: &'a [RelationalDatabase],
    state: &ModelState,
    vocab: &Vocabulary,
    parallelism: Parallelism,
) -> Result<Vec<GraphContext<'a>>> {
    map_range(dbs.len(), parallelism, |i| {
        GraphContext::new(&dbs[i], state, vocab, Parallelism::Sequential)
    })
    .into_iter()
    .collect()
}

/// Nodes whose serialization contains the masked tokens.
pub fn affected_nodes(graph: &SchemaGraph, db: &RelationalDatabase, spec: &MaskSpec) -> Vec<usize> {
    match spec.target {
        MaskTarget::Cell { table, row, .. } => vec![graph.row_node(table, row)],
        MaskTarget::ColumnName { table, column } => std::iter::once(graph.column_node(table, column))
            .chain((0..db.tables[table].rows.len()).map(|r| graph.row_node(table, r)))
            .collect(),
        MaskTarget::TableName { table } => std::iter::once(graph.table_node(table))
            .chain((0..db.tables[table].def.columns.len()).map(|c| graph.column_node(table, c)))
            .chain((0..db.tables[table].rows.len()).map(|r| graph.row_node(table, r)))
            .collect(),
    }
}

pub fn target_node(graph: &SchemaGraph, spec: &MaskSpec) -> usize {
    match spec.target {
        MaskTarget::Cell { table, row, .. } => graph.row_node(table, row),
        MaskTarget::ColumnName { table, column } => graph.column_node(table, column),
        MaskTarget::TableName { table } => graph.table_node(table),
    }
}

#[derive(Debug, Clone)]
pub struct GraphSample {
    pub features: NodeFeatures,
    pub target_node: usize,
    pub target: Vec<TokenId>,
}

/// Node features with every affected node re-encoded under the mask.
pub fn materialize_graph_sample(
    ctx: &GraphContext,
    spec: &MaskSpec,
    vocab: &Vocabulary,
    state: &ModelState,
) -> Result<GraphSample> {
    spec.validate(ctx.db)?;
    let enc = &state.params.encoder;
    let mut values = ctx.base.values.clone();
    for node in affected_nodes(&ctx.graph, ctx.db, spec) {
        let seq = match node_sequence(&ctx.graph, ctx.db, node, vocab, enc.max_len(), Some(spec)) {
            Ok(seq) => seq,
            // The masked group was truncated away, so the node reads as unmasked.
            Err(Error::MaskTargetNotInRow(_)) if ctx.graph.nodes[node].kind == NodeKind::Row => continue,
            Err(e) => return Err(e),
        };
        let h = enc.encode_ids(&seq.ids)?;
        values.row_mut(node).copy_from_slice(&h);
    }
    Ok(GraphSample {
        features: NodeFeatures {
            values,
            stats: ctx.base.stats.clone(),
        },
        target_node: target_node(&ctx.graph, spec),
        target: spec.target_tokens(ctx.db, vocab),
    })
}

/// Propagation, features and target index actually fed to the GCN: the full
/// graph, or a sampled neighbourhood of the target node.
fn graph_inputs(
    ctx: &GraphContext,
    sample: GraphSample,
    fanout: Option<&[Fanout]>,
    rng_seed: u64,
) -> Result<(Propagation, Tensor, Option<Tensor>, usize)> {
    let Some(fanout) = fanout else {
        return Ok((
            ctx.prop.clone(),
            sample.features.values,
            sample.features.stats,
            sample.target_node,
        ));
    };
    let sub = sample_subgraph(&ctx.graph, sample.target_node, fanout, rng_seed)?;
    let gather = |t: &Tensor| {
        let mut out = Tensor::zeros(&[sub.nodes.len(), t.cols()]);
        for (i, &g) in sub.nodes.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(g));
        }
        out
    };
    let values = gather(&sample.features.values);
    let stats = sample.features.stats.as_ref().map(gather);
    Ok((sub.propagation(&ctx.graph), values, stats, 0))
}

/// One phase-2 unit of work: which context, which mask, which sampling seed.
#[derive(Debug, Clone, Copy)]
pub struct GraphTask {
    pub context: usize,
    pub spec: MaskSpec,
    pub rng_seed: u64,
}

pub fn graph_sample_loss(
    state: &ModelState,
    contexts: &[GraphContext],
    task: &GraphTask,
    vocab: &Vocabulary,
    fanout: Option<&[Fanout]>,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let ctx = &contexts[task.context];
    let sample = materialize_graph_sample(ctx, &task.spec, vocab, state)?;
    let target = sample.target.clone();
    let (prop, values, stats, node) = graph_inputs(ctx, sample, fanout, task.rng_seed)?;
    Ok(state
        .graph_loss(&prop, &values, stats.as_ref(), node, &target, grads)?
        .0)
}

pub fn graph_batch_gradients(
    state: &ModelState,
    contexts: &[GraphContext],
    batch: &[GraphTask],
    vocab: &Vocabulary,
    fanout: Option<&[Fanout]>,
    mode: Parallelism,
) -> Result<Gradients> {
    let parts = map_ordered(batch, mode, |t| {
        let mut g = state.new_gradients();
        graph_sample_loss(state, contexts, t, vocab, fanout, Some(&mut g))?;
        Ok(g)
    });
    reduce(state, parts)
}

pub fn graph_tasks(contexts: &[GraphContext], rates: MaskRates, seed: u64) -> Vec<GraphTask> {
    let mut out = Vec::new();
    for (i, ctx) in contexts.iter().enumerate() {
        for spec in sample_mask_targets(ctx.db, rates, derive_seed(seed, &[i as u64])) {
            out.push(GraphTask {
                context: i,
                spec,
                rng_seed: 0,
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX])));
    for (k, t) in out.iter_mut().enumerate() {
        t.rng_seed = derive_seed(seed, &[u64::MAX - 1, k as u64]);
    }
    out
}

/// Phase 2: encoder frozen, GCN (and decoder unless frozen) trained on graph
/// samples. Returns the epoch state with the best mean validation accuracy
/// (earliest on ties), or the starting state when no epoch ran.
pub fn phase2_train_gnn(
    cfg: &TrainConfig,
    train: &[RelationalDatabase],
    val: &[RelationalDatabase],
    vocab: &Vocabulary,
    phase1: Option<&ModelState>,
) -> Result<(ModelState, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut state = phase1.ok_or(Error::MissingPhase1State)?.clone();
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    state.params.encoder.frozen = true;
    state.params.decoder.frozen = cfg.freeze_decoder;
    state.reset_optimizer();
    let contexts = build_contexts(train, &state, vocab, cfg.parallelism)?;
    let val_contexts = build_contexts(val, &state, vocab, cfg.parallelism)?;
    let fanout = cfg.fanout.as_deref();

    let mut best: Option<(f64, ModelState)> = None;
    let mut logs = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 0..cfg.phase2_epochs {
        let start = Instant::now();
        let tasks = graph_tasks(
            &contexts,
            cfg.mask_rates,
            derive_seed(cfg.mask_seed, &[2, epoch as u64]),
        );
        let tasks: Vec<GraphTask> = tasks
            .into_iter()
            .map(|t| GraphTask {
                rng_seed: derive_seed(cfg.sample_seed, &[epoch as u64, t.rng_seed]),
                ..t
            })
            .collect();
        if tasks.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        let train_loss = run_batches(&mut state, cfg, &tasks, |s, b| {
            graph_batch_gradients(s, &contexts, b, vocab, fanout, cfg.parallelism)
        })?;
        let val_accuracy = if val_contexts.is_empty() {
            None
        } else {
            Some(evaluate_contexts(&state, &val_contexts, vocab, EvalMode::Graph, cfg)?)
        };
        let score = val_accuracy.map_or(-train_loss, |v| v.mean());
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, state.clone()));
        }
        log::info!("phase 2 epoch {epoch}: loss {train_loss:.4} val {val_accuracy:?}");
        logs.push(EpochLog {
            phase: 2,
            epoch,
            train_loss,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((best.map_or(state, |(_, s)| s), logs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    RowOnly,
    Graph,
}

fn eval_specs(db: &RelationalDatabase, index: usize, cfg: &TrainConfig) -> Vec<MaskSpec> {
    sample_mask_targets(db, cfg.eval_rates, derive_seed(cfg.mask_seed, &[3, index as u64]))
}

fn exact(pred: &[TokenId], target: &[TokenId], max_decode_len: usize) -> bool {
    let mut want = padded_target(target, max_decode_len);
    while want.last() == Some(&crate::tokenizer::PAD) {
        want.pop();
    }
    pred == want.as_slice()
}

#[derive(Default, Clone, Copy)]
struct Tally {
    hit: [usize; 3],
    total: [usize; 3],
}

fn kind_index(kind: MaskKind) -> usize {
    match kind {
        MaskKind::Cell => 0,
        MaskKind::ColumnName => 1,
        MaskKind::TableName => 2,
    }
}

fn finish(tallies: Vec<Result<Tally>>) -> Result<TaskScores> {
    let mut t = Tally::default();
    for x in tallies {
        let x = x?;
        for k in 0..3 {
            t.hit[k] += x.hit[k];
            t.total[k] += x.total[k];
        }
    }
    let mut out = TaskScores::default();
    for kind in MaskKind::ALL {
        let k = kind_index(kind);
        if t.total[k] == 0 {
            return Err(Error::EmptySplit);
        }
        out.set(kind, t.hit[k] as f64 / t.total[k] as f64);
    }
    Ok(out)
}

fn evaluate_contexts(
    state: &ModelState,
    contexts: &[GraphContext],
    vocab: &Vocabulary,
    mode: EvalMode,
    cfg: &TrainConfig,
) -> Result<TaskScores> {
    if contexts.is_empty() {
        return Err(Error::EmptySplit);
    }
    let idx: Vec<usize> = (0..contexts.len()).collect();
    let fanout = cfg.fanout.as_deref();
    let dl = state.config.max_decode_len;
    let tallies = map_ordered(&idx, cfg.parallelism, |&i| -> Result<Tally> {
        let ctx = &contexts[i];
        let mut t = Tally::default();
        for (k, spec) in eval_specs(ctx.db, i, cfg).into_iter().enumerate() {
            let target = spec.target_tokens(ctx.db, vocab);
            let pred = match mode {
                EvalMode::RowOnly => match serialize_for_row_model(ctx.db, &spec, vocab, state.config.max_seq_len) {
                    Ok(seq) => state.predict_row(&seq.ids)?,
                    Err(Error::MaskTargetNotInRow(_)) => Vec::new(),
                    Err(e) => return Err(e),
                },
                EvalMode::Graph => {
                    let sample = materialize_graph_sample(ctx, &spec, vocab, state)?;
                    let seed = derive_seed(cfg.sample_seed, &[3, i as u64, k as u64]);
                    let (prop, values, stats, node) = graph_inputs(ctx, sample, fanout, seed)?;
                    state.predict_graph(&prop, &values, stats.as_ref(), node)?
                }
            };
            let ki = kind_index(spec.kind());
            t.total[ki] += 1;
            if exact(&pred, &target, dl) {
                t.hit[ki] += 1;
            }
        }
        Ok(t)
    });
    finish(tallies)
}

/// Accuracy on all three tasks over `dbs`.
pub fn evaluate_all(
    state: &ModelState,
    dbs: &[RelationalDatabase],
    vocab: &Vocabulary,
    mode: EvalMode,
    cfg: &TrainConfig,
) -> Result<TaskScores> {
    if dbs.is_empty() {
        return Err(Error::EmptySplit);
    }
    match mode {
        EvalMode::Graph => {
            let contexts = build_contexts(dbs, state, vocab, cfg.parallelism)?;
            evaluate_contexts(state, &contexts, vocab, mode, cfg)
        }
        EvalMode::RowOnly => {
            // Row-only prediction needs no graph; skip building features.
            let dl = state.config.max_decode_len;
            let idx: Vec<usize> = (0..dbs.len()).collect();
            let tallies = map_ordered(&idx, cfg.parallelism, |&i| -> Result<Tally> {
                let db = &dbs[i];
                let mut t = Tally::default();
                for spec in eval_specs(db, i, cfg) {
                    let pred = match serialize_for_row_model(db, &spec, vocab, state.config.max_seq_len) {
                        Ok(seq) => state.predict_row(&seq.ids)?,
                        Err(Error::MaskTargetNotInRow(_)) => Vec::new(),
                        Err(e) => return Err(e),
                    };
                    let ki = kind_index(spec.kind());
                    t.total[ki] += 1;
                    if exact(&pred, &spec.target_tokens(db, vocab), dl) {
                        t.hit[ki] += 1;
                    }
                }
                Ok(t)
            });
            finish(tallies)
        }
    }
}

/// Accuracy on one task.
pub fn evaluate_split(
    state: &ModelState,
    dbs: &[RelationalDatabase],
    vocab: &Vocabulary,
    task: MaskKind,
    mode: EvalMode,
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(evaluate_all(state, dbs, vocab, mode, cfg)?.get(task))
}

/// Fraction of `(prediction, target)` pairs that match exactly.
pub fn exact_match_accuracy(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok(pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64)
}
