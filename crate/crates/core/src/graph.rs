//! Heterogeneous schema graph: one node per table, column and row.
//!
//! Node order is canonical: all table nodes, then all column nodes (table by
//! table, schema order), then all row nodes (table by table, file order).
//! Edges are undirected and stored as symmetric directed pairs.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::parallel::{map_ordered, Parallelism};
use crate::store::{column_statistics, RelationalDatabase};
use crate::tokenizer::{serialize_column_name, serialize_row, serialize_table_name, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Table,
    Column,
    Row,
}

/// `index` is the column index for column nodes, the row index for row
/// nodes, and 0 for table nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub kind: NodeKind,
    pub table: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    RowInTable,
    ColInTable,
    CellLink,
    FkLink,
}

impl EdgeType {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::RowInTable => "row_in_table",
            EdgeType::ColInTable => "col_in_table",
            EdgeType::CellLink => "cell_link",
            EdgeType::FkLink => "fk_link",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaGraph {
    pub nodes: Vec<Node>,
    /// Both directions of every undirected edge.
    pub edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, EdgeType)>>,
    column_offset: Vec<usize>,
    row_offset: Vec<usize>,
}

impl SchemaGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.edges.len() / 2
    }

    /// Each undirected edge once, as the `src < dst` direction.
    pub fn undirected_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.src < e.dst)
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, EdgeType)] {
        &self.adjacency[node]
    }

    /// Distinct neighbour ids in first-seen order.
    pub fn distinct_neighbors(&self, node: usize) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.adjacency[node]
            .iter()
            .filter_map(|&(v, _)| seen.insert(v).then_some(v))
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn table_node(&self, table: usize) -> usize {
        table
    }

    pub fn column_node(&self, table: usize, column: usize) -> usize {
        self.column_offset[table] + column
    }

    pub fn row_node(&self, table: usize, row: usize) -> usize {
        self.row_offset[table] + row
    }

    pub fn propagation(&self) -> Propagation {
        Propagation {
            neighbors: self
                .adjacency
                .iter()
                .map(|adj| adj.iter().map(|&(v, _)| v).collect())
                .collect(),
            degree: self.adjacency.iter().map(|adj| adj.len() as f64 + 1.0).collect(),
        }
    }

    /// Edge list, one `src dst etype` line per directed edge.
    pub fn export_edges(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {}", e.src, e.dst, e.etype.as_str());
        }
        out
    }

    /// Node table, one `id kind table [column|row]` line per node.
    pub fn export_nodes(&self, db: &RelationalDatabase) -> String {
        let mut out = String::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let table = &db.tables[n.table];
            let _ = match n.kind {
                NodeKind::Table => writeln!(out, "{id} table {}", table.def.name),
                NodeKind::Column => writeln!(
                    out,
                    "{id} column {} {}",
                    table.def.name, table.def.columns[n.index].name
                ),
                NodeKind::Row => writeln!(out, "{id} row {} {}", table.def.name, n.index),
            };
        }
        out
    }
}

pub fn build_graph(db: &RelationalDatabase) -> Result<SchemaGraph> {
    let n_tables = db.tables.len();
    let mut nodes = Vec::with_capacity(n_tables + db.num_columns() + db.num_rows());
    let mut column_offset = Vec::with_capacity(n_tables);
    let mut row_offset = Vec::with_capacity(n_tables);
    for t in 0..n_tables {
        nodes.push(Node {
            kind: NodeKind::Table,
            table: t,
            index: 0,
        });
    }
    for (t, table) in db.tables.iter().enumerate() {
        column_offset.push(nodes.len());
        for c in 0..table.def.columns.len() {
            nodes.push(Node {
                kind: NodeKind::Column,
                table: t,
                index: c,
            });
        }
    }
    for (t, table) in db.tables.iter().enumerate() {
        row_offset.push(nodes.len());
        for r in 0..table.rows.len() {
            nodes.push(Node {
                kind: NodeKind::Row,
                table: t,
                index: r,
            });
        }
    }

    let mut undirected = Vec::new();
    for (t, table) in db.tables.iter().enumerate() {
        for r in 0..table.rows.len() {
            undirected.push((row_offset[t] + r, t, EdgeType::RowInTable));
        }
        for c in 0..table.def.columns.len() {
            undirected.push((column_offset[t] + c, t, EdgeType::ColInTable));
        }
        for r in 0..table.rows.len() {
            for c in 0..table.def.columns.len() {
                undirected.push((row_offset[t] + r, column_offset[t] + c, EdgeType::CellLink));
            }
        }
    }
    for fk in db.resolved_foreign_keys()? {
        for (r, target) in db.fk_targets(&fk).into_iter().enumerate() {
            if let Some(target) = target {
                let a = row_offset[fk.from_table] + r;
                let b = row_offset[fk.to_table] + target;
                if a != b {
                    undirected.push((a, b, EdgeType::FkLink));
                }
            }
        }
    }

    let mut edges = Vec::with_capacity(undirected.len() * 2);
    let mut adjacency = vec![Vec::new(); nodes.len()];
    for (a, b, etype) in undirected {
        edges.push(Edge { src: a, dst: b, etype });
        edges.push(Edge { src: b, dst: a, etype });
        adjacency[a].push((b, etype));
        adjacency[b].push((a, etype));
    }
    Ok(SchemaGraph {
        nodes,
        edges,
        adjacency,
        column_offset,
        row_offset,
    })
}

/// Neighbour lists and normalisation degrees consumed by the GCN.
///
/// `degree[i]` is the self-loop-augmented degree used in the symmetric
/// normalisation `1 / sqrt(degree[i] * degree[j])`. For subgraphs it is the
/// degree in the parent graph, so a subgraph holding the full receptive
/// field of a node reproduces that node's full-graph output.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub neighbors: Vec<Vec<usize>>,
    pub degree: Vec<f64>,
}

impl Propagation {
    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Builds a propagation structure from an undirected edge list, with
    /// degrees taken from that list.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let degree = neighbors.iter().map(|n| n.len() as f64 + 1.0).collect();
        Self { neighbors, degree }
    }
}

/// Per-hop neighbour cap; `None` takes every neighbour.
pub type Fanout = Option<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub seed: usize,
    /// Newly reached global node ids per hop.
    pub hops: Vec<Vec<usize>>,
    /// For every expanded frontier node, the neighbours sampled from it.
    pub sampled: Vec<(usize, Vec<usize>)>,
    /// Local id -> global id; the seed is local 0.
    pub nodes: Vec<usize>,
    /// Induced edges in global ids, both directions.
    pub edges: Vec<Edge>,
}

impl Subgraph {
    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.nodes.iter().position(|&g| g == global)
    }

    /// Induced propagation structure in local ids, keeping the parent's
    /// neighbour order and degrees.
    pub fn propagation(&self, parent: &SchemaGraph) -> Propagation {
        let mut local = vec![usize::MAX; parent.num_nodes()];
        for (i, &g) in self.nodes.iter().enumerate() {
            local[g] = i;
        }
        let neighbors = self
            .nodes
            .iter()
            .map(|&g| {
                parent
                    .neighbors(g)
                    .iter()
                    .filter_map(|&(v, _)| (local[v] != usize::MAX).then_some(local[v]))
                    .collect()
            })
            .collect();
        let degree = self.nodes.iter().map(|&g| parent.degree(g) as f64 + 1.0).collect();
        Propagation { neighbors, degree }
    }
}

pub fn sample_subgraph(
    graph: &SchemaGraph,
    seed_node: usize,
    fanout_per_hop: &[Fanout],
    rng_seed: u64,
) -> Result<Subgraph> {
    if seed_node >= graph.num_nodes() {
        return Err(Error::InvalidSeedNode {
            node: seed_node,
            num_nodes: graph.num_nodes(),
        });
    }
    if fanout_per_hop.is_empty() {
        return Err(Error::Config("fanout list must cover at least one hop".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut in_graph = vec![false; graph.num_nodes()];
    in_graph[seed_node] = true;
    let mut nodes = vec![seed_node];
    let mut frontier = vec![seed_node];
    let mut hops = Vec::with_capacity(fanout_per_hop.len());
    let mut sampled = Vec::new();
    for fanout in fanout_per_hop {
        let mut next = Vec::new();
        for &u in &frontier {
            let candidates = graph.distinct_neighbors(u);
            let chosen: Vec<usize> = match *fanout {
                Some(k) if k < candidates.len() => {
                    let mut picks = sample(&mut rng, candidates.len(), k).into_vec();
                    picks.sort_unstable();
                    picks.into_iter().map(|i| candidates[i]).collect()
                }
                _ => candidates,
            };
            for &v in &chosen {
                if !in_graph[v] {
                    in_graph[v] = true;
                    nodes.push(v);
                    next.push(v);
                }
            }
            sampled.push((u, chosen));
        }
        hops.push(next.clone());
        frontier = next;
    }
    let edges = graph
        .edges
        .iter()
        .filter(|e| in_graph[e.src] && in_graph[e.dst])
        .copied()
        .collect();
    Ok(Subgraph {
        seed: seed_node,
        hops,
        sampled,
        nodes,
        edges,
    })
}

/// Anything that maps a token sequence to a fixed-size embedding.
pub trait EncoderHandle: Sync {
    fn dim(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>>;
}

pub const STATS_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub values: Tensor,
    pub stats: Option<Tensor>,
}

impl NodeFeatures {
    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite() && self.stats.as_ref().map_or(true, Tensor::is_finite)
    }
}

/// The token sequence a node is encoded from, under an optional mask.
pub fn node_sequence(
    graph: &SchemaGraph,
    db: &RelationalDatabase,
    node: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
    mask: Option<&crate::tokenizer::MaskSpec>,
) -> Result<TokenSequence> {
    let n = graph.nodes[node];
    match n.kind {
        NodeKind::Table => serialize_table_name(db, n.table, vocab, max_seq_len, mask),
        NodeKind::Column => serialize_column_name(db, n.table, n.index, vocab, max_seq_len, mask),
        NodeKind::Row => serialize_row(db, n.table, n.index, vocab, max_seq_len, mask),
    }
}

/// Raw `(min, max, distinct/rows, nulls/rows)`; min and max are zero for
/// text columns and empty numeric columns.
pub fn raw_column_stats(db: &RelationalDatabase, table: usize, column: usize) -> Result<[f64; STATS_DIM]> {
    let t = &db.tables[table];
    let s = column_statistics(db, &t.def.name, &t.def.columns[column].name)?;
    let n = t.rows.len();
    let ratio = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok([
        s.min.unwrap_or(0.0),
        s.max.unwrap_or(0.0),
        ratio(s.distinct_count),
        ratio(s.null_count),
    ])
}

/// Signed log scaling for min/max; the ratios are already in [0, 1].
pub fn normalize_stats(raw: [f64; STATS_DIM]) -> [f64; STATS_DIM] {
    let squash = |x: f64| x.signum() * x.abs().ln_1p();
    [squash(raw[0]), squash(raw[1]), raw[2], raw[3]]
}

pub fn attach_features(
    graph: &SchemaGraph,
    db: &RelationalDatabase,
    vocab: &Vocabulary,
    encoder: &dyn EncoderHandle,
    stats_enabled: bool,
    parallelism: Parallelism,
) -> Result<NodeFeatures> {
    let d = encoder.dim();
    let ids: Vec<usize> = (0..graph.num_nodes()).collect();
    let encoded = map_ordered(&ids, parallelism, |&node| {
        node_sequence(graph, db, node, vocab, encoder.max_seq_len(), None).and_then(|seq| encoder.encode(&seq))
    });
    let mut values = Tensor::zeros(&[graph.num_nodes(), d]);
    for (node, emb) in encoded.into_iter().enumerate() {
        let emb = emb?;
        if emb.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: emb.len(),
            });
        }
        values.row_mut(node).copy_from_slice(&emb);
    }
    let stats = if stats_enabled {
        let mut s = Tensor::zeros(&[graph.num_nodes(), STATS_DIM]);
        for (node, n) in graph.nodes.iter().enumerate() {
            if n.kind == NodeKind::Column {
                let v = normalize_stats(raw_column_stats(db, n.table, n.index)?);
                s.row_mut(node).copy_from_slice(&v);
            }
        }
        Some(s)
    } else {
        None
    };
    Ok(NodeFeatures { values, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::fixtures::{col, row, solar};
    use crate::store::{Cell, Dtype, Table, TableDef};

    #[test]
    fn solar_counts() {
        let db = solar();
        let g = build_graph(&db).unwrap();
        assert_eq!(g.num_nodes(), 2 + 4 + 5);
        assert_eq!(g.num_undirected_edges(), 22);
        let count = |t: EdgeType| g.undirected_edges().filter(|e| e.etype == t).count();
        assert_eq!(count(EdgeType::RowInTable), 5);
        assert_eq!(count(EdgeType::ColInTable), 4);
        assert_eq!(count(EdgeType::CellLink), 10);
        assert_eq!(count(EdgeType::FkLink), 3);
        assert!(g.edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn smallest_graph_is_triangle() {
        let db = RelationalDatabase {
            name: "s".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "t".into(),
                    columns: vec![col("a", Dtype::Text)],
                    primary_key: None,
                },
                rows: vec![row(&["x"])],
            }],
            foreign_keys: vec![],
        };
        let g = build_graph(&db).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_undirected_edges(), 3);
        for n in 0..3 {
            assert_eq!(g.distinct_neighbors(n).len(), 2);
        }
    }

    #[test]
    fn no_fk_means_one_component_per_table() {
        let mut db = solar();
        db.foreign_keys.clear();
        let g = build_graph(&db).unwrap();
        assert_eq!(g.undirected_edges().filter(|e| e.etype == EdgeType::FkLink).count(), 0);
        // every edge stays within one table
        assert!(g.edges.iter().all(|e| g.nodes[e.src].table == g.nodes[e.dst].table));
        let sub = sample_subgraph(&g, 0, &[None, None, None], 0).unwrap();
        assert_eq!(sub.nodes.len(), 1 + 2 + 2);
    }

    #[test]
    fn export_formats() {
        let db = solar();
        let g = build_graph(&db).unwrap();
        let edges = g.export_edges();
        assert_eq!(edges.lines().count(), 44);
        assert!(edges.lines().next().unwrap().ends_with("row_in_table"));
        let nodes = g.export_nodes(&db);
        assert_eq!(nodes.lines().next(), Some("0 table planets"));
        assert!(nodes.contains("2 column planets id"));
        assert!(nodes.contains("10 row moons 2"));
    }

    #[test]
    fn bounded_fanout_picks_true_neighbors() {
        // the planets table node has 2 rows + 2 columns = 4 neighbours
        let db = solar();
        let g = build_graph(&db).unwrap();
        let moons_table = g.table_node(1);
        assert_eq!(g.distinct_neighbors(moons_table).len(), 5);
        let sub = sample_subgraph(&g, moons_table, &[Some(2)], 11).unwrap();
        assert_eq!(sub.sampled[0].1.len(), 2);
        for v in &sub.sampled[0].1 {
            assert!(g.distinct_neighbors(moons_table).contains(v));
        }
        assert_eq!(sub, sample_subgraph(&g, moons_table, &[Some(2)], 11).unwrap());
        assert!(matches!(
            sample_subgraph(&g, 99, &[None], 0),
            Err(Error::InvalidSeedNode { .. })
        ));
    }

    #[test]
    fn stats_vector_for_one_to_ten() {
        let db = RelationalDatabase {
            name: "s".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "t".into(),
                    columns: vec![col("n", Dtype::Integer)],
                    primary_key: None,
                },
                rows: (1..=10).map(|i| vec![Cell::Value(i.to_string())]).collect(),
            }],
            foreign_keys: vec![],
        };
        assert_eq!(raw_column_stats(&db, 0, 0).unwrap(), [1.0, 10.0, 1.0, 0.0]);
        let n = normalize_stats([1.0, 10.0, 1.0, 0.0]);
        assert!((n[0] - 2f64.ln()).abs() < 1e-15);
        assert!((n[1] - 11f64.ln()).abs() < 1e-15);
    }
}
