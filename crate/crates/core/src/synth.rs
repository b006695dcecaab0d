//! Seeded generator for corpora of small relational databases with
//! cross-table structure.
//!
//! Every table has an integer primary key `id`. A table may reference an
//! earlier table through `<parent>_id`; such a child also carries one
//! attribute copied from the referenced parent row, so the value is only
//! recoverable by following the foreign key.
//!
//! Attributes come in pairs whose value pools share a block of tokens. A
//! table holds at most one attribute of each pair, so the columns of one
//! table never share values, while a single shared value leaves open which
//! of the two pair members a column is. Each column also has a dominant
//! value shared by roughly half its rows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Cell, ColumnDef, Dtype, ForeignKey, RelationalDatabase, Table, TableDef};

const TABLE_KINDS: [&str; 8] = [
    "planets", "moons", "stars", "missions", "probes", "crews", "labs", "orbits",
];

/// Attribute `2p` and `2p + 1` form pair `p`.
const ATTRIBUTES: [&str; 12] = [
    "color", "size", "class", "region", "status", "phase", "origin", "grade", "mode", "shape", "tier", "zone",
];
const PAIRS: usize = ATTRIBUTES.len() / 2;

/// Attribute pairs each table kind draws from first.
const PREFERRED_PAIRS: [[usize; 3]; 8] = [
    [0, 1, 2],
    [3, 4, 5],
    [0, 2, 4],
    [1, 3, 5],
    [0, 1, 3],
    [2, 4, 5],
    [0, 3, 4],
    [1, 2, 5],
];
const DOMINANT_SHARE: f64 = 0.8;
const NULL_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_databases: usize,
    pub tables_per_db: (usize, usize),
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub vocab_size: usize,
    pub fk_density: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_databases: 50,
            tables_per_db: (2, 4),
            rows: (5, 20),
            cols: (2, 4),
            vocab_size: 24,
            fk_density: 0.8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("tables_per_db", self.tables_per_db),
            ("rows", self.rows),
            ("cols", self.cols),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || hi < lo {
                return Err(Error::InvalidSpec(format!(
                    "{name} range ({lo}, {hi}) must be positive and ordered"
                )));
            }
        }
        if self.n_databases == 0 {
            return Err(Error::InvalidSpec("n_databases must be positive".into()));
        }
        if self.vocab_size < 4 * PAIRS {
            return Err(Error::InvalidSpec(format!("vocab_size must be at least {}", 4 * PAIRS)));
        }
        if self.cols.1 > PAIRS - 1 {
            return Err(Error::InvalidSpec(format!(
                "at most {} attribute columns per table",
                PAIRS - 1
            )));
        }
        if !(0.0..=1.0).contains(&self.fk_density) {
            return Err(Error::InvalidSpec("fk_density must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Value tokens an attribute may take: its pair's shared block followed by
/// a block of its own. Half of each pair's token range is shared.
fn value_pool(attribute: usize, vocab_size: usize) -> Vec<String> {
    let per_pair = vocab_size / PAIRS;
    let shared = per_pair / 2;
    let own = (per_pair - shared) / 2;
    let base = (attribute / 2) * per_pair;
    let own_base = base + shared + (attribute % 2) * own;
    (base..base + shared)
        .chain(own_base..own_base + own)
        .map(|k| format!("v{k}"))
        .collect()
}

fn pair_of(attribute: usize) -> usize {
    attribute / 2
}

fn db_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<RelationalDatabase>> {
    spec.validate()?;
    (0..spec.n_databases)
        .map(|i| {
            let db = generate_database(spec, i);
            debug_assert!(db.validate().is_ok());
            Ok(db)
        })
        .collect()
}

struct Column {
    def: ColumnDef,
    kind: ColumnKind,
}

enum ColumnKind {
    Key,
    Reference,
    Inherited { parent_column: usize },
    Own { attribute: usize },
}

fn generate_database(spec: &SynthSpec, index: usize) -> RelationalDatabase {
    let mut rng = db_rng(spec.seed, index);
    let n_tables = rng.gen_range(spec.tables_per_db.0..=spec.tables_per_db.1);
    let mut kinds: Vec<usize> = (0..TABLE_KINDS.len()).collect();
    kinds.shuffle(&mut rng);

    let mut tables: Vec<Table> = Vec::with_capacity(n_tables);
    let mut attributes_of: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_tables);
    let mut foreign_keys = Vec::new();

    for j in 0..n_tables {
        let kind = kinds[j % kinds.len()];
        let name = if j < kinds.len() {
            TABLE_KINDS[kind].to_string()
        } else {
            format!("{}{}", TABLE_KINDS[kind], j / kinds.len())
        };
        let n_rows = rng.gen_range(spec.rows.0..=spec.rows.1);
        let parent = (j > 0 && rng.gen_bool(spec.fk_density)).then(|| rng.gen_range(0..j));

        let mut columns = vec![Column {
            def: ColumnDef {
                name: "id".into(),
                dtype: Dtype::Integer,
                nullable: false,
            },
            kind: ColumnKind::Key,
        }];
        let mut blocked_names = Vec::new();
        let mut used_pairs = Vec::new();
        if let Some(p) = parent {
            blocked_names.extend(
                tables[p]
                    .def
                    .columns
                    .iter()
                    .filter_map(|c| ATTRIBUTES.iter().position(|a| *a == c.name)),
            );
            columns.push(Column {
                def: ColumnDef {
                    name: format!("{}_id", tables[p].def.name),
                    dtype: Dtype::Integer,
                    nullable: true,
                },
                kind: ColumnKind::Reference,
            });
            if let Some(&(attribute, parent_column)) = attributes_of[p].choose(&mut rng) {
                used_pairs.push(pair_of(attribute));
                columns.push(Column {
                    def: ColumnDef {
                        name: ATTRIBUTES[attribute].into(),
                        dtype: Dtype::Text,
                        nullable: true,
                    },
                    kind: ColumnKind::Inherited { parent_column },
                });
            }
        }
        let n_own = rng.gen_range(spec.cols.0..=spec.cols.1);
        let preferred = PREFERRED_PAIRS[kind];
        let mut pairs: Vec<usize> = preferred.iter().copied().filter(|p| !used_pairs.contains(p)).collect();
        pairs.shuffle(&mut rng);
        let mut rest: Vec<usize> = (0..PAIRS)
            .filter(|p| !preferred.contains(p) && !used_pairs.contains(p))
            .collect();
        rest.shuffle(&mut rng);
        pairs.extend(rest);
        for &pair in pairs.iter().take(n_own) {
            let members: Vec<usize> = [2 * pair, 2 * pair + 1]
                .into_iter()
                .filter(|a| !blocked_names.contains(a))
                .collect();
            let attribute = *members.choose(&mut rng).expect("a parent blocks one member per pair");
            columns.push(Column {
                def: ColumnDef {
                    name: ATTRIBUTES[attribute].into(),
                    dtype: Dtype::Text,
                    nullable: rng.gen_bool(0.25),
                },
                kind: ColumnKind::Own { attribute },
            });
        }
        columns[1..].shuffle(&mut rng);

        let mut ids: Vec<usize> = (1..=n_rows).collect();
        ids.shuffle(&mut rng);
        let dominant: Vec<Option<String>> = columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Own { attribute } => value_pool(attribute, spec.vocab_size).choose(&mut rng).cloned(),
                _ => None,
            })
            .collect();

        let mut rows = Vec::with_capacity(n_rows);
        for &id in &ids {
            let target = parent.and_then(|p| {
                let parent_rows = tables[p].rows.len();
                (!rng.gen_bool(NULL_RATE)).then(|| rng.gen_range(0..parent_rows))
            });
            let row: Vec<Cell> = columns
                .iter()
                .zip(&dominant)
                .map(|(c, dom)| match c.kind {
                    ColumnKind::Key => Cell::Value(id.to_string()),
                    ColumnKind::Reference => match (parent, target) {
                        (Some(p), Some(t)) => tables[p].rows[t][0].clone(),
                        _ => Cell::Null,
                    },
                    ColumnKind::Inherited { parent_column } => match (parent, target) {
                        (Some(p), Some(t)) => tables[p].rows[t][parent_column].clone(),
                        _ => Cell::Null,
                    },
                    ColumnKind::Own { attribute } => {
                        if c.def.nullable && rng.gen_bool(NULL_RATE) {
                            Cell::Null
                        } else if rng.gen_bool(DOMINANT_SHARE) {
                            Cell::Value(dom.clone().expect("own columns have a dominant value"))
                        } else {
                            Cell::Value(
                                value_pool(attribute, spec.vocab_size)
                                    .choose(&mut rng)
                                    .cloned()
                                    .expect("non-empty pool"),
                            )
                        }
                    }
                })
                .collect();
            rows.push(row);
        }

        if let Some(p) = parent {
            foreign_keys.push(ForeignKey {
                from_table: name.clone(),
                from_column: format!("{}_id", tables[p].def.name),
                to_table: tables[p].def.name.clone(),
                to_column: "id".into(),
            });
        }
        attributes_of.push(
            columns
                .iter()
                .enumerate()
                .filter_map(|(ci, c)| match c.kind {
                    ColumnKind::Own { attribute } => Some((attribute, ci)),
                    _ => None,
                })
                .collect(),
        );
        tables.push(Table {
            def: TableDef {
                name,
                columns: columns.into_iter().map(|c| c.def).collect(),
                primary_key: Some("id".into()),
            },
            rows,
        });
    }

    RelationalDatabase {
        name: format!("synth_{:04}", index),
        tables,
        foreign_keys,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::load_database;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SynthSpec {
            n_databases: 5,
            ..SynthSpec::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            x.save(&dir_a.path().join(i.to_string()), "__NULL__").unwrap();
            y.save(&dir_b.path().join(i.to_string()), "__NULL__").unwrap();
            for entry in std::fs::read_dir(dir_a.path().join(i.to_string())).unwrap() {
                let p = entry.unwrap().path();
                let q = dir_b.path().join(i.to_string()).join(p.file_name().unwrap());
                assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
            }
        }
    }

    #[test]
    fn fifty_databases_pass_load_validation() {
        let spec = SynthSpec::default();
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 50);
        let dir = tempfile::tempdir().unwrap();
        for db in &corpus {
            assert!((2..=4).contains(&db.tables.len()));
            for t in &db.tables {
                assert!((5..=20).contains(&t.rows.len()));
            }
            let path = dir.path().join(&db.name);
            db.save(&path, "__NULL__").unwrap();
            assert_eq!(&load_database(&path).unwrap(), db);
        }
        assert!(corpus.iter().any(|db| !db.foreign_keys.is_empty()));
    }

    #[test]
    fn zero_fk_density_has_no_foreign_keys() {
        let spec = SynthSpec {
            fk_density: 0.0,
            ..SynthSpec::default()
        };
        for db in generate_synthetic_corpus(&spec).unwrap() {
            assert!(db.foreign_keys.is_empty());
        }
    }

    #[test]
    fn inherited_attribute_matches_parent_row() {
        let corpus = generate_synthetic_corpus(&SynthSpec {
            fk_density: 1.0,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut checked = 0;
        for db in &corpus {
            for fk in db.resolved_foreign_keys().unwrap() {
                let child = &db.tables[fk.from_table];
                let parent = &db.tables[fk.to_table];
                let shared: Vec<(usize, usize)> = child
                    .def
                    .columns
                    .iter()
                    .enumerate()
                    .filter_map(|(ci, c)| parent.def.column_index(&c.name).map(|pi| (ci, pi)))
                    .filter(|&(_, pi)| pi != 0)
                    .collect();
                for (r, t) in db.fk_targets(&fk).into_iter().enumerate() {
                    if let Some(t) = t {
                        for &(ci, pi) in &shared {
                            assert_eq!(child.rows[r][ci], parent.rows[t][pi]);
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn columns_of_one_table_never_share_values() {
        for db in generate_synthetic_corpus(&SynthSpec::default()).unwrap() {
            for t in &db.tables {
                let attrs: Vec<usize> = t
                    .def
                    .columns
                    .iter()
                    .filter_map(|c| ATTRIBUTES.iter().position(|a| *a == c.name))
                    .collect();
                let mut pairs: Vec<usize> = attrs.iter().map(|&a| pair_of(a)).collect();
                pairs.sort_unstable();
                pairs.dedup();
                assert_eq!(pairs.len(), attrs.len(), "{} in {}", t.def.name, db.name);
            }
        }
        let a = value_pool(4, 96);
        let b = value_pool(5, 96);
        let c = value_pool(6, 96);
        assert_eq!(a.len(), 12);
        assert_eq!(a.iter().filter(|v| b.contains(v)).count(), 8);
        assert!(a.iter().all(|v| !c.contains(v)));
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = [
            SynthSpec {
                rows: (0, 3),
                ..SynthSpec::default()
            },
            SynthSpec {
                cols: (4, 2),
                ..SynthSpec::default()
            },
            SynthSpec {
                fk_density: 1.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                n_databases: 0,
                ..SynthSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::InvalidSpec(_))));
        }
    }
}
