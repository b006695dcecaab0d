//! Word-level vocabulary and row linearization.
//!
//! A row of table `T` with columns `c1..cn` is laid out as
//! `[TAB] T [COL] c1 [VAL] v1 ... [COL] cn [VAL] vn`. Column nodes use
//! `[TAB] T [COL] c` and table nodes use `[TAB] T`. A masked target (cell
//! value, column name, or table name) collapses to a single `[MASK]`
//! regardless of how many words it had.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Cell, ColumnDef, Dtype, ForeignKey, RelationalDatabase, Table, TableDef};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UNK: TokenId = 2;
pub const NULL: TokenId = 3;
pub const TAB: TokenId = 4;
pub const COL: TokenId = 5;
pub const VAL: TokenId = 6;

pub const RESERVED_TOKENS: [&str; 7] = ["[PAD]", "[MASK]", "[UNK]", "[NULL]", "[TAB]", "[COL]", "[VAL]"];

pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED_TOKENS.iter().map(|s| s.to_string()).collect()).expect("reserved tokens are valid")
    }

    /// Builds a vocabulary from an ordered token list; the first seven
    /// entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        words(text).map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

pub fn build_vocabulary(corpus: &[RelationalDatabase], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut owned: HashMap<String, usize> = HashMap::new();
    for db in corpus {
        for table in &db.tables {
            let mut texts: Vec<&str> = vec![&table.def.name];
            texts.extend(table.def.columns.iter().map(|c| c.name.as_str()));
            for row in &table.rows {
                texts.extend(row.iter().filter_map(Cell::value));
            }
            for text in texts {
                for w in words(text) {
                    *owned.entry(w.to_string()).or_default() += 1;
                }
            }
        }
    }
    let mut entries: Vec<(String, usize)> = owned
        .into_iter()
        .filter(|(t, n)| *n >= min_freq && !RESERVED_TOKENS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Cell,
    ColumnName,
    TableName,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Cell, MaskKind::ColumnName, MaskKind::TableName];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskTarget {
    Cell { table: usize, row: usize, column: usize },
    ColumnName { table: usize, column: usize },
    TableName { table: usize },
}

impl MaskTarget {
    pub fn table(&self) -> usize {
        match *self {
            MaskTarget::Cell { table, .. } | MaskTarget::ColumnName { table, .. } | MaskTarget::TableName { table } => {
                table
            }
        }
    }

    pub fn kind(&self) -> MaskKind {
        match self {
            MaskTarget::Cell { .. } => MaskKind::Cell,
            MaskTarget::ColumnName { .. } => MaskKind::ColumnName,
            MaskTarget::TableName { .. } => MaskKind::TableName,
        }
    }
}

/// One masked-reconstruction target. `seed` picks the context row when a
/// name target is reconstructed from a single row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSpec {
    pub target: MaskTarget,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(target: MaskTarget) -> Self {
        Self { target, seed: 0 }
    }

    pub fn kind(&self) -> MaskKind {
        self.target.kind()
    }

    pub fn validate(&self, db: &RelationalDatabase) -> Result<()> {
        let table = db
            .tables
            .get(self.target.table())
            .ok_or_else(|| Error::InvalidMaskSpec(format!("table {} out of range", self.target.table())))?;
        match self.target {
            MaskTarget::Cell { row, column, .. } => {
                let cell = table
                    .rows
                    .get(row)
                    .and_then(|r| r.get(column))
                    .ok_or_else(|| Error::InvalidMaskSpec(format!("cell ({row}, {column}) out of range")))?;
                if cell.is_null() {
                    return Err(Error::InvalidMaskSpec("NULL cells are never mask targets".into()));
                }
            }
            MaskTarget::ColumnName { column, .. } if column >= table.def.columns.len() => {
                return Err(Error::InvalidMaskSpec(format!("column {column} out of range")));
            }
            _ => {}
        }
        Ok(())
    }

    /// The text the model has to reconstruct.
    pub fn target_text<'a>(&self, db: &'a RelationalDatabase) -> &'a str {
        let table = &db.tables[self.target.table()];
        match self.target {
            MaskTarget::Cell { row, column, .. } => table.rows[row][column].value().unwrap_or(""),
            MaskTarget::ColumnName { column, .. } => &table.def.columns[column].name,
            MaskTarget::TableName { .. } => &table.def.name,
        }
    }

    pub fn target_tokens(&self, db: &RelationalDatabase, vocab: &Vocabulary) -> Vec<TokenId> {
        vocab.encode_text(self.target_text(db))
    }

    /// Row used when this target is shown to a row-only model.
    pub fn context_row(&self, db: &RelationalDatabase) -> Option<usize> {
        let n = db.tables[self.target.table()].rows.len();
        match self.target {
            MaskTarget::Cell { row, .. } => Some(row),
            _ if n == 0 => None,
            _ => Some((self.seed % n as u64) as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SequenceSource {
    Row(usize),
    ColumnName(usize),
    TableName,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub database: String,
    pub table: String,
    pub source: SequenceSource,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    pub origin: Origin,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub const MIN_SEQ_LEN: usize = 8;

struct Builder<'a> {
    vocab: &'a Vocabulary,
    groups: Vec<(Vec<TokenId>, bool)>,
}

impl<'a> Builder<'a> {
    fn new(vocab: &'a Vocabulary) -> Self {
        Self {
            vocab,
            groups: Vec::new(),
        }
    }

    fn text_or_mask(&self, out: &mut Vec<TokenId>, text: &str, masked: bool) {
        if masked {
            out.push(MASK);
        } else {
            out.extend(words(text).map(|w| self.vocab.id(w)));
        }
    }

    fn table_group(&mut self, name: &str, masked: bool) {
        let mut g = vec![TAB];
        self.text_or_mask(&mut g, name, masked);
        self.groups.push((g, masked));
    }

    fn column_group(&mut self, name: &str, name_masked: bool, value: Option<(&Cell, bool)>) {
        let mut g = vec![COL];
        self.text_or_mask(&mut g, name, name_masked);
        let mut any_mask = name_masked;
        if let Some((cell, value_masked)) = value {
            g.push(VAL);
            match cell {
                Cell::Null if !value_masked => g.push(NULL),
                _ => self.text_or_mask(&mut g, cell.value().unwrap_or(""), value_masked),
            }
            any_mask |= value_masked;
        }
        self.groups.push((g, any_mask));
    }

    /// Drops trailing groups that do not fit. The leading table group is
    /// always kept, hard-truncated if it alone is too long.
    fn finish(self, max_seq_len: usize, mut origin: Origin) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        let mut mask_dropped = false;
        for (i, (g, masked)) in self.groups.into_iter().enumerate() {
            if ids.len() + g.len() <= max_seq_len {
                ids.extend(g);
            } else {
                origin.truncated = true;
                if i == 0 {
                    ids.extend(g.into_iter().take(max_seq_len));
                    mask_dropped |= masked && !ids.contains(&MASK);
                } else {
                    mask_dropped |= masked;
                }
            }
        }
        if mask_dropped {
            return Err(Error::MaskTargetNotInRow(format!(
                "masked target in `{}` was truncated away",
                origin.table
            )));
        }
        let mask_positions = ids
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == MASK).then_some(i))
            .collect();
        Ok(TokenSequence {
            ids,
            mask_positions,
            origin,
        })
    }
}

fn check_seq_len(max_seq_len: usize) -> Result<()> {
    if max_seq_len < MIN_SEQ_LEN {
        return Err(Error::Config(format!("max_seq_len must be at least {MIN_SEQ_LEN}")));
    }
    Ok(())
}

fn table_masked(mask: Option<&MaskSpec>, table: usize) -> bool {
    matches!(mask, Some(MaskSpec { target: MaskTarget::TableName { table: t }, .. }) if *t == table)
}

fn column_masked(mask: Option<&MaskSpec>, table: usize, column: usize) -> bool {
    matches!(mask, Some(MaskSpec { target: MaskTarget::ColumnName { table: t, column: c }, .. })
        if *t == table && *c == column)
}

pub fn serialize_row(
    db: &RelationalDatabase,
    table: usize,
    row: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
    mask: Option<&MaskSpec>,
) -> Result<TokenSequence> {
    check_seq_len(max_seq_len)?;
    let t = db
        .tables
        .get(table)
        .ok_or_else(|| Error::UnknownTable(format!("#{table}")))?;
    let cells = t.rows.get(row).ok_or_else(|| Error::RowOutOfRange {
        table: t.def.name.clone(),
        row,
        len: t.rows.len(),
    })?;
    if let Some(spec) = mask {
        let applies = match spec.target {
            MaskTarget::Cell {
                table: mt,
                row: mr,
                column,
            } => mt == table && mr == row && column < cells.len() && !cells[column].is_null(),
            MaskTarget::ColumnName { table: mt, column } => mt == table && column < cells.len(),
            MaskTarget::TableName { table: mt } => mt == table,
        };
        if !applies {
            return Err(Error::MaskTargetNotInRow(format!(
                "{:?} does not apply to `{}` row {row}",
                spec.target, t.def.name
            )));
        }
    }
    let mut b = Builder::new(vocab);
    b.table_group(&t.def.name, table_masked(mask, table));
    for (c, (col, cell)) in t.def.columns.iter().zip(cells).enumerate() {
        let value_masked =
            matches!(mask, Some(MaskSpec { target: MaskTarget::Cell { column, .. }, .. }) if *column == c);
        b.column_group(&col.name, column_masked(mask, table, c), Some((cell, value_masked)));
    }
    b.finish(
        max_seq_len,
        Origin {
            database: db.name.clone(),
            table: t.def.name.clone(),
            source: SequenceSource::Row(row),
            truncated: false,
        },
    )
}

/// `[TAB] <table> [COL] <column>`, the input for a column node.
pub fn serialize_column_name(
    db: &RelationalDatabase,
    table: usize,
    column: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
    mask: Option<&MaskSpec>,
) -> Result<TokenSequence> {
    check_seq_len(max_seq_len)?;
    let t = &db.tables[table];
    let mut b = Builder::new(vocab);
    b.table_group(&t.def.name, table_masked(mask, table));
    b.column_group(&t.def.columns[column].name, column_masked(mask, table, column), None);
    b.finish(
        max_seq_len,
        Origin {
            database: db.name.clone(),
            table: t.def.name.clone(),
            source: SequenceSource::ColumnName(column),
            truncated: false,
        },
    )
}

/// `[TAB] <table>`, the input for a table node.
pub fn serialize_table_name(
    db: &RelationalDatabase,
    table: usize,
    vocab: &Vocabulary,
    max_seq_len: usize,
    mask: Option<&MaskSpec>,
) -> Result<TokenSequence> {
    check_seq_len(max_seq_len)?;
    let t = &db.tables[table];
    let mut b = Builder::new(vocab);
    b.table_group(&t.def.name, table_masked(mask, table));
    b.finish(
        max_seq_len,
        Origin {
            database: db.name.clone(),
            table: t.def.name.clone(),
            source: SequenceSource::TableName,
            truncated: false,
        },
    )
}

/// Serialization a row-only model sees for `spec`: the owning row (or the
/// seeded context row for name targets), falling back to the bare name
/// sequence for empty tables.
pub fn serialize_for_row_model(
    db: &RelationalDatabase,
    spec: &MaskSpec,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<TokenSequence> {
    let table = spec.target.table();
    match spec.context_row(db) {
        Some(row) => serialize_row(db, table, row, vocab, max_seq_len, Some(spec)),
        None => match spec.target {
            MaskTarget::ColumnName { column, .. } => {
                serialize_column_name(db, table, column, vocab, max_seq_len, Some(spec))
            }
            _ => serialize_table_name(db, table, vocab, max_seq_len, Some(spec)),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRates {
    pub cell_rate: f64,
    pub col_rate: f64,
    pub tab_rate: f64,
}

impl Default for MaskRates {
    fn default() -> Self {
        Self {
            cell_rate: 0.15,
            col_rate: 0.10,
            tab_rate: 0.10,
        }
    }
}

impl MaskRates {
    pub const ALL: MaskRates = MaskRates {
        cell_rate: 1.0,
        col_rate: 1.0,
        tab_rate: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for r in [self.cell_rate, self.col_rate, self.tab_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mask rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Independently selects table names, column names and non-NULL cells.
/// Output order is table by table: name, columns, then cells row-major.
pub fn sample_mask_targets(db: &RelationalDatabase, rates: MaskRates, seed: u64) -> Vec<MaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let draw = |rng: &mut ChaCha8Rng, p: f64, target: MaskTarget, out: &mut Vec<MaskSpec>| {
        let hit = rng.gen_bool(p.clamp(0.0, 1.0));
        let spec_seed = rng.next_u64();
        if hit {
            out.push(MaskSpec {
                target,
                seed: spec_seed,
            });
        }
    };
    for (ti, table) in db.tables.iter().enumerate() {
        draw(&mut rng, rates.tab_rate, MaskTarget::TableName { table: ti }, &mut out);
        for ci in 0..table.def.columns.len() {
            draw(
                &mut rng,
                rates.col_rate,
                MaskTarget::ColumnName { table: ti, column: ci },
                &mut out,
            );
        }
        for (ri, row) in table.rows.iter().enumerate() {
            for (ci, cell) in row.iter().enumerate() {
                if cell.is_null() {
                    continue;
                }
                draw(
                    &mut rng,
                    rates.cell_rate,
                    MaskTarget::Cell {
                        table: ti,
                        row: ri,
                        column: ci,
                    },
                    &mut out,
                );
            }
        }
    }
    out
}

pub const SPLIT_KEY: &str = "__split_key";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerticalSplit {
    pub fragments: Vec<Table>,
    /// Fragment `k + 1` references fragment `k` on the synthetic key.
    pub links: Vec<ForeignKey>,
    pub key_column: Option<String>,
}

/// Splits a wide table into fragments of at most `max_columns` original
/// columns each. Every fragment gets the same synthetic row key as its
/// first column.
pub fn vertical_split(table: &Table, max_columns: usize) -> Result<VerticalSplit> {
    if max_columns == 0 {
        return Err(Error::Config("max_columns must be at least 1".into()));
    }
    let def = &table.def;
    if def.columns.len() <= max_columns {
        return Ok(VerticalSplit {
            fragments: vec![table.clone()],
            links: Vec::new(),
            key_column: None,
        });
    }
    let mut key = SPLIT_KEY.to_string();
    while def.column_index(&key).is_some() {
        key.push('_');
    }
    let n_frag = def.columns.len().div_ceil(max_columns);
    let mut fragments = Vec::with_capacity(n_frag);
    let mut links = Vec::new();
    for k in 0..n_frag {
        let lo = k * max_columns;
        let hi = (lo + max_columns).min(def.columns.len());
        let name = format!("{}__part{}", def.name, k);
        let mut columns = vec![ColumnDef {
            name: key.clone(),
            dtype: Dtype::Integer,
            nullable: false,
        }];
        columns.extend(def.columns[lo..hi].iter().cloned());
        let rows = table
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                std::iter::once(Cell::Value(r.to_string()))
                    .chain(row[lo..hi].iter().cloned())
                    .collect()
            })
            .collect();
        if k > 0 {
            links.push(ForeignKey {
                from_table: name.clone(),
                from_column: key.clone(),
                to_table: format!("{}__part{}", def.name, k - 1),
                to_column: key.clone(),
            });
        }
        fragments.push(Table {
            def: TableDef {
                name,
                columns,
                primary_key: Some(key.clone()),
            },
            rows,
        });
    }
    Ok(VerticalSplit {
        fragments,
        links,
        key_column: Some(key),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::fixtures::{col, row, solar};
    use proptest::prelude::*;

    fn moons_only() -> RelationalDatabase {
        RelationalDatabase {
            name: "m".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "Moons".into(),
                    columns: vec![col("name", Dtype::Text), col("planet", Dtype::Text)],
                    primary_key: None,
                },
                rows: vec![row(&["Io", "Jupiter"])],
            }],
            foreign_keys: vec![],
        }
    }

    fn strs(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<String> {
        vocab.detokenize(&seq.ids).into_iter().map(String::from).collect()
    }

    #[test]
    fn vocabulary_threshold_and_order() {
        let mut db = solar();
        db.tables[0].rows.push(row(&["3", "Jupiter"]));
        db.tables[1].rows[2][0] = Cell::from("Jupiter");
        let v = build_vocabulary(&[db.clone()], 2).unwrap();
        assert!(v.contains("Jupiter"));
        // "1" and "Jupiter" both occur 3 times; ties break lexicographically
        assert_eq!(v.id("1"), RESERVED_TOKENS.len() as TokenId);
        assert_eq!(v.id("Jupiter"), RESERVED_TOKENS.len() as TokenId + 1);
        assert!(!v.contains("Saturn"));
        assert_eq!(v.id("Saturn"), UNK);

        let v = build_vocabulary(&[db.clone()], 1000).unwrap();
        assert_eq!(v, Vocabulary::reserved_only());
        assert!(matches!(build_vocabulary(&[], 1), Err(Error::EmptyCorpus)));

        // same multiset, different arrangement
        let mut shuffled = db.clone();
        shuffled.tables.reverse();
        assert_eq!(
            build_vocabulary(&[db], 1).unwrap(),
            build_vocabulary(&[shuffled], 1).unwrap()
        );
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = build_vocabulary(&[solar()], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next(), Some("[PAD]"));
    }

    #[test]
    fn row_layout_matches_definition() {
        let db = moons_only();
        let v = build_vocabulary(&[db.clone()], 1).unwrap();
        let seq = serialize_row(&db, 0, 0, &v, 64, None).unwrap();
        assert_eq!(
            strs(&v, &seq),
            ["[TAB]", "Moons", "[COL]", "name", "[VAL]", "Io", "[COL]", "planet", "[VAL]", "Jupiter"]
        );
        assert!(seq.mask_positions.is_empty());
        assert!(!seq.origin.truncated);

        let spec = MaskSpec::new(MaskTarget::Cell {
            table: 0,
            row: 0,
            column: 1,
        });
        let seq = serialize_row(&db, 0, 0, &v, 64, Some(&spec)).unwrap();
        assert_eq!(
            strs(&v, &seq),
            ["[TAB]", "Moons", "[COL]", "name", "[VAL]", "Io", "[COL]", "planet", "[VAL]", "[MASK]"]
        );
        assert_eq!(seq.mask_positions, vec![9]);
    }

    #[test]
    fn name_masks_collapse_to_one_token() {
        let mut db = moons_only();
        db.tables[0].def.name = "Jovian Moons".into();
        let v = build_vocabulary(&[db.clone()], 1).unwrap();
        let spec = MaskSpec::new(MaskTarget::TableName { table: 0 });
        let seq = serialize_row(&db, 0, 0, &v, 64, Some(&spec)).unwrap();
        assert_eq!(&strs(&v, &seq)[..3], ["[TAB]", "[MASK]", "[COL]"]);
        assert_eq!(seq.mask_positions, vec![1]);
        let spec = MaskSpec::new(MaskTarget::ColumnName { table: 0, column: 0 });
        let seq = serialize_column_name(&db, 0, 0, &v, 64, Some(&spec)).unwrap();
        assert_eq!(strs(&v, &seq), ["[TAB]", "Jovian", "Moons", "[COL]", "[MASK]"]);
        let seq = serialize_table_name(&db, 0, &v, 64, None).unwrap();
        assert_eq!(strs(&v, &seq), ["[TAB]", "Jovian", "Moons"]);
    }

    #[test]
    fn wide_row_truncates_whole_groups() {
        let columns: Vec<ColumnDef> = (0..40).map(|i| col(&format!("c{i}"), Dtype::Text)).collect();
        let values: Vec<String> = (0..40).map(|i| format!("x{i}")).collect();
        let db = RelationalDatabase {
            name: "w".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "wide test table".into(),
                    columns,
                    primary_key: None,
                },
                rows: vec![values.iter().map(|v| Cell::from(v.as_str())).collect()],
            }],
            foreign_keys: vec![],
        };
        let v = build_vocabulary(&[db.clone()], 1).unwrap();
        let seq = serialize_row(&db, 0, 0, &v, 32, None).unwrap();
        assert_eq!(seq.len(), 32);
        assert!(seq.origin.truncated);
        assert_eq!(seq.ids[seq.len() - 2], VAL);

        let spec = MaskSpec::new(MaskTarget::Cell {
            table: 0,
            row: 0,
            column: 39,
        });
        assert!(matches!(
            serialize_row(&db, 0, 0, &v, 32, Some(&spec)),
            Err(Error::MaskTargetNotInRow(_))
        ));
    }

    #[test]
    fn serialize_errors() {
        let db = solar();
        let v = build_vocabulary(&[db.clone()], 1).unwrap();
        assert!(matches!(
            serialize_row(&db, 1, 7, &v, 32, None),
            Err(Error::RowOutOfRange { row: 7, .. })
        ));
        let other_row = MaskSpec::new(MaskTarget::Cell {
            table: 1,
            row: 1,
            column: 0,
        });
        assert!(matches!(
            serialize_row(&db, 1, 0, &v, 32, Some(&other_row)),
            Err(Error::MaskTargetNotInRow(_))
        ));
        let other_table = MaskSpec::new(MaskTarget::TableName { table: 0 });
        assert!(matches!(
            serialize_row(&db, 1, 0, &v, 32, Some(&other_table)),
            Err(Error::MaskTargetNotInRow(_))
        ));
    }

    #[test]
    fn null_cells_serialize_as_null_token() {
        let mut db = solar();
        db.tables[1].def.columns[1].nullable = true;
        db.tables[1].rows[0][1] = Cell::Null;
        let v = build_vocabulary(&[db.clone()], 1).unwrap();
        let seq = serialize_row(&db, 1, 0, &v, 32, None).unwrap();
        assert_eq!(*seq.ids.last().unwrap(), NULL);
        let masks = sample_mask_targets(&db, MaskRates::ALL, 1);
        assert!(!masks.iter().any(|m| m.target
            == MaskTarget::Cell {
                table: 1,
                row: 0,
                column: 1
            }));
    }

    #[test]
    fn mask_sampling_boundaries() {
        let db = solar();
        let zero = MaskRates {
            cell_rate: 0.0,
            col_rate: 0.0,
            tab_rate: 0.0,
        };
        assert!(sample_mask_targets(&db, zero, 3).is_empty());

        // 5 non-NULL cells, 4 columns, 2 tables
        let mut small = solar();
        small.tables[0].rows.truncate(1);
        small.tables[1].def.columns[1].nullable = true;
        small.tables[1].rows[0][1] = Cell::Null;
        small.tables[1].rows.truncate(2);
        let non_null: usize = small
            .tables
            .iter()
            .flat_map(|t| &t.rows)
            .flatten()
            .filter(|c| !c.is_null())
            .count();
        assert_eq!(non_null, 5);
        assert_eq!(sample_mask_targets(&small, MaskRates::ALL, 9).len(), 11);
        assert_eq!(
            sample_mask_targets(&db, MaskRates::default(), 5),
            sample_mask_targets(&db, MaskRates::default(), 5)
        );
    }

    #[test]
    fn cell_rate_within_binomial_band() {
        // 1000 cells: 10 columns x 100 rows
        let columns: Vec<ColumnDef> = (0..10).map(|i| col(&format!("c{i}"), Dtype::Text)).collect();
        let rows = (0..100)
            .map(|r| (0..10).map(|c| Cell::Value(format!("{r}_{c}"))).collect())
            .collect();
        let db = RelationalDatabase {
            name: "b".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "t".into(),
                    columns,
                    primary_key: None,
                },
                rows,
            }],
            foreign_keys: vec![],
        };
        let rates = MaskRates {
            cell_rate: 0.15,
            col_rate: 0.0,
            tab_rate: 0.0,
        };
        // mean 150, sd = sqrt(1000 * 0.15 * 0.85) ~= 11.3, so 3 sd ~= [116, 184] within [100, 200]
        for seed in 0..20 {
            let n = sample_mask_targets(&db, rates, seed).len();
            assert!((100..=200).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn vertical_split_counts_and_identity() {
        let columns: Vec<ColumnDef> = (0..5).map(|i| col(&format!("c{i}"), Dtype::Text)).collect();
        let table = Table {
            def: TableDef {
                name: "t".into(),
                columns,
                primary_key: None,
            },
            rows: vec![row(&["a", "b", "c", "d", "e"])],
        };
        let split = vertical_split(&table, 2).unwrap();
        let counts: Vec<usize> = split.fragments.iter().map(|f| f.def.columns.len() - 1).collect();
        assert_eq!(counts, [2, 2, 1]);
        assert_eq!(split.links.len(), 2);
        let same = vertical_split(&table, 5).unwrap();
        assert_eq!(same.fragments, vec![table.clone()]);
        assert!(same.key_column.is_none());
        assert!(vertical_split(&table, 0).is_err());
    }

    /// Nested-loop join of all fragments on the key column.
    fn brute_force_join(split: &VerticalSplit) -> Vec<Vec<Cell>> {
        let first = &split.fragments[0];
        let mut out = Vec::new();
        for base in &first.rows {
            let mut joined: Vec<Cell> = base[1..].to_vec();
            for frag in &split.fragments[1..] {
                let mut matches = frag.rows.iter().filter(|r| r[0] == base[0]);
                let m = matches.next().expect("key present in every fragment");
                assert!(matches.next().is_none());
                joined.extend(m[1..].iter().cloned());
            }
            out.push(joined);
        }
        out
    }

    proptest! {
        #[test]
        fn vertical_split_then_join_is_identity(
            n_cols in 1usize..12,
            n_rows in 0usize..8,
            max_columns in 1usize..6,
            null_mask in proptest::collection::vec(any::<bool>(), 96),
        ) {
            let columns: Vec<ColumnDef> = (0..n_cols)
                .map(|i| ColumnDef { name: format!("c{i}"), dtype: Dtype::Text, nullable: true })
                .collect();
            let rows: Vec<Vec<Cell>> = (0..n_rows)
                .map(|r| (0..n_cols)
                    .map(|c| if null_mask[(r * n_cols + c) % 96] { Cell::Null } else { Cell::Value(format!("{r}-{c}")) })
                    .collect())
                .collect();
            let table = Table { def: TableDef { name: "t".into(), columns, primary_key: None }, rows };
            let split = vertical_split(&table, max_columns).unwrap();
            if n_cols <= max_columns {
                prop_assert_eq!(&split.fragments, &vec![table.clone()]);
            } else {
                prop_assert_eq!(split.fragments.len(), n_cols.div_ceil(max_columns));
                for f in &split.fragments {
                    prop_assert!(f.def.columns.len() - 1 <= max_columns);
                }
                prop_assert_eq!(brute_force_join(&split), table.rows.clone());
                let names: Vec<String> = split.fragments.iter()
                    .flat_map(|f| f.def.columns[1..].iter().map(|c| c.name.clone()))
                    .collect();
                let orig: Vec<String> = table.def.columns.iter().map(|c| c.name.clone()).collect();
                prop_assert_eq!(names, orig);
            }
        }

        #[test]
        fn serialization_round_trip_and_single_mask(seed in 0u64..500) {
            let corpus = crate::synth::generate_synthetic_corpus(&crate::synth::SynthSpec {
                n_databases: 1, seed, ..Default::default()
            }).unwrap();
            let db = &corpus[0];
            let v = build_vocabulary(&corpus, 1).unwrap();
            for (ti, t) in db.tables.iter().enumerate() {
                for ri in 0..t.rows.len() {
                    let seq = serialize_row(db, ti, ri, &v, 256, None).unwrap();
                    prop_assert_eq!(&seq, &serialize_row(db, ti, ri, &v, 256, None).unwrap());
                    let toks = v.detokenize(&seq.ids);
                    // parse back: [TAB] name {[COL] c [VAL] v}*
                    prop_assert_eq!(toks[0], "[TAB]");
                    prop_assert_eq!(toks[1], t.def.name.as_str());
                    for (ci, chunk) in toks[2..].chunks(4).enumerate() {
                        prop_assert_eq!(chunk[0], "[COL]");
                        prop_assert_eq!(chunk[1], t.def.columns[ci].name.as_str());
                        prop_assert_eq!(chunk[2], "[VAL]");
                        match &t.rows[ri][ci] {
                            Cell::Value(x) => prop_assert_eq!(chunk[3], x.as_str()),
                            Cell::Null => prop_assert_eq!(chunk[3], "[NULL]"),
                        }
                    }
                }
            }
            for spec in sample_mask_targets(db, MaskRates::ALL, seed) {
                let seq = serialize_for_row_model(db, &spec, &v, 256).unwrap();
                prop_assert_eq!(seq.mask_positions.len(), 1);
                prop_assert_eq!(seq.ids[seq.mask_positions[0]], MASK);
                prop_assert_eq!(seq.ids.iter().filter(|&&t| t == MASK).count(), 1);
            }
        }
    }
}
