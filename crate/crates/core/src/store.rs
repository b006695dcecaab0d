//! In-memory relational databases loaded from a JSON manifest plus one CSV
//! file per table.
//!
//! Cell values are kept as strings. The declared dtype only matters for
//! [`column_statistics`] and for validation that numeric columns parse.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NULL_TOKEN: &str = "__NULL__";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Text,
    Integer,
    Real,
}

impl Dtype {
    pub fn is_numeric(self) -> bool {
        matches!(self, Dtype::Integer | Dtype::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDef {
    pub name: String,
    pub dtype: Dtype,
    #[serde(default)]
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub primary_key: Option<String>,
}

impl TableDef {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn primary_key_index(&self) -> Option<usize> {
        self.primary_key.as_deref().and_then(|pk| self.column_index(pk))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignKey {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Cell {
    Value(String),
    Null,
}

impl Cell {
    pub fn value(&self) -> Option<&str> {
        match self {
            Cell::Value(v) => Some(v),
            Cell::Null => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Value(v.to_string())
    }
}

pub type Row = Vec<Cell>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub def: TableDef,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.def.name
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalDatabase {
    pub name: String,
    pub tables: Vec<Table>,
    pub foreign_keys: Vec<ForeignKey>,
}

/// A foreign key resolved to table/column positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedForeignKey {
    pub from_table: usize,
    pub from_column: usize,
    pub to_table: usize,
    pub to_column: usize,
}

impl RelationalDatabase {
    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.def.name == name)
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.table_index(name)
            .map(|i| &self.tables[i])
            .ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn num_rows(&self) -> usize {
        self.tables.iter().map(|t| t.rows.len()).sum()
    }

    pub fn num_columns(&self) -> usize {
        self.tables.iter().map(|t| t.def.columns.len()).sum()
    }

    pub fn resolve_foreign_key(&self, fk: &ForeignKey) -> Result<ResolvedForeignKey> {
        let from_table = self
            .table_index(&fk.from_table)
            .ok_or_else(|| Error::UnknownTable(fk.from_table.clone()))?;
        let to_table = self
            .table_index(&fk.to_table)
            .ok_or_else(|| Error::UnknownTable(fk.to_table.clone()))?;
        let from_column = self.tables[from_table]
            .def
            .column_index(&fk.from_column)
            .ok_or_else(|| Error::UnknownColumn {
                table: fk.from_table.clone(),
                column: fk.from_column.clone(),
            })?;
        let to_column = self.tables[to_table]
            .def
            .column_index(&fk.to_column)
            .ok_or_else(|| Error::UnknownColumn {
                table: fk.to_table.clone(),
                column: fk.to_column.clone(),
            })?;
        Ok(ResolvedForeignKey {
            from_table,
            from_column,
            to_table,
            to_column,
        })
    }

    pub fn resolved_foreign_keys(&self) -> Result<Vec<ResolvedForeignKey>> {
        self.foreign_keys
            .iter()
            .map(|fk| self.resolve_foreign_key(fk))
            .collect()
    }

    /// Checks every invariant of the relational model.
    pub fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::ManifestParse("database has no tables".into()));
        }
        let mut table_names = HashSet::new();
        for table in &self.tables {
            let def = &table.def;
            if def.name.is_empty() {
                return Err(Error::schema("", None, "empty table name"));
            }
            if !table_names.insert(def.name.as_str()) {
                return Err(Error::schema(&def.name, None, "duplicate table name"));
            }
            if def.columns.is_empty() {
                return Err(Error::schema(&def.name, None, "table has no columns"));
            }
            let mut col_names = HashSet::new();
            for col in &def.columns {
                if col.name.is_empty() {
                    return Err(Error::schema(&def.name, None, "empty column name"));
                }
                if !col_names.insert(col.name.as_str()) {
                    return Err(Error::schema(
                        &def.name,
                        None,
                        format!("duplicate column `{}`", col.name),
                    ));
                }
            }
            if let Some(pk) = &def.primary_key {
                if def.column_index(pk).is_none() {
                    return Err(Error::schema(
                        &def.name,
                        None,
                        format!("primary key `{pk}` is not a column"),
                    ));
                }
            }
            for (r, row) in table.rows.iter().enumerate() {
                if row.len() != def.columns.len() {
                    return Err(Error::schema(
                        &def.name,
                        Some(r),
                        format!("arity {} != {} columns", row.len(), def.columns.len()),
                    ));
                }
                for (cell, col) in row.iter().zip(&def.columns) {
                    match cell {
                        Cell::Null if !col.nullable => {
                            return Err(Error::schema(
                                &def.name,
                                Some(r),
                                format!("NULL in non-nullable column `{}`", col.name),
                            ));
                        }
                        Cell::Value(v) if col.dtype.is_numeric() && parse_numeric(v).is_none() => {
                            return Err(Error::schema(
                                &def.name,
                                Some(r),
                                format!("value `{v}` in column `{}` is not numeric", col.name),
                            ));
                        }
                        _ => {}
                    }
                }
            }
            if let Some(pk) = def.primary_key_index() {
                let mut seen = HashSet::new();
                for (r, row) in table.rows.iter().enumerate() {
                    match &row[pk] {
                        Cell::Null => return Err(Error::schema(&def.name, Some(r), "NULL primary key")),
                        Cell::Value(v) => {
                            if !seen.insert(v.as_str()) {
                                return Err(Error::schema(
                                    &def.name,
                                    Some(r),
                                    format!("duplicate primary key `{v}`"),
                                ));
                            }
                        }
                    }
                }
            }
        }
        for fk in &self.foreign_keys {
            let resolved = self
                .resolve_foreign_key(fk)
                .map_err(|e| Error::schema(&fk.from_table, None, format!("dangling foreign key: {e}")))?;
            let target = &self.tables[resolved.to_table];
            if target.def.primary_key.as_deref() != Some(fk.to_column.as_str()) {
                return Err(Error::schema(
                    &fk.from_table,
                    None,
                    format!(
                        "foreign key target `{}.{}` is not the primary key",
                        fk.to_table, fk.to_column
                    ),
                ));
            }
            let keys: HashSet<&str> = target
                .rows
                .iter()
                .filter_map(|row| row[resolved.to_column].value())
                .collect();
            for (r, row) in self.tables[resolved.from_table].rows.iter().enumerate() {
                if let Some(v) = row[resolved.from_column].value() {
                    if !keys.contains(v) {
                        return Err(Error::schema(
                            &fk.from_table,
                            Some(r),
                            format!(
                                "foreign key `{}` value `{v}` not found in `{}.{}`",
                                fk.from_column, fk.to_table, fk.to_column
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Row index in `to_table` for each row of `from_table` under `fk`, or
    /// `None` for NULL references.
    pub fn fk_targets(&self, fk: &ResolvedForeignKey) -> Vec<Option<usize>> {
        let target = &self.tables[fk.to_table];
        let index: HashMap<&str, usize> = target
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, row)| row[fk.to_column].value().map(|v| (v, i)))
            .collect();
        self.tables[fk.from_table]
            .rows
            .iter()
            .map(|row| row[fk.from_column].value().and_then(|v| index.get(v).copied()))
            .collect()
    }

    /// Writes `manifest.json` plus one CSV per table into `dir`.
    pub fn save(&self, dir: &Path, null_token: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            name: self.name.clone(),
            tables: self
                .tables
                .iter()
                .enumerate()
                .map(|(i, t)| ManifestTable {
                    name: t.def.name.clone(),
                    file: csv_file_name(i, &t.def.name),
                    columns: t.def.columns.clone(),
                    primary_key: t.def.primary_key.clone(),
                })
                .collect(),
            foreign_keys: self.foreign_keys.clone(),
        };
        for (mt, table) in manifest.tables.iter().zip(&self.tables) {
            let path = dir.join(&mt.file);
            let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
            writer
                .write_record(table.def.columns.iter().map(|c| c.name.as_str()))
                .map_err(|e| csv_error(&path, e))?;
            for row in &table.rows {
                writer
                    .write_record(row.iter().map(|c| c.value().unwrap_or(null_token)))
                    .map_err(|e| csv_error(&path, e))?;
            }
            writer.flush().map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::ManifestParse(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Saves each database into `dir/<name>/`.
pub fn save_corpus(corpus: &[RelationalDatabase], dir: &Path, null_token: &str) -> Result<()> {
    for db in corpus {
        db.save(&dir.join(&db.name), null_token)?;
    }
    Ok(())
}

/// Loads every immediate subdirectory of `dir` holding a manifest, in name
/// order.
pub fn load_corpus(dir: &Path, opts: &LoadOptions) -> Result<Vec<RelationalDatabase>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    paths.iter().map(|p| load_database_with(p, opts)).collect()
}

fn csv_file_name(index: usize, table: &str) -> String {
    let safe: String = table
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:02}_{safe}.csv")
}

pub(crate) fn parse_numeric(v: &str) -> Option<f64> {
    v.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    tables: Vec<ManifestTable>,
    #[serde(default)]
    foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTable {
    name: String,
    file: String,
    columns: Vec<ColumnDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    primary_key: Option<String>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::ManifestParse(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub null_token: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            null_token: DEFAULT_NULL_TOKEN.to_string(),
        }
    }
}

/// Loads and validates a database. `manifest_path` may point at the manifest
/// file itself or at the directory holding `manifest.json`.
pub fn load_database(manifest_path: &Path) -> Result<RelationalDatabase> {
    load_database_with(manifest_path, &LoadOptions::default())
}

pub fn load_database_with(manifest_path: &Path, opts: &LoadOptions) -> Result<RelationalDatabase> {
    let manifest_file: PathBuf = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if manifest.tables.is_empty() {
        return Err(Error::ManifestParse("manifest declares no tables".into()));
    }
    let base = manifest_file.parent().unwrap_or_else(|| Path::new("."));

    let mut tables = Vec::with_capacity(manifest.tables.len());
    for mt in manifest.tables {
        let path = base.join(&mt.file);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(&path)
            .map_err(|e| csv_error(&path, e))?;
        let header = reader.headers().map_err(|e| csv_error(&path, e))?.clone();
        let expected: Vec<&str> = mt.columns.iter().map(|c| c.name.as_str()).collect();
        let got: Vec<&str> = header.iter().collect();
        if expected != got {
            return Err(Error::schema(
                &mt.name,
                None,
                format!("CSV header {got:?} does not match manifest columns {expected:?}"),
            ));
        }
        let mut rows = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(&path, e))?;
            if record.len() != mt.columns.len() {
                return Err(Error::schema(
                    &mt.name,
                    Some(r),
                    format!("arity {} != {} columns", record.len(), mt.columns.len()),
                ));
            }
            rows.push(
                record
                    .iter()
                    .map(|v| {
                        if v == opts.null_token {
                            Cell::Null
                        } else {
                            Cell::Value(v.to_string())
                        }
                    })
                    .collect(),
            );
        }
        tables.push(Table {
            def: TableDef {
                name: mt.name,
                columns: mt.columns,
                primary_key: mt.primary_key,
            },
            rows,
        });
    }
    let db = RelationalDatabase {
        name: manifest.name,
        tables,
        foreign_keys: manifest.foreign_keys,
    };
    db.validate()?;
    Ok(db)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub distinct_count: usize,
    pub null_count: usize,
}

pub fn column_statistics(db: &RelationalDatabase, table: &str, column: &str) -> Result<ColumnStats> {
    let t = db.table(table).map_err(|_| Error::UnknownColumn {
        table: table.to_string(),
        column: column.to_string(),
    })?;
    let c = t.def.column_index(column).ok_or_else(|| Error::UnknownColumn {
        table: table.to_string(),
        column: column.to_string(),
    })?;
    let numeric = t.def.columns[c].dtype.is_numeric();
    let mut distinct = HashSet::new();
    let mut null_count = 0;
    let mut min: Option<f64> = None;
    let mut max: Option<f64> = None;
    for row in &t.rows {
        match &row[c] {
            Cell::Null => null_count += 1,
            Cell::Value(v) => {
                distinct.insert(v.as_str());
                if numeric {
                    if let Some(x) = parse_numeric(v) {
                        min = Some(min.map_or(x, |m| m.min(x)));
                        max = Some(max.map_or(x, |m| m.max(x)));
                    }
                }
            }
        }
    }
    Ok(ColumnStats {
        min,
        max,
        distinct_count: distinct.len(),
        null_count,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn write_fixture(dir: &Path) {
        solar().save(dir, DEFAULT_NULL_TOKEN).unwrap();
    }

    #[test]
    fn loads_saved_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let db = load_database(dir.path()).unwrap();
        assert_eq!(db.tables.len(), 2);
        assert_eq!(db.num_rows(), 5);
        assert_eq!(db.foreign_keys.len(), 1);
        assert_eq!(db, solar());
    }

    #[test]
    fn dangling_reference_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = solar();
        db.tables[1].rows[2][1] = Cell::from("9");
        db.save(dir.path(), DEFAULT_NULL_TOKEN).unwrap();
        match load_database(dir.path()) {
            Err(Error::SchemaViolation { table, row, .. }) => {
                assert_eq!(table, "moons");
                assert_eq!(row, Some(2));
            }
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn empty_tables_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"name":"x","tables":[],"foreign_keys":[]}"#,
        )
        .unwrap();
        assert!(matches!(load_database(dir.path()), Err(Error::ManifestParse(_))));
    }

    #[test]
    fn malformed_manifest_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_database(dir.path()), Err(Error::ManifestParse(_))));
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"name":"x","tables":[{"name":"t","file":"t.csv","columns":[{"name":"a","dtype":"text","nullable":false}]}]}"#,
        )
        .unwrap();
        assert!(matches!(load_database(dir.path()), Err(Error::Io { .. })));
        let missing = tempfile::tempdir().unwrap();
        assert!(matches!(load_database(missing.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn duplicate_pk_and_arity() {
        let mut db = solar();
        db.tables[0].rows[1][0] = Cell::from("1");
        assert!(matches!(
            db.validate(),
            Err(Error::SchemaViolation { row: Some(1), .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let planets = dir.path().join("00_planets.csv");
        fs::write(&planets, "id,name\n1,Jupiter\n2\n").unwrap();
        assert!(matches!(
            load_database(dir.path()),
            Err(Error::SchemaViolation { row: Some(1), .. })
        ));
    }

    #[test]
    fn header_must_match_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        fs::write(dir.path().join("00_planets.csv"), "name,id\nJupiter,1\nSaturn,2\n").unwrap();
        assert!(matches!(load_database(dir.path()), Err(Error::SchemaViolation { .. })));
    }

    #[test]
    fn null_marker_round_trips() {
        let mut db = solar();
        db.tables[1].def.columns[1].nullable = true;
        db.tables[1].rows[0][1] = Cell::Null;
        let dir = tempfile::tempdir().unwrap();
        db.save(dir.path(), "NA").unwrap();
        let opts = LoadOptions {
            null_token: "NA".into(),
        };
        let loaded = load_database_with(dir.path(), &opts).unwrap();
        assert_eq!(loaded, db);
    }

    #[test]
    fn statistics_examples() {
        let mk = |dtype, vals: &[Option<&str>]| RelationalDatabase {
            name: "s".into(),
            tables: vec![Table {
                def: TableDef {
                    name: "t".into(),
                    columns: vec![ColumnDef {
                        name: "c".into(),
                        dtype,
                        nullable: true,
                    }],
                    primary_key: None,
                },
                rows: vals
                    .iter()
                    .map(|v| vec![v.map(Cell::from).unwrap_or(Cell::Null)])
                    .collect(),
            }],
            foreign_keys: vec![],
        };
        let db = mk(Dtype::Integer, &[Some("3"), Some("1"), Some("4"), Some("1")]);
        let s = column_statistics(&db, "t", "c").unwrap();
        assert_eq!(
            s,
            ColumnStats {
                min: Some(1.0),
                max: Some(4.0),
                distinct_count: 3,
                null_count: 0
            }
        );
        let db = mk(Dtype::Real, &[None, None]);
        let s = column_statistics(&db, "t", "c").unwrap();
        assert_eq!((s.min, s.max, s.distinct_count, s.null_count), (None, None, 0, 2));
        let db = mk(Dtype::Text, &[Some("a"), Some("b"), Some("a")]);
        let s = column_statistics(&db, "t", "c").unwrap();
        assert_eq!((s.min, s.max, s.distinct_count), (None, None, 2));
        assert!(matches!(
            column_statistics(&db, "t", "zzz"),
            Err(Error::UnknownColumn { .. })
        ));
        assert!(matches!(
            column_statistics(&db, "nope", "c"),
            Err(Error::UnknownColumn { .. })
        ));
    }
}
