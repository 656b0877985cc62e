//! Database, schema and question data model plus Spider/BIRD loaders.
//!
//! A [`DatabaseSchema`] is immutable once loaded. Table and column ordinals
//! follow source order and are never re-sorted, so every downstream
//! serialization is stable with respect to the ingested file.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Maximum number of distinct sample values kept per column.
pub const MAX_SAMPLE_VALUES: usize = 64;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("integrity error in database `{db_id}`: {message}")]
    Integrity { db_id: String, message: String },
    #[error("question {question_id} references unknown database `{db_id}`")]
    UnknownDatabase { question_id: String, db_id: String },
    #[error("ordinal out of range: {0}")]
    OutOfRange(String),
    #[error("storage error for {path}: {message}")]
    Storage { path: PathBuf, message: String },
}

/// Coarse column type used throughout prompts and content scanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Number,
    Text,
    Time,
    Boolean,
    Others,
}

impl DataType {
    /// Maps a raw type string from Spider or BIRD metadata onto the coarse enum.
    pub fn from_source(raw: &str) -> DataType {
        let lower = raw.trim().to_ascii_lowercase();
        let head = lower.split(['(', ' ']).next().unwrap_or("");
        match head {
            "number" | "integer" | "int" | "real" | "numeric" | "float" | "double" | "decimal"
            | "bigint" | "smallint" | "tinyint" => DataType::Number,
            "text" | "varchar" | "char" | "string" | "nvarchar" | "clob" => DataType::Text,
            "time" | "date" | "datetime" | "timestamp" => DataType::Time,
            "boolean" | "bool" => DataType::Boolean,
            _ => DataType::Others,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Number => "number",
            DataType::Text => "text",
            DataType::Time => "time",
            DataType::Boolean => "boolean",
            DataType::Others => "others",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub table_index: usize,
    pub name: String,
    pub data_type: DataType,
    pub description: Option<String>,
    /// BIRD `value_description`; Spider carries none.
    pub value_description: Option<String>,
    /// Distinct values ordered by frequency, capped at [`MAX_SAMPLE_VALUES`].
    pub sample_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    pub primary_key_columns: Vec<usize>,
}

impl TableSchema {
    /// Case-insensitive, whitespace-trimmed column lookup.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        let wanted = normalize_name(name);
        self.columns
            .iter()
            .position(|c| normalize_name(&c.name) == wanted)
    }
}

/// Foreign key stored by ordinals so that it cannot dangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeyLink {
    pub from_table: usize,
    pub from_column: usize,
    pub to_table: usize,
    pub to_column: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableSchema>,
    pub foreign_keys: Vec<ForeignKeyLink>,
    pub storage_path: PathBuf,
}

pub(crate) fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl DatabaseSchema {
    pub fn table_index(&self, name: &str) -> Option<usize> {
        let wanted = normalize_name(name);
        self.tables
            .iter()
            .position(|t| normalize_name(&t.name) == wanted)
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.table_index(name).map(|i| &self.tables[i])
    }

    pub fn column(&self, table: &str, column: &str) -> Option<&ColumnSpec> {
        let t = self.table(table)?;
        t.column_index(column).map(|c| &t.columns[c])
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Returns `"table.column"` with the original (non-normalized) names.
    pub fn column_identifier(
        &self,
        table_ordinal: usize,
        column_ordinal: usize,
    ) -> Result<String, SchemaError> {
        let table = self.tables.get(table_ordinal).ok_or_else(|| {
            SchemaError::OutOfRange(format!(
                "table ordinal {table_ordinal} (database has {} tables)",
                self.tables.len()
            ))
        })?;
        let column = table.columns.get(column_ordinal).ok_or_else(|| {
            SchemaError::OutOfRange(format!(
                "column ordinal {column_ordinal} (table {} has {} columns)",
                table.name,
                table.columns.len()
            ))
        })?;
        Ok(format!("{}.{}", table.name, column.name))
    }

    /// Iterates `(table ordinal, column ordinal, table, column)` in schema order.
    pub fn iter_columns(&self) -> impl Iterator<Item = (usize, usize, &TableSchema, &ColumnSpec)> {
        self.tables.iter().enumerate().flat_map(|(ti, t)| {
            t.columns
                .iter()
                .enumerate()
                .map(move |(ci, c)| (ti, ci, t, c))
        })
    }

    fn check_integrity(&self) -> Result<(), SchemaError> {
        let fail = |message: String| SchemaError::Integrity {
            db_id: self.db_id.clone(),
            message,
        };
        if self.tables.is_empty() {
            return Err(fail("database has no tables".into()));
        }
        let mut seen_tables = HashMap::new();
        for (ti, table) in self.tables.iter().enumerate() {
            if let Some(prev) = seen_tables.insert(normalize_name(&table.name), ti) {
                return Err(fail(format!(
                    "duplicate table name `{}` (ordinals {prev} and {ti})",
                    table.name
                )));
            }
            let mut seen_cols = HashMap::new();
            for (ci, col) in table.columns.iter().enumerate() {
                if col.name.trim().is_empty() {
                    return Err(fail(format!("empty column name in table `{}`", table.name)));
                }
                if seen_cols.insert(normalize_name(&col.name), ci).is_some() {
                    return Err(fail(format!(
                        "duplicate column `{}` in table `{}`",
                        col.name, table.name
                    )));
                }
            }
            if let Some(&bad) = table
                .primary_key_columns
                .iter()
                .find(|&&c| c >= table.columns.len())
            {
                return Err(fail(format!(
                    "primary key ordinal {bad} out of range in table `{}`",
                    table.name
                )));
            }
        }
        for fk in &self.foreign_keys {
            let ok = self
                .tables
                .get(fk.from_table)
                .is_some_and(|t| fk.from_column < t.columns.len())
                && self
                    .tables
                    .get(fk.to_table)
                    .is_some_and(|t| fk.to_column < t.columns.len());
            if !ok {
                return Err(fail(format!("foreign key {fk:?} does not resolve")));
            }
        }
        Ok(())
    }

    /// Fills `sample_values` of every column from the on-disk database,
    /// most frequent values first, capped at `cap`.
    pub fn load_sample_values(&mut self, cap: usize) -> Result<(), SchemaError> {
        let conn = open_read_only(&self.storage_path)?;
        let storage_err = |e: rusqlite::Error| SchemaError::Storage {
            path: self.storage_path.clone(),
            message: e.to_string(),
        };
        let mut filled = Vec::new();
        for table in &self.tables {
            let mut per_table = Vec::new();
            for col in &table.columns {
                let sql = format!(
                    "SELECT CAST({c} AS TEXT) AS v, COUNT(*) AS n FROM {t} WHERE {c} IS NOT NULL \
                     GROUP BY v ORDER BY n DESC, v LIMIT {cap}",
                    c = quote_ident(&col.name),
                    t = quote_ident(&table.name),
                );
                let mut stmt = conn.prepare(&sql).map_err(storage_err)?;
                let values = stmt
                    .query_map([], |row| row.get::<_, Option<String>>(0))
                    .map_err(storage_err)?
                    .filter_map(|v| v.ok().flatten())
                    .collect::<Vec<_>>();
                per_table.push(values);
            }
            filled.push(per_table);
        }
        for (table, values) in self.tables.iter_mut().zip(filled) {
            for (col, v) in table.columns.iter_mut().zip(values) {
                col.sample_values = v;
            }
        }
        Ok(())
    }

    /// Serializes back into the Spider `tables.json` entry shape.
    pub fn to_spider_json(&self) -> Value {
        let mut column_names = vec![serde_json::json!([-1, "*"])];
        let mut column_types = vec![Value::String("text".into())];
        let mut offsets = Vec::new();
        for (ti, table) in self.tables.iter().enumerate() {
            offsets.push(column_names.len());
            for col in &table.columns {
                column_names.push(serde_json::json!([ti, col.name]));
                column_types.push(Value::String(col.data_type.as_str().into()));
            }
        }
        let primary_keys: Vec<Value> = self
            .tables
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.primary_key_columns.is_empty())
            .map(|(ti, t)| {
                let ids: Vec<usize> = t
                    .primary_key_columns
                    .iter()
                    .map(|&c| offsets[ti] + c)
                    .collect();
                if ids.len() == 1 {
                    serde_json::json!(ids[0])
                } else {
                    serde_json::json!(ids)
                }
            })
            .collect();
        let foreign_keys: Vec<Value> = self
            .foreign_keys
            .iter()
            .map(|fk| {
                serde_json::json!([
                    offsets[fk.from_table] + fk.from_column,
                    offsets[fk.to_table] + fk.to_column
                ])
            })
            .collect();
        serde_json::json!({
            "db_id": self.db_id,
            "table_names_original": self.tables.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
            "table_names": self.tables.iter().map(|t| t.name.to_lowercase()).collect::<Vec<_>>(),
            "column_names_original": column_names,
            "column_types": column_types,
            "primary_keys": primary_keys,
            "foreign_keys": foreign_keys,
        })
    }
}

/// Quotes an identifier for SQLite, preserving names with spaces or parentheses.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

pub(crate) fn open_read_only(path: &Path) -> Result<rusqlite::Connection, SchemaError> {
    if !path.is_file() {
        return Err(SchemaError::Storage {
            path: path.to_path_buf(),
            message: "database file not found".into(),
        });
    }
    rusqlite::Connection::open_with_flags(
        path,
        rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY | rusqlite::OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| SchemaError::Storage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogFormat {
    SpiderTablesJson,
    BirdTablesJson,
}

#[derive(Debug, Clone)]
pub struct CatalogOptions {
    pub format: CatalogFormat,
    /// Directory holding `<db_id>/<db_id>.sqlite`; defaults to `<tables dir>/database`.
    pub databases_dir: Option<PathBuf>,
}

impl CatalogOptions {
    pub fn new(format: CatalogFormat) -> Self {
        CatalogOptions {
            format,
            databases_dir: None,
        }
    }

    pub fn with_databases_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.databases_dir = Some(dir.into());
        self
    }
}

#[derive(Debug, Deserialize)]
struct RawTablesEntry {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
    column_types: Vec<String>,
    #[serde(default)]
    primary_keys: Vec<Value>,
    #[serde(default)]
    foreign_keys: Vec<(usize, usize)>,
}

/// Loads every database entry of a Spider/BIRD `tables.json` file.
pub fn load_schema_catalog(
    path: &Path,
    options: &CatalogOptions,
) -> Result<Vec<DatabaseSchema>, SchemaError> {
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| SchemaError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let entries: Vec<RawTablesEntry> =
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let databases_dir = options.databases_dir.clone().unwrap_or_else(|| {
        path.parent()
            .unwrap_or_else(|| Path::new("."))
            .join("database")
    });

    entries
        .into_iter()
        .map(|entry| {
            let mut schema = schema_from_entry(entry, &databases_dir).map_err(|e| match e {
                SchemaError::Parse { message, .. } => parse_err(message),
                other => other,
            })?;
            if options.format == CatalogFormat::BirdTablesJson {
                attach_bird_descriptions(&mut schema, &databases_dir)?;
            }
            Ok(schema)
        })
        .collect()
}

fn schema_from_entry(
    entry: RawTablesEntry,
    databases_dir: &Path,
) -> Result<DatabaseSchema, SchemaError> {
    let db_id = entry.db_id;
    let parse = |message: String| SchemaError::Parse {
        path: PathBuf::new(),
        message: format!("database `{db_id}`: {message}"),
    };
    if entry.column_types.len() != entry.column_names_original.len() {
        return Err(parse(format!(
            "{} column names but {} column types",
            entry.column_names_original.len(),
            entry.column_types.len()
        )));
    }
    let mut tables: Vec<TableSchema> = entry
        .table_names_original
        .iter()
        .map(|name| TableSchema {
            name: name.clone(),
            columns: Vec::new(),
            primary_key_columns: Vec::new(),
        })
        .collect();

    // Global column id -> (table ordinal, column ordinal); `*` maps to None.
    let mut global = Vec::with_capacity(entry.column_names_original.len());
    for ((table_idx, name), ty) in entry
        .column_names_original
        .iter()
        .zip(entry.column_types.iter())
    {
        if *table_idx < 0 {
            global.push(None);
            continue;
        }
        let ti = *table_idx as usize;
        let table = tables
            .get_mut(ti)
            .ok_or_else(|| parse(format!("column `{name}` references table ordinal {ti}")))?;
        let ci = table.columns.len();
        table.columns.push(ColumnSpec {
            table_index: ti,
            name: name.clone(),
            data_type: DataType::from_source(ty),
            description: None,
            value_description: None,
            sample_values: Vec::new(),
        });
        global.push(Some((ti, ci)));
    }

    let resolve = |id: usize| -> Result<(usize, usize), SchemaError> {
        global
            .get(id)
            .copied()
            .flatten()
            .ok_or_else(|| SchemaError::Integrity {
                db_id: db_id.clone(),
                message: format!("key references unknown column id {id}"),
            })
    };

    for pk in &entry.primary_keys {
        let ids: Vec<usize> = match pk {
            Value::Number(n) => vec![n.as_u64().ok_or_else(|| parse(format!("bad key {n}")))? as usize],
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse(format!("bad composite key {pk}")))?,
            other => return Err(parse(format!("bad primary key entry {other}"))),
        };
        for id in ids {
            let (ti, ci) = resolve(id)?;
            if !tables[ti].primary_key_columns.contains(&ci) {
                tables[ti].primary_key_columns.push(ci);
            }
        }
    }

    let mut foreign_keys = Vec::with_capacity(entry.foreign_keys.len());
    for (from, to) in &entry.foreign_keys {
        let (from_table, from_column) = resolve(*from)?;
        let (to_table, to_column) = resolve(*to)?;
        foreign_keys.push(ForeignKeyLink {
            from_table,
            from_column,
            to_table,
            to_column,
        });
    }

    let storage_path = databases_dir.join(&db_id).join(format!("{db_id}.sqlite"));
    let schema = DatabaseSchema {
        db_id,
        tables,
        foreign_keys,
        storage_path,
    };
    schema.check_integrity()?;
    Ok(schema)
}

/// Reads `<db>/database_description/<table>.csv` sidecars when present.
/// Bytes are decoded lossily since the published sidecars are not clean UTF-8.
fn attach_bird_descriptions(
    schema: &mut DatabaseSchema,
    databases_dir: &Path,
) -> Result<(), SchemaError> {
    let dir = databases_dir.join(&schema.db_id).join("database_description");
    if !dir.is_dir() {
        return Ok(());
    }
    for table in &mut schema.tables {
        let path = dir.join(format!("{}.csv", table.name));
        if !path.is_file() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|source| SchemaError::Io {
            path: path.clone(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        let text = text.trim_start_matches('\u{feff}');
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| SchemaError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?
            .iter()
            .map(normalize_name)
            .collect();
        let field = |name: &str| headers.iter().position(|h| h == name);
        let (Some(name_idx), desc_idx, value_idx) = (
            field("original_column_name"),
            field("column_description"),
            field("value_description"),
        ) else {
            continue;
        };
        for record in reader.records() {
            let record = record.map_err(|e| SchemaError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let Some(ci) = record.get(name_idx).and_then(|n| table.column_index(n)) else {
                continue;
            };
            let clean = |idx: Option<usize>| {
                idx.and_then(|i| record.get(i))
                    .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
                    .filter(|s| !s.is_empty())
            };
            table.columns[ci].description = clean(desc_idx);
            table.columns[ci].value_description = clean(value_idx);
        }
    }
    Ok(())
}

/// Difficulty label as found in Spider (easy..extra) or BIRD (simple..challenging).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    Easy,
    Medium,
    Hard,
    Extra,
    /// Unrecognized label, kept verbatim.
    #[serde(untagged)]
    Other(String),
}

impl Difficulty {
    pub fn parse(label: &str) -> Difficulty {
        match label.trim().to_lowercase().as_str() {
            "simple" => Difficulty::Simple,
            "moderate" => Difficulty::Moderate,
            "challenging" => Difficulty::Challenging,
            "easy" => Difficulty::Easy,
            "medium" => Difficulty::Medium,
            "hard" => Difficulty::Hard,
            "extra" | "extra hard" | "extra_hard" => Difficulty::Extra,
            _ => Difficulty::Other(label.trim().to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
            Difficulty::Other(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTask {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    pub hint: Option<String>,
    pub gold_sql: Option<String>,
    pub difficulty: Option<Difficulty>,
}

/// Loads a question file: a JSON array of records, or JSON Lines.
///
/// Accepted keys: `question` and `db_id` (required), `question_id`,
/// `query`/`SQL`/`sql` for the gold query, `evidence`/`hint`, `difficulty`.
/// Records without an id get their zero-based position.
pub fn load_question_set(path: &Path) -> Result<Vec<QuestionTask>, SchemaError> {
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| SchemaError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let trimmed = text.trim_start();
    let records: Vec<Value> = if trimmed.starts_with('[') || trimmed.is_empty() {
        if trimmed.is_empty() {
            Vec::new()
        } else {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        }
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| parse_err(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| question_from_value(i, r).map_err(|m| parse_err(format!("record {i}: {m}"))))
        .collect()
}

fn question_from_value(index: usize, value: &Value) -> Result<QuestionTask, String> {
    let obj = value.as_object().ok_or("record is not an object")?;
    let text = |keys: &[&str]| -> Option<String> {
        keys.iter().find_map(|k| match obj.get(*k) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        })
    };
    let question = text(&["question"]).ok_or("missing `question`")?;
    if question.trim().is_empty() {
        return Err("empty `question`".into());
    }
    let db_id = text(&["db_id"]).ok_or("missing `db_id`")?;
    Ok(QuestionTask {
        question_id: text(&["question_id", "id"]).unwrap_or_else(|| index.to_string()),
        db_id,
        question,
        hint: text(&["evidence", "hint"]).filter(|h| !h.trim().is_empty()),
        gold_sql: text(&["SQL", "query", "sql"]),
        difficulty: text(&["difficulty", "hardness"]).map(|d| Difficulty::parse(&d)),
    })
}

/// Rejects tasks whose `db_id` is missing from the catalog.
pub fn check_questions_against_catalog(
    tasks: &[QuestionTask],
    catalog: &[DatabaseSchema],
) -> Result<(), SchemaError> {
    for task in tasks {
        if !catalog.iter().any(|s| s.db_id == task.db_id) {
            return Err(SchemaError::UnknownDatabase {
                question_id: task.question_id.clone(),
                db_id: task.db_id.clone(),
            });
        }
    }
    Ok(())
}
