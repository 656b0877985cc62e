//! Table/column selection: SQL reference extraction, embedding retrieval,
//! recall/precision scoring and prompt integration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::prompt::{DescriptionMode, PromptStyle};
use crate::schema::{normalize_name, DataType, DatabaseSchema, ForeignKeyLink, TableSchema};
use crate::sqllex::{tokenize, Token};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no table reference found in SQL: {0}")]
    Unparseable(String),
    #[error("hard selection requires at least one selected column or table")]
    EmptySelection,
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    GroundTruth,
    ProgramAided,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Hard,
    Soft,
}

/// Qualified column reference, serialized as `"table.column"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef {
            table: table.into(),
            column: column.into(),
        }
    }

    fn normalized(&self) -> (String, String) {
        (normalize_name(&self.table), normalize_name(&self.column))
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

impl FromStr for ColumnRef {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (t, c) = s
            .split_once('.')
            .ok_or_else(|| SelectionError::UnknownColumn(s.to_string()))?;
        Ok(ColumnRef::new(t, c))
    }
}

impl Serialize for ColumnRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ColumnRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSet {
    pub db_id: String,
    #[serde(default)]
    pub question_id: Option<String>,
    /// Table names in schema order.
    pub tables: Vec<String>,
    /// Columns in schema order.
    pub columns: Vec<ColumnRef>,
    pub mode: SelectionMode,
    pub integration: Integration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
}

impl SelectionSet {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.columns.is_empty()
    }

    pub fn contains_column(&self, table: &str, column: &str) -> bool {
        let key = (normalize_name(table), normalize_name(column));
        self.columns.iter().any(|c| c.normalized() == key)
    }

    pub fn contains_table(&self, table: &str) -> bool {
        let key = normalize_name(table);
        self.tables.iter().any(|t| normalize_name(t) == key)
    }

    fn from_positions(
        schema: &DatabaseSchema,
        tables: &BTreeSet<usize>,
        columns: &BTreeSet<(usize, usize)>,
        mode: SelectionMode,
    ) -> SelectionSet {
        SelectionSet {
            db_id: schema.db_id.clone(),
            question_id: None,
            tables: tables.iter().map(|&t| schema.tables[t].name.clone()).collect(),
            columns: columns
                .iter()
                .map(|&(t, c)| {
                    ColumnRef::new(&schema.tables[t].name, &schema.tables[t].columns[c].name)
                })
                .collect(),
            mode,
            integration: Integration::Soft,
            scores: None,
        }
    }
}

const CLAUSE_WORDS: &[&str] = &[
    "where", "join", "inner", "left", "right", "full", "outer", "cross", "natural", "on",
    "using", "group", "order", "limit", "union", "intersect", "except", "having", "window",
    "select", "from", "as", "and", "or", "not", "offset", "when", "then", "else", "end",
    "in", "is", "like", "between", "values", "set", "with",
];

fn is_clause_word(tok: &Token) -> bool {
    matches!(tok, Token::Word(w) if CLAUSE_WORDS.contains(&w.to_ascii_lowercase().as_str()))
}

/// Reads `name` or `schema.name` starting at `i`; returns the last part and
/// the index after it.
fn read_qualified_name(tokens: &[Token], i: usize) -> Option<(String, usize)> {
    let mut name = tokens.get(i)?.ident()?.to_string();
    let mut j = i + 1;
    while tokens.get(j) == Some(&Token::Punct('.')) {
        match tokens.get(j + 1).and_then(Token::ident) {
            Some(next) => {
                name = next.to_string();
                j += 2;
            }
            None => break,
        }
    }
    Some((name, j))
}

/// Identifiers referenced by `sql` that resolve against `schema`.
///
/// Tables are the names following `FROM`/`JOIN` (comma lists included);
/// columns are identifiers belonging to a selected table, with
/// alias-qualified references resolved through the alias map. An
/// unqualified name shared by several selected tables is attributed to all.
pub fn extract_references(
    sql: &str,
    schema: &DatabaseSchema,
    mode: SelectionMode,
) -> Result<SelectionSet, SelectionError> {
    let tokens = tokenize(sql);
    let table_lookup: HashMap<String, usize> = schema
        .tables
        .iter()
        .enumerate()
        .map(|(i, t)| (normalize_name(&t.name), i))
        .collect();

    let mut tables = BTreeSet::new();
    let mut aliases: HashMap<String, usize> = HashMap::new();
    let mut declared = vec![false; tokens.len()];
    let mut saw_from = false;

    let mut i = 0;
    while i < tokens.len() {
        if !(tokens[i].is_word("from") || tokens[i].is_word("join")) {
            i += 1;
            continue;
        }
        saw_from = true;
        let in_from = tokens[i].is_word("from");
        let mut j = i + 1;
        loop {
            if tokens.get(j) == Some(&Token::Punct('(')) {
                break;
            }
            let Some((name, after)) = read_qualified_name(&tokens, j) else {
                break;
            };
            if is_clause_word(&tokens[j]) {
                break;
            }
            for d in declared.iter_mut().take(after).skip(j) {
                *d = true;
            }
            let resolved = table_lookup.get(&normalize_name(&name)).copied();
            if let Some(t) = resolved {
                tables.insert(t);
            }
            j = after;
            let alias_at = if tokens.get(j).is_some_and(|t| t.is_word("as")) {
                j + 1
            } else {
                j
            };
            if let Some(tok) = tokens.get(alias_at) {
                if tok.ident().is_some() && !is_clause_word(tok) {
                    declared[alias_at] = true;
                    if let Some(t) = resolved {
                        aliases.insert(normalize_name(tok.ident().unwrap_or_default()), t);
                    }
                    j = alias_at + 1;
                }
            }
            if in_from && tokens.get(j) == Some(&Token::Punct(',')) {
                j += 1;
                continue;
            }
            break;
        }
        i = j.max(i + 1);
    }

    if !saw_from {
        for tok in &tokens {
            if let Some(t) = tok.ident().and_then(|n| table_lookup.get(&normalize_name(n))) {
                tables.insert(*t);
            }
        }
        if tables.is_empty() {
            return Err(SelectionError::Unparseable(sql.to_string()));
        }
    }

    let column_lookup = |t: usize, name: &str| schema.tables[t].column_index(name);
    let mut columns = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let Some(name) = tokens[i].ident() else {
            i += 1;
            continue;
        };
        if declared[i] {
            i += 1;
            continue;
        }
        // qualifier.column
        if tokens.get(i + 1) == Some(&Token::Punct('.')) {
            if let Some(col) = tokens.get(i + 2).and_then(Token::ident) {
                let q = normalize_name(name);
                let owner = aliases.get(&q).or_else(|| table_lookup.get(&q)).copied();
                match owner.and_then(|t| column_lookup(t, col).map(|c| (t, c))) {
                    Some(pos) => {
                        columns.insert(pos);
                    }
                    None => {
                        for &t in &tables {
                            if let Some(c) = column_lookup(t, col) {
                                columns.insert((t, c));
                            }
                        }
                    }
                }
                i += 3;
                continue;
            }
        }
        let is_call = matches!(tokens[i], Token::Word(_))
            && tokens.get(i + 1) == Some(&Token::Punct('('));
        if !is_call {
            for &t in &tables {
                if let Some(c) = column_lookup(t, name) {
                    columns.insert((t, c));
                }
            }
        }
        i += 1;
    }
    tables.extend(columns.iter().map(|&(t, _)| t));

    Ok(SelectionSet::from_positions(schema, &tables, &columns, mode))
}

fn type_label(t: DataType) -> &'static str {
    match t {
        DataType::Number => "NUMBER",
        DataType::Text => "STRING",
        DataType::Time => "TIME",
        DataType::Boolean => "BOOLEAN",
        DataType::Others => "OTHERS",
    }
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
}

/// Descriptive sentence embedded for retrieval. The description and value
/// clauses are left out when empty.
pub fn build_column_sentence(
    schema: &DatabaseSchema,
    table: &str,
    column: &str,
) -> Result<String, SelectionError> {
    let t = schema
        .table(table)
        .ok_or_else(|| SelectionError::UnknownColumn(format!("{table}.{column}")))?;
    let c = t
        .column_index(column)
        .map(|i| &t.columns[i])
        .ok_or_else(|| SelectionError::UnknownColumn(format!("{table}.{column}")))?;
    let mut s = format!(
        "Column name {} of type {} from the table {}.",
        quote(&c.name),
        quote(type_label(c.data_type)),
        quote(&t.name)
    );
    if let Some(d) = c.description.as_deref().filter(|d| !d.trim().is_empty()) {
        s.push_str(&format!(" Description: {}.", quote(d)));
    }
    if !c.sample_values.is_empty() {
        let examples: Vec<String> = c.sample_values.iter().take(3).map(|v| quote(v)).collect();
        s.push_str(&format!(" Value examples: {}.", examples.join(", ")));
    }
    Ok(s)
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, SelectionError>;
}

/// Feature-hashing vectorizer over lowercased character trigrams of the
/// space-padded text (FNV-1a, 64-bit), L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 512 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, SelectionError> {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dim];
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            v[(fnv1a(gram.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Every column ranked by cosine similarity to the question, ties in schema
/// order. Returned as `(table ordinal, column ordinal, score)`.
pub fn rank_columns(
    question: &str,
    schema: &DatabaseSchema,
    embedder: &dyn Embedder,
) -> Result<Vec<(usize, usize, f64)>, SelectionError> {
    let q = embedder.embed(question)?;
    let mut scored = Vec::with_capacity(schema.column_count());
    for (ti, ci, t, c) in schema.iter_columns() {
        let sentence = build_column_sentence(schema, &t.name, &c.name)?;
        let v = embedder.embed(&sentence)?;
        scored.push((ti, ci, cosine(&q, &v)));
    }
    // stable sort keeps schema order among equal scores
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    Ok(scored)
}

pub fn retrieve_columns(
    question: &str,
    schema: &DatabaseSchema,
    embedder: &dyn Embedder,
    top_k: usize,
) -> Result<SelectionSet, SelectionError> {
    if top_k == 0 {
        return Err(SelectionError::InvalidTopK);
    }
    let ranked = rank_columns(question, schema, embedder)?;
    let kept = &ranked[..top_k.min(ranked.len())];
    let columns: BTreeSet<(usize, usize)> = kept.iter().map(|&(t, c, _)| (t, c)).collect();
    let tables: BTreeSet<usize> = kept.iter().map(|&(t, _, _)| t).collect();
    let mut set = SelectionSet::from_positions(schema, &tables, &columns, SelectionMode::Retrieval);
    set.scores = Some(
        kept.iter()
            .map(|&(t, c, s)| (schema.column_identifier(t, c).unwrap_or_default(), s))
            .collect(),
    );
    Ok(set)
}

/// Per-sample scores. `recall` is `None` when the truth set is empty and the
/// prediction is not; `f1` is `None` in the same case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub recall: Option<f64>,
    pub precision: f64,
    pub f1: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub avg_count: f64,
    pub samples: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn score_selection(predicted: &SelectionSet, truth: &SelectionSet) -> SampleMetrics {
    let pred: BTreeSet<_> = predicted.columns.iter().map(ColumnRef::normalized).collect();
    let gold: BTreeSet<_> = truth.columns.iter().map(ColumnRef::normalized).collect();
    let hit = pred.intersection(&gold).count() as f64;
    let count = pred.len();
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => SampleMetrics {
            recall: Some(1.0),
            precision: 1.0,
            f1: Some(1.0),
            count,
        },
        (false, true) => SampleMetrics {
            recall: None,
            precision: 0.0,
            f1: None,
            count,
        },
        (true, false) => SampleMetrics {
            recall: Some(0.0),
            precision: 0.0,
            f1: Some(0.0),
            count,
        },
        (false, false) => {
            let recall = hit / gold.len() as f64;
            let precision = hit / pred.len() as f64;
            SampleMetrics {
                recall: Some(recall),
                precision,
                f1: Some(f1_score(precision, recall)),
                count,
            }
        }
    }
}

/// Averages per-sample metrics; undefined recall/F1 samples are excluded
/// from those two averages only.
pub fn aggregate_metrics(samples: &[SampleMetrics]) -> SelectionMetrics {
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    SelectionMetrics {
        recall: mean(samples.iter().filter_map(|s| s.recall).collect()),
        precision: mean(samples.iter().map(|s| s.precision).collect()),
        f1: mean(samples.iter().filter_map(|s| s.f1).collect()),
        avg_count: mean(samples.iter().map(|s| s.count as f64).collect()),
        samples: samples.len(),
    }
}

/// Adjusts a prompt style for a selection: hard integration filters the
/// schema block, soft integration restricts descriptions to the selection.
pub fn apply_selection(
    style: &PromptStyle,
    selection: &SelectionSet,
) -> Result<PromptStyle, SelectionError> {
    let mut out = style.clone();
    match selection.integration {
        Integration::Hard => {
            if selection.is_empty() {
                return Err(SelectionError::EmptySelection);
            }
            out.hard_selection = true;
        }
        Integration::Soft => out.include_descriptions = DescriptionMode::Selected,
    }
    Ok(out)
}

/// Schema reduced to the selection. Selected tables without any selected
/// column keep their primary key (or first column); keys whose endpoints
/// were dropped disappear.
pub fn restrict_schema(schema: &DatabaseSchema, selection: &SelectionSet) -> DatabaseSchema {
    let mut table_map = HashMap::new();
    let mut column_maps: Vec<HashMap<usize, usize>> = Vec::new();
    let mut tables = Vec::new();
    for (ti, table) in schema.tables.iter().enumerate() {
        let mut keep: Vec<usize> = (0..table.columns.len())
            .filter(|&ci| selection.contains_column(&table.name, &table.columns[ci].name))
            .collect();
        if keep.is_empty() {
            if !selection.contains_table(&table.name) {
                continue;
            }
            keep = if table.primary_key_columns.is_empty() {
                vec![0]
            } else {
                let mut pk = table.primary_key_columns.clone();
                pk.sort_unstable();
                pk
            };
        }
        let map: HashMap<usize, usize> = keep.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let new_index = tables.len();
        tables.push(TableSchema {
            name: table.name.clone(),
            columns: keep
                .iter()
                .map(|&ci| {
                    let mut c = table.columns[ci].clone();
                    c.table_index = new_index;
                    c
                })
                .collect(),
            primary_key_columns: table
                .primary_key_columns
                .iter()
                .filter_map(|c| map.get(c).copied())
                .collect(),
        });
        table_map.insert(ti, new_index);
        column_maps.push(map);
    }
    let resolve = |t: usize, c: usize| {
        let nt = *table_map.get(&t)?;
        let nc = *column_maps[nt].get(&c)?;
        Some((nt, nc))
    };
    let foreign_keys = schema
        .foreign_keys
        .iter()
        .filter_map(|fk| {
            let (from_table, from_column) = resolve(fk.from_table, fk.from_column)?;
            let (to_table, to_column) = resolve(fk.to_table, fk.to_column)?;
            Some(ForeignKeyLink {
                from_table,
                from_column,
                to_table,
                to_column,
            })
        })
        .collect();
    DatabaseSchema {
        db_id: schema.db_id.clone(),
        tables,
        foreign_keys,
        storage_path: schema.storage_path.clone(),
    }
}
