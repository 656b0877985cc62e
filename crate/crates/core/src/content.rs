//! Question-relevant database values: keyword spans fuzzy-matched against
//! distinct cell values of text columns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{open_read_only, quote_ident, DataType, DatabaseSchema, SchemaError};

/// Distinct values scanned per column before the column is skipped.
pub const MAX_SCAN_VALUES: usize = 10_000;

const STOP_WORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by",
    "can", "do", "does", "did", "each", "for", "from", "give", "had", "has", "have", "how", "i",
    "in", "is", "it", "its", "list", "many", "me", "much", "of", "on", "or", "please", "show",
    "that", "the", "their", "there", "these", "this", "those", "to", "was", "we", "were", "what",
    "when", "where", "which", "who", "whose", "with", "you",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word.to_lowercase().as_str())
}

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("invalid match config: {0}")]
    Config(String),
    #[error(transparent)]
    Storage(#[from] SchemaError),
    #[error("failed to scan {table}.{column}: {message}")]
    Scan {
        table: String,
        column: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub threshold: f64,
    pub top_k: usize,
    pub max_span_words: usize,
    pub min_keyword_len: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            threshold: 0.85,
            top_k: 2,
            max_span_words: 4,
            min_keyword_len: 3,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), ContentError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(ContentError::Config(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.top_k == 0 {
            return Err(ContentError::Config("top_k must be at least 1".into()));
        }
        if self.max_span_words == 0 {
            return Err(ContentError::Config("max_span_words must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentMatch {
    pub table: String,
    pub column: String,
    pub value: String,
    pub keyword: String,
    pub score: f64,
    #[serde(skip)]
    pub(crate) position: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentMatchSet {
    /// Sorted by table ordinal, column ordinal, descending score, then value.
    pub matches: Vec<ContentMatch>,
    /// Columns skipped during the scan, with the reason.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ContentMatchSet {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Groups values by `(table, column)` preserving set order.
    pub fn by_column(&self) -> Vec<(&str, &str, Vec<&str>)> {
        let mut out: Vec<(&str, &str, Vec<&str>)> = Vec::new();
        for m in &self.matches {
            match out.last_mut() {
                Some((t, c, vals)) if *t == m.table && *c == m.column => vals.push(&m.value),
                _ => out.push((&m.table, &m.column, vec![&m.value])),
            }
        }
        out
    }

    pub fn contains(&self, table: &str, column: &str, value: &str) -> bool {
        self.matches
            .iter()
            .any(|m| m.table == table && m.column == column && m.value == value)
    }
}

/// Pluggable similarity function between a keyword and a stored value.
pub trait ValueMatcher: Send + Sync {
    fn score(&self, keyword: &str, value: &str) -> f64;
}

/// Sequence-matcher ratio over lowercased characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequenceRatio;

impl ValueMatcher for SequenceRatio {
    fn score(&self, keyword: &str, value: &str) -> f64 {
        match_score(keyword, value)
    }
}

fn tokenize(text: &str) -> Vec<&str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\''))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Word n-grams of the question usable as lookup keys.
///
/// A span never starts or ends on a stop word and holds at most
/// `max_span_words` non-stop words, so interior stop words ("Office of
/// Education") are carried along. Output order is by start token, then span
/// length; duplicates keep their first position.
pub fn extract_keywords(question: &str, config: &MatchConfig) -> Vec<String> {
    let tokens = tokenize(question);
    let stop: Vec<bool> = tokens.iter().map(|t| is_stop_word(t)).collect();
    let mut out: Vec<String> = Vec::new();
    for start in 0..tokens.len() {
        if stop[start] {
            continue;
        }
        let mut content_words = 0;
        for end in start..tokens.len() {
            if !stop[end] {
                content_words += 1;
            }
            if content_words > config.max_span_words {
                break;
            }
            if stop[end] {
                continue;
            }
            let span = tokens[start..=end].join(" ");
            if span.chars().count() < config.min_keyword_len {
                continue;
            }
            if !span.chars().any(char::is_alphanumeric) {
                continue;
            }
            if !out.contains(&span) {
                out.push(span);
            }
        }
    }
    out
}

/// Longest common block of `a[alo..ahi]` and `b[blo..bhi]`, earliest in `a`
/// then earliest in `b` among equally long blocks.
fn longest_match(
    a: &[char],
    b: &[char],
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> (usize, usize, usize) {
    let (mut besti, mut bestj, mut bestk) = (alo, blo, 0);
    let width = bhi - blo;
    let mut prev = vec![0usize; width + 1];
    let mut cur = vec![0usize; width + 1];
    for i in alo..ahi {
        for j in blo..bhi {
            let col = j - blo + 1;
            if a[i] == b[j] {
                let k = prev[col - 1] + 1;
                cur[col] = k;
                if k > bestk {
                    besti = i + 1 - k;
                    bestj = j + 1 - k;
                    bestk = k;
                }
            } else {
                cur[col] = 0;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    (besti, bestj, bestk)
}

fn matched_chars(a: &[char], b: &[char]) -> usize {
    let mut total = 0;
    let mut queue = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let (i, j, k) = longest_match(a, b, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        total += k;
        queue.push((alo, i, blo, j));
        queue.push((i + k, ahi, j + k, bhi));
    }
    total
}

/// `2 * M / (|keyword| + |value|)` where `M` counts characters in recursively
/// matched longest common blocks, compared case-insensitively. No junk
/// heuristic is applied. Two empty strings score 1.0.
pub fn match_score(keyword: &str, value: &str) -> f64 {
    let a: Vec<char> = keyword.to_lowercase().chars().collect();
    let b: Vec<char> = value.to_lowercase().chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matched_chars(&a, &b) as f64 / total as f64
}

fn upper_bound(a_len: usize, b_len: usize) -> f64 {
    if a_len + b_len == 0 {
        return 1.0;
    }
    2.0 * a_len.min(b_len) as f64 / (a_len + b_len) as f64
}

/// Distinct values of a column in storage order, or `None` past the cap.
fn scan_column(
    conn: &rusqlite::Connection,
    table: &str,
    column: &str,
) -> Result<Option<Vec<String>>, rusqlite::Error> {
    let sql = format!(
        "SELECT DISTINCT CAST({c} AS TEXT) FROM {t} WHERE {c} IS NOT NULL LIMIT {}",
        MAX_SCAN_VALUES + 1,
        c = quote_ident(column),
        t = quote_ident(table),
    );
    let mut stmt = conn.prepare(&sql)?;
    let values = stmt
        .query_map([], |row| row.get::<_, Option<String>>(0))?
        .filter_map(|r| r.transpose())
        .collect::<Result<Vec<_>, _>>()?;
    Ok((values.len() <= MAX_SCAN_VALUES).then_some(values))
}

/// Matches every keyword of `question` against distinct values of the
/// text columns of `schema`, using [`SequenceRatio`].
pub fn extract_content(
    question: &str,
    schema: &DatabaseSchema,
    config: &MatchConfig,
) -> Result<ContentMatchSet, ContentError> {
    extract_content_with(question, schema, config, &SequenceRatio)
}

pub fn extract_content_with(
    question: &str,
    schema: &DatabaseSchema,
    config: &MatchConfig,
    matcher: &dyn ValueMatcher,
) -> Result<ContentMatchSet, ContentError> {
    config.validate()?;
    let keywords = extract_keywords(question, config);
    let conn = open_read_only(&schema.storage_path)?;
    if keywords.is_empty() {
        return Ok(ContentMatchSet::default());
    }

    let mut warnings = Vec::new();
    let mut columns = Vec::new();
    for (ti, ci, table, column) in schema.iter_columns() {
        if column.data_type != DataType::Text {
            continue;
        }
        let scanned =
            scan_column(&conn, &table.name, &column.name).map_err(|e| ContentError::Scan {
                table: table.name.clone(),
                column: column.name.clone(),
                message: e.to_string(),
            })?;
        match scanned {
            Some(values) => columns.push(((ti, ci), values)),
            None => {
                let msg = format!(
                    "skipped {}.{}: more than {MAX_SCAN_VALUES} distinct values",
                    table.name, column.name
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let mut set = match_against(&keywords, &columns, schema, config, matcher);
    set.warnings = warnings;
    Ok(set)
}

/// Core matching over pre-scanned columns `((table, column), values)`.
///
/// For each keyword the `top_k` best distinct value strings are kept; every
/// column holding one of them contributes a match.
pub(crate) fn match_against(
    keywords: &[String],
    columns: &[((usize, usize), Vec<String>)],
    schema: &DatabaseSchema,
    config: &MatchConfig,
    matcher: &dyn ValueMatcher,
) -> ContentMatchSet {
    // (table, column, value) -> best match seen across keywords
    let mut best: BTreeMap<(usize, usize, String), ContentMatch> = BTreeMap::new();
    for keyword in keywords {
        let klen = keyword.chars().count();
        // value -> (score, holding columns)
        let mut hits: BTreeMap<&str, (f64, Vec<(usize, usize)>)> = BTreeMap::new();
        for (pos, values) in columns {
            for value in values {
                if value.is_empty()
                    || upper_bound(klen, value.chars().count()) < config.threshold
                {
                    continue;
                }
                let score = matcher.score(keyword, value);
                if score >= config.threshold {
                    hits.entry(value.as_str())
                        .or_insert_with(|| (score, Vec::new()))
                        .1
                        .push(*pos);
                }
            }
        }
        let mut ranked: Vec<(&str, f64, Vec<(usize, usize)>)> = hits
            .into_iter()
            .map(|(v, (s, mut cols))| {
                cols.sort_unstable();
                (v, s, cols)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.2[0].cmp(&b.2[0]))
                .then_with(|| a.0.cmp(b.0))
        });
        for (value, score, cols) in ranked.into_iter().take(config.top_k) {
            for (ti, ci) in cols {
                let key = (ti, ci, value.to_string());
                let replace = best.get(&key).is_none_or(|m| score > m.score);
                if replace {
                    best.insert(
                        key,
                        ContentMatch {
                            table: schema.tables[ti].name.clone(),
                            column: schema.tables[ti].columns[ci].name.clone(),
                            value: value.to_string(),
                            keyword: keyword.clone(),
                            score,
                            position: (ti, ci),
                        },
                    );
                }
            }
        }
    }
    let mut matches: Vec<ContentMatch> = best.into_values().collect();
    matches.sort_by(|a, b| {
        a.position
            .cmp(&b.position)
            .then_with(|| b.score.total_cmp(&a.score))
            .then_with(|| a.value.cmp(&b.value))
    });
    ContentMatchSet {
        matches,
        warnings: Vec::new(),
    }
}
