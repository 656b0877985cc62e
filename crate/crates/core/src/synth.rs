//! Synthetic SQL rewrites: prompt the model for alternatives to a gold query
//! and keep those that execute to the gold result while being dissimilar
//! enough to add information.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::content::match_score;
use crate::exec::{execute, result_key_with, ComparePolicy};
use crate::llm::{CompletionRequest, LlmClient, LlmError};
use crate::prompt::{render_instance_body, PromptError, PromptStyle};
use crate::schema::{DatabaseSchema, QuestionTask, TableSchema};

/// Placeholders: `{max_rewrites}`, `{schema}`, `{question}`, `{sql}`.
pub const DEFAULT_TEMPLATE: &str = "You will be provided with a list of tables from a SQL database followed by a natural language query related to the database and the original SQL query answering the question. Your job is to understand the natural language queries and generate up to {max_rewrites} different SQL queries using diverse commands from the original query while answering the question correctly. You need to make sure to use the same columns from the original query for the generated query. You will also generate a similarity score between the original and the generated query based on how closer they are syntactically.

Database tables schema are as follows:
{schema}

Question:
{question}

Original SQL query:
{sql}

Output the generated queries and the similarity scores in a json list as follows:
[
  {\"sql\":        // generated query-1,
   \"similarity\": // similarity score (0.0-1.0) for query-1
  },
  {...}
]
";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("question {0} has no gold SQL")]
    MissingGold(String),
    #[error("gold SQL of question {question_id} does not execute: {message}")]
    GoldInvalid { question_id: String, message: String },
    #[error("no JSON array found in model response")]
    NoJsonFound,
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("nothing to emit")]
    NothingKept,
    #[error("unknown database `{0}`")]
    UnknownDatabase(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCandidate {
    pub source_question_id: String,
    pub sql: String,
    /// Similarity to the gold query as reported by the generator.
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub max_rewrites: usize,
    pub similarity_ceiling: f64,
    pub prompt_template: String,
    pub temperature: f64,
    pub max_output_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_rewrites: 3,
            similarity_ceiling: 0.9,
            prompt_template: DEFAULT_TEMPLATE.to_string(),
            temperature: 0.0,
            max_output_len: 1024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.max_rewrites == 0 {
            return Err(SynthError::InvalidConfig("max_rewrites must be at least 1".into()));
        }
        if !(self.similarity_ceiling > 0.0 && self.similarity_ceiling < 1.0) {
            return Err(SynthError::InvalidConfig(format!(
                "similarity_ceiling must lie in (0, 1), got {}",
                self.similarity_ceiling
            )));
        }
        Ok(())
    }
}

fn render_ident(name: &str) -> String {
    if name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.starts_with(|c: char| c.is_ascii_digit())
    {
        name.to_string()
    } else {
        crate::schema::quote_ident(name)
    }
}

fn render_create_table(table: &TableSchema) -> String {
    let n = table.columns.len();
    let lines: Vec<(String, Option<&str>)> = table
        .columns
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let comma = if i + 1 < n { "," } else { "" };
            let head = format!(
                "  {} {}{comma}",
                render_ident(&c.name),
                c.data_type.as_str()
            );
            let desc = c.description.as_deref().map(str::trim).filter(|d| !d.is_empty());
            (head, desc)
        })
        .collect();
    let width = lines
        .iter()
        .filter(|(_, d)| d.is_some())
        .map(|(h, _)| h.chars().count())
        .max()
        .unwrap_or(0);
    let mut out = format!("CREATE TABLE {} (\n", render_ident(&table.name));
    for (head, desc) in lines {
        match desc {
            Some(d) => {
                let pad = width - head.chars().count();
                out.push_str(&format!("{head}{} -- {d}\n", " ".repeat(pad)));
            }
            None => {
                out.push_str(&head);
                out.push('\n');
            }
        }
    }
    out.push_str(");");
    out
}

/// One `CREATE TABLE` block per table, column descriptions as aligned
/// trailing comments.
pub fn render_schema_ddl(schema: &DatabaseSchema) -> String {
    schema
        .tables
        .iter()
        .map(render_create_table)
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_synth_prompt(
    schema: &DatabaseSchema,
    task: &QuestionTask,
    config: &SynthConfig,
) -> Result<String, SynthError> {
    let gold = task
        .gold_sql
        .as_deref()
        .ok_or_else(|| SynthError::MissingGold(task.question_id.clone()))?;
    // Single pass so substituted text is never re-scanned for placeholders.
    let values = [
        ("{max_rewrites}", config.max_rewrites.to_string()),
        ("{schema}", render_schema_ddl(schema)),
        ("{question}", task.question.clone()),
        ("{sql}", gold.to_string()),
    ];
    let mut out = String::new();
    let mut rest = config.prompt_template.as_str();
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (key, value) in &values {
            if tail.starts_with(key) {
                out.push_str(value);
                rest = &tail[key.len()..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub candidates: Vec<SyntheticCandidate>,
    /// Array elements lacking a string `sql` or a `similarity` in [0, 1].
    pub malformed: usize,
}

/// End index (exclusive) of the bracketed span starting at `start`,
/// skipping brackets inside JSON strings.
fn matching_bracket(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_json_array(text: &str) -> Option<Vec<Value>> {
    let bytes = text.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'[')
        .find_map(|(start, _)| {
            let end = matching_bracket(bytes, start)?;
            serde_json::from_str::<Vec<Value>>(&text[start..end]).ok()
        })
}

/// Extracts the first well-formed JSON array from a model response.
pub fn parse_synth_response(
    text: &str,
    source_question_id: &str,
) -> Result<ParsedResponse, SynthError> {
    let items = first_json_array(text).ok_or(SynthError::NoJsonFound)?;
    let mut candidates = Vec::new();
    let mut malformed = 0;
    for item in items {
        let sql = item.get("sql").and_then(Value::as_str).map(str::trim);
        let sim = item.get("similarity").and_then(Value::as_f64);
        match (sql, sim) {
            (Some(sql), Some(s)) if !sql.is_empty() && (0.0..=1.0).contains(&s) => {
                candidates.push(SyntheticCandidate {
                    source_question_id: source_question_id.to_string(),
                    sql: sql.to_string(),
                    similarity: s,
                    correct: None,
                    kept: None,
                })
            }
            _ => malformed += 1,
        }
    }
    if malformed > 0 {
        log::warn!("{source_question_id}: skipped {malformed} malformed rewrite(s)");
    }
    Ok(ParsedResponse {
        candidates,
        malformed,
    })
}

/// Marks each candidate `correct` (same result key as the gold query, with
/// order sensitivity taken from the gold) and `kept` (correct and at or
/// below the ceiling). Returns the annotated list.
pub fn filter_candidates(
    candidates: &[SyntheticCandidate],
    task: &QuestionTask,
    schema: &DatabaseSchema,
    config: &SynthConfig,
    timeout: Duration,
) -> Result<Vec<SyntheticCandidate>, SynthError> {
    let gold = task
        .gold_sql
        .as_deref()
        .ok_or_else(|| SynthError::MissingGold(task.question_id.clone()))?;
    let policy = ComparePolicy::from_gold(gold, false);
    let gold_out = execute(gold, schema, timeout);
    let gold_key = result_key_with(&gold_out, policy).map_err(|_| SynthError::GoldInvalid {
        question_id: task.question_id.clone(),
        message: gold_out.error_message.clone().unwrap_or_default(),
    })?;
    Ok(candidates
        .iter()
        .map(|c| {
            let out = execute(&c.sql, schema, timeout);
            let correct = result_key_with(&out, policy).is_ok_and(|k| k == gold_key);
            let kept = correct && c.similarity <= config.similarity_ceiling;
            log::debug!(
                "{}: reported similarity {:.2}, local ratio {:.2}",
                task.question_id,
                c.similarity,
                match_score(gold, &c.sql)
            );
            SyntheticCandidate {
                correct: Some(correct),
                kept: Some(kept),
                ..c.clone()
            }
        })
        .collect())
}

/// Filtered rewrites of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSynthesis {
    pub question_id: String,
    pub candidates: Vec<SyntheticCandidate>,
    pub malformed: usize,
    /// Set when generation or filtering failed for this question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskSynthesis {
    pub fn kept(&self) -> impl Iterator<Item = &SyntheticCandidate> {
        self.candidates.iter().filter(|c| c.kept == Some(true))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub questions: usize,
    pub failed_questions: usize,
    pub generated: usize,
    pub malformed: usize,
    pub correct: usize,
    pub kept: usize,
    /// Fraction of questions with at least one correct rewrite.
    pub with_correct: f64,
    /// Fraction of questions with at least one kept rewrite.
    pub with_kept: f64,
}

pub fn summarize(results: &[TaskSynthesis]) -> SynthStats {
    let mut s = SynthStats {
        questions: results.len(),
        ..SynthStats::default()
    };
    let (mut any_correct, mut any_kept) = (0usize, 0usize);
    for r in results {
        s.failed_questions += usize::from(r.error.is_some());
        s.generated += r.candidates.len();
        s.malformed += r.malformed;
        let correct = r.candidates.iter().filter(|c| c.correct == Some(true)).count();
        let kept = r.kept().count();
        s.correct += correct;
        s.kept += kept;
        any_correct += usize::from(correct > 0);
        any_kept += usize::from(kept > 0);
    }
    if s.questions > 0 {
        s.with_correct = any_correct as f64 / s.questions as f64;
        s.with_kept = any_kept as f64 / s.questions as f64;
    }
    s
}

/// Prompt, parse and filter rewrites for one question.
pub fn synthesize_task(
    task: &QuestionTask,
    schema: &DatabaseSchema,
    client: &LlmClient,
    config: &SynthConfig,
    timeout: Duration,
) -> Result<TaskSynthesis, SynthError> {
    config.validate()?;
    let prompt = build_synth_prompt(schema, task, config)?;
    let mut req = CompletionRequest::new(prompt);
    req.temperature = config.temperature;
    req.max_output_len = config.max_output_len;
    let resp = client.complete(&req)?;
    let text = resp.samples.first().map(|s| s.text.as_str()).unwrap_or("");
    let parsed = parse_synth_response(text, &task.question_id)?;
    let mut candidates = parsed.candidates;
    if candidates.len() > config.max_rewrites {
        log::warn!(
            "{}: model returned {} rewrites, keeping the first {}",
            task.question_id,
            candidates.len(),
            config.max_rewrites
        );
        candidates.truncate(config.max_rewrites);
    }
    Ok(TaskSynthesis {
        question_id: task.question_id.clone(),
        candidates: filter_candidates(&candidates, task, schema, config, timeout)?,
        malformed: parsed.malformed,
        error: None,
    })
}

/// Runs [`synthesize_task`] over `tasks` on `jobs` threads. Per-question
/// failures are recorded on the result rather than aborting the batch.
pub fn synthesize_batch(
    tasks: &[QuestionTask],
    catalog: &HashMap<String, DatabaseSchema>,
    client: &LlmClient,
    config: &SynthConfig,
    timeout: Duration,
    jobs: usize,
) -> Result<Vec<TaskSynthesis>, SynthError> {
    config.validate()?;
    let run = || {
        tasks
            .par_iter()
            .map(|task| {
                let outcome = catalog
                    .get(&task.db_id)
                    .ok_or_else(|| SynthError::UnknownDatabase(task.db_id.clone()))
                    .and_then(|schema| synthesize_task(task, schema, client, config, timeout));
                outcome.unwrap_or_else(|e| {
                    log::warn!("{}: {e}", task.question_id);
                    TaskSynthesis {
                        question_id: task.question_id.clone(),
                        candidates: Vec::new(),
                        malformed: 0,
                        error: Some(e.to_string()),
                    }
                })
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => Ok(pool.install(run)),
        Err(_) => Ok(run()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(rename = "SQL")]
    pub sql: String,
    /// Serialized model input for the question.
    pub input: String,
    pub synthetic: bool,
}

/// Training pairs for every kept rewrite, ids suffixed `-syn{k}`.
pub fn training_records(
    results: &[TaskSynthesis],
    tasks: &[QuestionTask],
    catalog: &HashMap<String, DatabaseSchema>,
    style: &PromptStyle,
) -> Result<Vec<TrainingRecord>, SynthError> {
    let by_id: HashMap<&str, &QuestionTask> =
        tasks.iter().map(|t| (t.question_id.as_str(), t)).collect();
    let mut out = Vec::new();
    for r in results {
        let Some(task) = by_id.get(r.question_id.as_str()) else {
            continue;
        };
        let schema = catalog
            .get(&task.db_id)
            .ok_or_else(|| SynthError::UnknownDatabase(task.db_id.clone()))?;
        let input = render_instance_body(schema, task, style, None, None)?;
        for (k, c) in r.kept().enumerate() {
            out.push(TrainingRecord {
                question_id: format!("{}-syn{k}", task.question_id),
                db_id: task.db_id.clone(),
                question: task.question.clone(),
                sql: c.sql.clone(),
                input: input.clone(),
                synthetic: true,
            });
        }
    }
    Ok(out)
}

/// Writes records as JSONL, readable by `load_question_set`.
pub fn emit_training_records(records: &[TrainingRecord], path: &Path) -> Result<(), SynthError> {
    if records.is_empty() {
        return Err(SynthError::NothingKept);
    }
    let io = |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| io(e.into()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
