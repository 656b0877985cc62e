//! Per-question prediction: prompt, sample, execute, select.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{consistency_select, cross_paradigm_select_executed, SqlCandidate};
use crate::content::{extract_content, MatchConfig};
use crate::exec::{result_key_with, ComparePolicy, ExecStatus, SqlExecutor};
use crate::llm::{CompletionRequest, LlmClient};
use crate::prompt::{build_prompt, render_instance_body, Demonstration, PromptBundle, PromptStyle};
use crate::schema::{load_question_set, DatabaseSchema, QuestionTask, SchemaError};
use crate::selection::{
    apply_selection, extract_references, retrieve_columns, Embedder, HashingEmbedder, Integration,
    SelectionMode,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown database `{0}`")]
    UnknownDatabase(String),
    #[error("database file missing: {0}")]
    MissingDatabase(PathBuf),
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub integration: Integration,
    /// Columns kept by retrieval.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    10
}

/// One complete pipeline configuration producing one SQL per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmConfig {
    pub id: String,
    #[serde(default)]
    pub style: PromptStyle,
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
    #[serde(default)]
    pub content: bool,
    #[serde(default)]
    pub match_config: MatchConfig,
    #[serde(default = "one")]
    pub num_samples: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_len")]
    pub max_output_len: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub use_weights: bool,
    /// JSON/JSONL question file whose records (with gold SQL) become
    /// demonstrations.
    #[serde(default)]
    pub demonstrations: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_max_len() -> usize {
    512
}

impl ParadigmConfig {
    pub fn new(id: impl Into<String>) -> Self {
        ParadigmConfig {
            id: id.into(),
            style: PromptStyle::default(),
            selection: None,
            content: false,
            match_config: MatchConfig::default(),
            num_samples: 1,
            temperature: 0.0,
            max_output_len: default_max_len(),
            stop_sequences: Vec::new(),
            use_weights: false,
            demonstrations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub sql: String,
    pub status: ExecStatus,
    pub result_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question_id: String,
    pub db_id: String,
    pub chosen_sql: String,
    pub paradigm: String,
    pub candidates: Vec<CandidateRecord>,
    pub all_invalid: bool,
    pub elapsed_ms: u64,
    /// `"ok"` or `"failed"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn failed(task: &QuestionTask, paradigm: &str, error: String, elapsed_ms: u64) -> Self {
        PredictionRecord {
            question_id: task.question_id.clone(),
            db_id: task.db_id.clone(),
            chosen_sql: String::new(),
            paradigm: paradigm.to_string(),
            candidates: Vec::new(),
            all_invalid: true,
            elapsed_ms,
            status: "failed".into(),
            error: Some(error),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status == "failed"
    }
}

/// Shared, read-only state for a batch.
pub struct PipelineContext<'a> {
    pub catalog: HashMap<String, DatabaseSchema>,
    pub client: &'a LlmClient,
    pub timeout: Duration,
    pub lenient: bool,
    /// Preliminary SQL by question id, for program-aided selection.
    pub preliminary: HashMap<String, String>,
    pub embedder: Box<dyn Embedder + 'a>,
    /// When false, `elapsed_ms` is written as 0 so output is reproducible.
    pub record_timing: bool,
    pub seed: Option<u64>,
}

impl<'a> PipelineContext<'a> {
    pub fn new(catalog: Vec<DatabaseSchema>, client: &'a LlmClient) -> Self {
        PipelineContext {
            catalog: catalog.into_iter().map(|s| (s.db_id.clone(), s)).collect(),
            client,
            timeout: crate::exec::DEFAULT_TIMEOUT,
            lenient: false,
            preliminary: HashMap::new(),
            embedder: Box::new(HashingEmbedder::default()),
            record_timing: true,
            seed: None,
        }
    }
}

/// Builds demonstration pairs from a question file with gold SQL.
pub fn load_demonstrations(
    path: &Path,
    catalog: &HashMap<String, DatabaseSchema>,
    style: &PromptStyle,
) -> Result<Vec<Demonstration>, PipelineError> {
    let demo_style = PromptStyle {
        include_content_values: false,
        include_descriptions: crate::prompt::DescriptionMode::None,
        hard_selection: false,
        ..style.clone()
    };
    load_question_set(path)?
        .iter()
        .map(|t| {
            let schema = catalog
                .get(&t.db_id)
                .ok_or_else(|| PipelineError::UnknownDatabase(t.db_id.clone()))?;
            let sql = t
                .gold_sql
                .clone()
                .ok_or_else(|| PipelineError::Stage(format!("demonstration {} has no SQL", t.question_id)))?;
            let input = render_instance_body(schema, t, &demo_style, None, None)
                .map_err(|e| PipelineError::Stage(e.to_string()))?;
            Ok(Demonstration { input, sql })
        })
        .collect()
}

/// Selection, content matching and prompt rendering for one question.
/// `preliminary` is the draft SQL used by program-aided selection.
pub fn prepare_prompt(
    task: &QuestionTask,
    schema: &DatabaseSchema,
    paradigm: &ParadigmConfig,
    demos: &[Demonstration],
    preliminary: Option<&str>,
    embedder: &dyn Embedder,
) -> Result<PromptBundle, PipelineError> {
    let stage = |e: &dyn std::fmt::Display| PipelineError::Stage(e.to_string());

    let mut style = paradigm.style.clone();
    let selection = match &paradigm.selection {
        None => None,
        Some(cfg) => {
            let mut sel = match cfg.mode {
                SelectionMode::GroundTruth => {
                    let gold = task.gold_sql.as_deref().ok_or_else(|| {
                        PipelineError::Stage("ground-truth selection needs gold SQL".into())
                    })?;
                    extract_references(gold, schema, cfg.mode).map_err(|e| stage(&e))?
                }
                SelectionMode::ProgramAided => {
                    let pre = preliminary.ok_or_else(|| {
                        PipelineError::Stage(format!(
                            "no preliminary SQL for question {}",
                            task.question_id
                        ))
                    })?;
                    extract_references(pre, schema, cfg.mode).map_err(|e| stage(&e))?
                }
                SelectionMode::Retrieval => {
                    retrieve_columns(&task.question, schema, embedder, cfg.top_k)
                        .map_err(|e| stage(&e))?
                }
            };
            sel.integration = cfg.integration;
            sel.question_id = Some(task.question_id.clone());
            style = apply_selection(&style, &sel).map_err(|e| stage(&e))?;
            Some(sel)
        }
    };
    let content = if paradigm.content || style.include_content_values {
        style.include_content_values = true;
        Some(extract_content(&task.question, schema, &paradigm.match_config).map_err(|e| stage(&e))?)
    } else {
        None
    };

    build_prompt(schema, task, &style, content.as_ref(), selection.as_ref(), demos).map_err(|e| stage(&e))
}

fn run_inner(
    task: &QuestionTask,
    paradigm: &ParadigmConfig,
    demos: &[Demonstration],
    ctx: &PipelineContext<'_>,
) -> Result<PredictionRecord, PipelineError> {
    let schema = ctx
        .catalog
        .get(&task.db_id)
        .ok_or_else(|| PipelineError::UnknownDatabase(task.db_id.clone()))?;
    if !schema.storage_path.is_file() {
        return Err(PipelineError::MissingDatabase(schema.storage_path.clone()));
    }
    let stage = |e: &dyn std::fmt::Display| PipelineError::Stage(e.to_string());
    let bundle = prepare_prompt(
        task,
        schema,
        paradigm,
        demos,
        ctx.preliminary.get(&task.question_id).map(String::as_str),
        ctx.embedder.as_ref(),
    )?;
    let request = CompletionRequest {
        prompt: bundle.rendered,
        temperature: paradigm.temperature,
        num_samples: paradigm.num_samples,
        max_output_len: paradigm.max_output_len,
        stop_sequences: paradigm.stop_sequences.clone(),
        seed: ctx.seed,
    };
    let response = ctx.client.complete(&request).map_err(|e| stage(&e))?;

    let executor = SqlExecutor::open(&schema.storage_path).map_err(PipelineError::Stage)?;
    // Gold is unknown at prediction time, so results are compared as multisets.
    let policy = ComparePolicy {
        order_sensitive: false,
        lenient: ctx.lenient,
    };
    let candidates: Vec<SqlCandidate> = response
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| SqlCandidate {
            sql: s.text.clone(),
            source: crate::consistency::CandidateSource {
                paradigm_id: paradigm.id.clone(),
                sample_index: i,
            },
            weight: s.logprob.map(f64::exp),
            outcome: Some(executor.execute(&s.text, ctx.timeout)),
        })
        .collect();
    let selected =
        consistency_select(&candidates, paradigm.use_weights, policy).map_err(|e| stage(&e))?;

    let records = candidates
        .iter()
        .map(|c| {
            let outcome = c.outcome.as_ref().expect("executed above");
            CandidateRecord {
                sql: c.sql.clone(),
                status: outcome.status,
                result_digest: result_key_with(outcome, policy).ok().map(|k| k.0),
            }
        })
        .collect();
    Ok(PredictionRecord {
        question_id: task.question_id.clone(),
        db_id: task.db_id.clone(),
        chosen_sql: selected.chosen.sql,
        paradigm: paradigm.id.clone(),
        candidates: records,
        all_invalid: selected.all_invalid,
        elapsed_ms: 0,
        status: "ok".into(),
        error: None,
    })
}

/// Runs one question; every failure becomes a `failed` record.
pub fn run_pipeline(
    task: &QuestionTask,
    paradigm: &ParadigmConfig,
    demos: &[Demonstration],
    ctx: &PipelineContext<'_>,
) -> PredictionRecord {
    let start = Instant::now();
    let mut record = match run_inner(task, paradigm, demos, ctx) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("question {} failed: {e}", task.question_id);
            PredictionRecord::failed(task, &paradigm.id, e.to_string(), 0)
        }
    };
    if ctx.record_timing {
        record.elapsed_ms = start.elapsed().as_millis() as u64;
    }
    record
}

/// Runs a batch on `jobs` worker threads. Output order follows `tasks`.
pub fn run_batch(
    tasks: &[QuestionTask],
    paradigm: &ParadigmConfig,
    demos: &[Demonstration],
    ctx: &PipelineContext<'_>,
    jobs: usize,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
    Ok(pool.install(|| {
        tasks
            .par_iter()
            .map(|t| run_pipeline(t, paradigm, demos, ctx))
            .collect()
    }))
}

/// Merges per-paradigm predictions by re-executing each paradigm's chosen
/// SQL and taking the majority result. Paradigms missing a question, or
/// with a failed record for it, do not vote.
pub fn combine_predictions(
    per_paradigm: &[(String, Vec<PredictionRecord>)],
    catalog: &HashMap<String, DatabaseSchema>,
    priority: &[String],
    timeout: Duration,
    lenient: bool,
) -> Vec<PredictionRecord> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_question: HashMap<String, Vec<(String, String)>> = HashMap::new();
    for (paradigm, records) in per_paradigm {
        for r in records {
            if !by_question.contains_key(&r.question_id) {
                order.push((r.question_id.clone(), r.db_id.clone()));
            }
            let votes = by_question.entry(r.question_id.clone()).or_default();
            if !r.is_failed() {
                votes.push((paradigm.clone(), r.chosen_sql.clone()));
            }
        }
    }
    let policy = ComparePolicy {
        order_sensitive: false,
        lenient,
    };
    order
        .into_iter()
        .map(|(qid, db_id)| {
            let votes = &by_question[&qid];
            let task = QuestionTask {
                question_id: qid.clone(),
                db_id: db_id.clone(),
                question: String::new(),
                hint: None,
                gold_sql: None,
                difficulty: None,
            };
            let Some(schema) = catalog.get(&db_id) else {
                return PredictionRecord::failed(&task, "combined", format!("unknown database `{db_id}`"), 0);
            };
            let executed: Vec<SqlCandidate> = votes
                .iter()
                .map(|(paradigm, sql)| {
                    let mut c = SqlCandidate::new(sql.clone(), paradigm.clone(), 0);
                    c.outcome = Some(crate::exec::execute(sql, schema, timeout));
                    c
                })
                .collect();
            match cross_paradigm_select_executed(&executed, priority, policy) {
                Ok(sel) => PredictionRecord {
                    question_id: qid,
                    db_id,
                    chosen_sql: sel.chosen.sql.clone(),
                    paradigm: sel.chosen.source.paradigm_id.clone(),
                    candidates: executed
                        .iter()
                        .map(|c| {
                            let outcome = c.outcome.as_ref().expect("executed above");
                            CandidateRecord {
                                sql: c.sql.clone(),
                                status: outcome.status,
                                result_digest: result_key_with(outcome, policy).ok().map(|k| k.0),
                            }
                        })
                        .collect(),
                    all_invalid: sel.all_invalid,
                    elapsed_ms: 0,
                    status: "ok".into(),
                    error: None,
                },
                Err(e) => PredictionRecord::failed(&task, "combined", e.to_string(), 0),
            }
        })
        .collect()
}
