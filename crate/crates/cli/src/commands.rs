//! Subcommand implementations. Each takes a loaded [`Workspace`] and, where
//! the model is needed, an [`LlmClient`] built by the caller.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use sqlharness::content::extract_content;
use sqlharness::eval::{self, EvalOptions, MetricsReport};
use sqlharness::llm::{CompletionBackend, HttpBackend, LlmClient, RecordingBackend, ReplayBackend};
use sqlharness::pipeline::{
    combine_predictions, load_demonstrations, prepare_prompt, run_batch, PipelineContext,
    PredictionRecord,
};
use sqlharness::prompt::PromptMode;
use sqlharness::schema::{
    check_questions_against_catalog, load_question_set, load_schema_catalog, CatalogOptions,
    DatabaseSchema, QuestionTask,
};
use sqlharness::selection::{
    aggregate_metrics, extract_references, retrieve_columns, score_selection, HashingEmbedder,
    SampleMetrics, SelectionMetrics, SelectionMode, SelectionSet,
};
use sqlharness::synth::{self, SynthStats};

use crate::config::{BackendKind, ConfigError, RunConfig};

/// Loaded configuration, catalog and question set.
pub struct Workspace {
    pub config: RunConfig,
    pub catalog: HashMap<String, DatabaseSchema>,
    pub tasks: Vec<QuestionTask>,
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self> {
        let mut opts = CatalogOptions::new(config.paths.catalog_format.into());
        if let Some(d) = &config.paths.databases {
            opts = opts.with_databases_dir(d);
        }
        let schemas = load_schema_catalog(&config.paths.catalog, &opts)?;
        let tasks = load_question_set(&config.paths.questions)?;
        check_questions_against_catalog(&tasks, &schemas)?;
        let mut seen = std::collections::HashSet::new();
        if let Some(t) = tasks.iter().find(|t| !seen.insert(t.question_id.as_str())) {
            bail!("duplicate question id `{}`", t.question_id);
        }
        Ok(Workspace {
            catalog: schemas.into_iter().map(|s| (s.db_id.clone(), s)).collect(),
            tasks,
            config,
        })
    }

    pub fn task(&self, question_id: &str) -> Result<&QuestionTask> {
        self.tasks
            .iter()
            .find(|t| t.question_id == question_id)
            .ok_or_else(|| anyhow!("unknown question id `{question_id}`"))
    }

    fn schema(&self, db_id: &str) -> Result<&DatabaseSchema> {
        self.catalog
            .get(db_id)
            .ok_or_else(|| anyhow!("unknown database `{db_id}`"))
    }

    fn output_dir(&self) -> Result<&Path> {
        let dir = &self.config.paths.output;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn preliminary(&self, path: Option<&Path>) -> Result<HashMap<String, String>> {
        match path.or(self.config.paths.preliminary.as_deref()) {
            Some(p) => load_sql_by_id(p),
            None => Ok(HashMap::new()),
        }
    }
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?)
}

/// Builds the completion client described by `[backend]`.
pub fn build_client(config: &RunConfig) -> Result<LlmClient> {
    config.validate_backend()?;
    let b = &config.backend;
    let http = || -> Result<HttpBackend> {
        let endpoint = b.endpoint.clone().ok_or_else(|| ConfigError("missing endpoint".into()))?;
        Ok(HttpBackend::new(
            endpoint,
            config.api_key.clone(),
            b.model.clone(),
            Duration::from_secs(b.request_timeout_secs),
        )?)
    };
    let backend: Box<dyn CompletionBackend> = match b.kind {
        BackendKind::Replay => {
            let path = b.replay_file.as_deref().ok_or_else(|| ConfigError("missing replay_file".into()))?;
            Box::new(ReplayBackend::open(path)?)
        }
        BackendKind::Http => Box::new(http()?),
        BackendKind::Record => {
            let path = b.record_file.as_deref().ok_or_else(|| ConfigError("missing record_file".into()))?;
            Box::new(RecordingBackend::new(Box::new(http()?), path)?)
        }
    };
    let mut client = LlmClient::new(backend).with_retry(b.retry);
    if let Some(rate) = b.requests_per_second {
        client = client.with_rate_limit(b.burst, rate);
    }
    if let Some(n) = b.max_in_flight {
        client = client.with_parallelism(n);
    }
    Ok(client)
}

/// Reads `question_id -> sql` from a JSON array or JSONL file. The SQL is
/// taken from `chosen_sql`, `sql`, `SQL` or `query`, in that order.
pub fn load_sql_by_id(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
            })
            .collect::<Result<_>>()?
    };
    let field = |r: &Value, keys: &[&str]| {
        keys.iter().find_map(|k| match r.get(*k) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        })
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let id = field(r, &["question_id", "id"])
                .ok_or_else(|| anyhow!("{}: record {i} has no question_id", path.display()))?;
            let sql = field(r, &["chosen_sql", "sql", "SQL", "query"])
                .ok_or_else(|| anyhow!("{}: record {i} has no SQL", path.display()))?;
            Ok((id, sql))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?,
        );
        for r in rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Renders the prompt one question would be sent with.
pub fn serialize(
    ws: &Workspace,
    question_id: &str,
    paradigm: Option<&str>,
    mode: Option<PromptMode>,
) -> Result<String> {
    let task = ws.task(question_id)?;
    let schema = ws.schema(&task.db_id)?;
    let mut p = match paradigm {
        Some(id) => ws.config.paradigm(id)?.clone(),
        None => ws
            .config
            .paradigms
            .first()
            .cloned()
            .unwrap_or_else(|| sqlharness::pipeline::ParadigmConfig::new("default")),
    };
    if let Some(m) = mode {
        p.style.mode = m;
    }
    let demos = match &p.demonstrations {
        Some(path) => load_demonstrations(path, &ws.catalog, &p.style)?,
        None => Vec::new(),
    };
    let pre = ws.preliminary(None)?;
    let bundle = prepare_prompt(
        task,
        schema,
        &p,
        &demos,
        pre.get(question_id).map(String::as_str),
        &HashingEmbedder::default(),
    )?;
    Ok(bundle.rendered)
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    /// Paradigm ids to run; empty means all, in config order.
    pub paradigms: Vec<String>,
    pub combine: bool,
    pub resume: bool,
    pub jobs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PredictSummary {
    pub files: Vec<PathBuf>,
    pub records: usize,
    pub failed: usize,
    pub skipped: usize,
}

pub fn prediction_file(output: &Path, paradigm: &str) -> PathBuf {
    output.join(format!("predictions_{paradigm}.jsonl"))
}

/// Completed records of an earlier run. A torn trailing line is ignored.
fn completed_records(path: &Path) -> HashMap<String, PredictionRecord> {
    let Ok(text) = fs::read_to_string(path) else {
        return HashMap::new();
    };
    text.lines()
        .filter_map(|l| serde_json::from_str::<PredictionRecord>(l).ok())
        .filter(|r| !r.is_failed())
        .map(|r| (r.question_id.clone(), r))
        .collect()
}

fn append_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Runs every selected paradigm over the question set.
///
/// Records are appended to `predictions_<id>.jsonl` chunk by chunk so an
/// interrupted run can be resumed; the finished file is rewritten in
/// question order. Fails only when every question of every paradigm failed.
pub fn predict(ws: &Workspace, client: &LlmClient, opts: &PredictOptions) -> Result<PredictSummary> {
    let cfg = &ws.config;
    let paradigms: Vec<_> = if opts.paradigms.is_empty() {
        cfg.paradigms.iter().collect()
    } else {
        opts.paradigms
            .iter()
            .map(|id| cfg.paradigm(id))
            .collect::<Result<_, _>>()?
    };
    if paradigms.is_empty() {
        return Err(ConfigError("no paradigms configured".into()).into());
    }
    if ws.tasks.is_empty() {
        bail!("question set is empty");
    }
    let out = ws.output_dir()?;
    let mut ctx = PipelineContext::new(Vec::new(), client);
    ctx.catalog = ws.catalog.clone();
    ctx.timeout = cfg.evaluation.timeout();
    ctx.lenient = cfg.evaluation.lenient;
    ctx.record_timing = cfg.record_timing;
    ctx.seed = Some(cfg.seed);
    if paradigms
        .iter()
        .any(|p| p.selection.as_ref().is_some_and(|s| s.mode == SelectionMode::ProgramAided))
    {
        ctx.preliminary = ws.preliminary(None)?;
    }

    let jobs = opts.jobs.max(1);
    let chunk = (jobs * 2).max(8);
    let mut summary = PredictSummary::default();
    let mut per_paradigm = Vec::new();
    for p in paradigms {
        let path = prediction_file(out, &p.id);
        let mut done = if opts.resume {
            completed_records(&path)
        } else {
            HashMap::new()
        };
        if !opts.resume || !path.exists() {
            fs::write(&path, "").with_context(|| format!("creating {}", path.display()))?;
        }
        let demos = match &p.demonstrations {
            Some(d) => load_demonstrations(d, &ws.catalog, &p.style)?,
            None => Vec::new(),
        };
        let pending: Vec<QuestionTask> = ws
            .tasks
            .iter()
            .filter(|t| !done.contains_key(&t.question_id))
            .cloned()
            .collect();
        summary.skipped += ws.tasks.len() - pending.len();
        log::info!("paradigm {}: {} questions pending", p.id, pending.len());
        for batch in pending.chunks(chunk) {
            let records = run_batch(batch, p, &demos, &ctx, jobs)?;
            append_records(&path, &records)?;
            done.extend(records.into_iter().map(|r| (r.question_id.clone(), r)));
        }
        let ordered: Vec<PredictionRecord> = ws
            .tasks
            .iter()
            .filter_map(|t| done.remove(&t.question_id))
            .collect();
        write_jsonl(&path, &ordered)?;
        summary.records += ordered.len();
        summary.failed += ordered.iter().filter(|r| r.is_failed()).count();
        summary.files.push(path);
        per_paradigm.push((p.id.clone(), ordered));
    }

    if opts.combine {
        let priority: Vec<String> = per_paradigm.iter().map(|(id, _)| id.clone()).collect();
        let merged = combine_predictions(
            &per_paradigm,
            &ws.catalog,
            &priority,
            ctx.timeout,
            ctx.lenient,
        );
        let path = out.join("predictions_combined.jsonl");
        write_jsonl(&path, &merged)?;
        summary.files.push(path);
    }
    if summary.failed == summary.records {
        bail!("all {} predictions failed", summary.records);
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub predictions: PathBuf,
    /// Overrides `evaluation.test_suite`.
    pub test_suite: Option<bool>,
    /// Metrics JSON destination; defaults to `<output>/metrics_<stem>.json`.
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub jobs: usize,
}

/// Scores a prediction file and writes the metrics JSON (and CSV if asked).
pub fn evaluate(ws: &Workspace, opts: &EvaluateOptions) -> Result<(MetricsReport, PathBuf)> {
    let cfg = &ws.config.evaluation;
    let preds: Vec<(String, String)> = {
        let map = load_sql_by_id(&opts.predictions)?;
        let mut v: Vec<_> = map.into_iter().collect();
        v.sort();
        v
    };
    let with_ts = opts.test_suite.unwrap_or(cfg.test_suite) && ws.config.paths.test_suite.is_some();
    let cases = eval::build_cases(&ws.tasks, &preds, ws.config.paths.test_suite.as_deref())?;
    let eopts = EvalOptions {
        timeout: cfg.timeout(),
        lenient: cfg.lenient,
        strip_distinct: cfg.strip_distinct,
    };
    let report = pool(opts.jobs)?.install(|| eval::report(&cases, &ws.catalog, &eopts, with_ts))?;
    let path = match &opts.out {
        Some(p) => p.clone(),
        None => {
            let stem = opts
                .predictions
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "predictions".into());
            ws.output_dir()?.join(format!("metrics_{stem}.json"))
        }
    };
    write_json(&path, &report)?;
    if let Some(csv) = &opts.csv {
        fs::write(csv, eval::render_csv(&report)).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok((report, path))
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    pub question_id: String,
    pub predicted: SelectionSet,
    pub metrics: SampleMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub mode: SelectionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(flatten)]
    pub metrics: SelectionMetrics,
    /// Questions skipped because gold SQL was missing or unparsable.
    pub skipped: Vec<String>,
}

/// Scores a column selector against the gold-SQL selection of every task.
/// Writes `selection_<mode>.json` and per-question rows to
/// `selection_<mode>.jsonl`.
pub fn select_columns(
    ws: &Workspace,
    mode: SelectionMode,
    top_k: Option<usize>,
    preliminary: Option<&Path>,
    jobs: usize,
) -> Result<SelectionReport> {
    let top_k = top_k.unwrap_or(ws.config.selection.top_k);
    let pre = if mode == SelectionMode::ProgramAided {
        let map = ws.preliminary(preliminary)?;
        if map.is_empty() {
            return Err(ConfigError("program-aided selection needs --preliminary or paths.preliminary".into()).into());
        }
        map
    } else {
        HashMap::new()
    };
    let embedder = HashingEmbedder::default();
    let scored: Vec<Result<SelectionRow, String>> = pool(jobs)?.install(|| {
        ws.tasks
            .par_iter()
            .map(|task| {
                let skip = |why: String| format!("{}: {why}", task.question_id);
                let schema = &ws.catalog[&task.db_id];
                let gold = task.gold_sql.as_deref().ok_or_else(|| skip("no gold SQL".into()))?;
                let truth = extract_references(gold, schema, SelectionMode::GroundTruth)
                    .map_err(|e| skip(e.to_string()))?;
                let mut predicted = match mode {
                    SelectionMode::GroundTruth => truth.clone(),
                    SelectionMode::ProgramAided => {
                        let sql = pre
                            .get(&task.question_id)
                            .ok_or_else(|| skip("no preliminary SQL".into()))?;
                        extract_references(sql, schema, mode).map_err(|e| skip(e.to_string()))?
                    }
                    SelectionMode::Retrieval => retrieve_columns(&task.question, schema, &embedder, top_k)
                        .map_err(|e| skip(e.to_string()))?,
                };
                predicted.question_id = Some(task.question_id.clone());
                Ok(SelectionRow {
                    question_id: task.question_id.clone(),
                    metrics: score_selection(&predicted, &truth),
                    predicted,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in scored {
        match r {
            Ok(row) => rows.push(row),
            Err(why) => {
                log::warn!("skipping {why}");
                skipped.push(why);
            }
        }
    }
    if rows.is_empty() {
        bail!("no question could be scored");
    }
    let samples: Vec<SampleMetrics> = rows.iter().map(|r| r.metrics).collect();
    let report = SelectionReport {
        mode,
        top_k: (mode == SelectionMode::Retrieval).then_some(top_k),
        metrics: aggregate_metrics(&samples),
        skipped,
    };
    let out = ws.output_dir()?;
    let name = mode_name(mode);
    write_json(&out.join(format!("selection_{name}.json")), &report)?;
    write_jsonl(&out.join(format!("selection_{name}.jsonl")), &rows)?;
    Ok(report)
}

pub fn mode_name(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::GroundTruth => "ground_truth",
        SelectionMode::ProgramAided => "program_aided",
        SelectionMode::Retrieval => "retrieval",
    }
}

pub fn render_selection_table(r: &SelectionReport) -> String {
    let pct = |x: f64| format!("{:.2}%", 100.0 * x);
    let label = match r.top_k {
        Some(k) => format!("{} (k={k})", mode_name(r.mode)),
        None => mode_name(r.mode).to_string(),
    };
    format!(
        "{:<22} {:>9} {:>9} {:>9} {:>9}\n{:<22} {:>9} {:>9} {:>9} {:>9.2}\n",
        "selector",
        "recall",
        "precision",
        "F1",
        "avg cols",
        label,
        pct(r.metrics.recall),
        pct(r.metrics.precision),
        pct(r.metrics.f1),
        r.metrics.avg_count
    )
}

#[derive(Debug, Serialize)]
struct ContentRow<'a> {
    question_id: &'a str,
    db_id: &'a str,
    matches: sqlharness::content::ContentMatchSet,
}

/// Content matches as JSONL, one line per question.
pub fn match_content(ws: &Workspace, question_id: Option<&str>) -> Result<String> {
    let tasks: Vec<&QuestionTask> = match question_id {
        Some(id) => vec![ws.task(id)?],
        None => ws.tasks.iter().collect(),
    };
    let mut out = String::new();
    for t in tasks {
        let matches = extract_content(&t.question, ws.schema(&t.db_id)?, &ws.config.content)?;
        out.push_str(&serde_json::to_string(&ContentRow {
            question_id: &t.question_id,
            db_id: &t.db_id,
            matches,
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Generates and filters rewrites for every task with gold SQL. Writes
/// `synthetic_candidates.jsonl`, `synthetic_stats.json` and, when anything
/// was kept, `synthetic_train.jsonl`.
pub fn synthesize(ws: &Workspace, client: &LlmClient, jobs: usize) -> Result<SynthStats> {
    let cfg = &ws.config;
    let tasks: Vec<QuestionTask> = ws.tasks.iter().filter(|t| t.gold_sql.is_some()).cloned().collect();
    if tasks.is_empty() {
        bail!("no question carries gold SQL");
    }
    let results = synth::synthesize_batch(
        &tasks,
        &ws.catalog,
        client,
        &cfg.synthesis,
        cfg.evaluation.timeout(),
        jobs,
    )?;
    let stats = synth::summarize(&results);
    let out = ws.output_dir()?;
    write_jsonl(&out.join("synthetic_candidates.jsonl"), &results)?;
    write_json(&out.join("synthetic_stats.json"), &stats)?;
    let style = cfg
        .paradigms
        .first()
        .map(|p| p.style.clone())
        .unwrap_or_default();
    let records = synth::training_records(&results, &tasks, &ws.catalog, &style)?;
    match synth::emit_training_records(&records, &out.join("synthetic_train.jsonl")) {
        Ok(()) => {}
        Err(synth::SynthError::NothingKept) => log::warn!("no rewrite survived filtering"),
        Err(e) => return Err(e.into()),
    }
    if stats.failed_questions == stats.questions {
        bail!("synthesis failed for every question");
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

/// Re-renders a saved metrics JSON.
pub fn render_report(path: &Path, format: ReportFormat) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: MetricsReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(match format {
        ReportFormat::Table => eval::render_table(&report),
        ReportFormat::Csv => eval::render_csv(&report),
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
    })
}
