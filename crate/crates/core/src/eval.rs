//! Execution accuracy (EX) and test-suite accuracy (TS) with difficulty
//! breakdowns.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{execute_at, result_key_with, ComparePolicy, ExecStatus};
use crate::schema::{DatabaseSchema, QuestionTask};
use crate::sqllex::strip_distinct;

pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("refusing to evaluate zero cases")]
    Empty,
    #[error("case {0} has no gold SQL")]
    MissingGold(String),
    #[error("case {0} has no augmented databases")]
    NoAugmented(String),
    #[error("predictions missing for {missing:?}; predictions without a case: {unknown:?}")]
    MissingPrediction {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("unknown database `{0}`")]
    UnknownDatabase(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub task: QuestionTask,
    pub predicted_sql: String,
    pub augmented_db_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub timeout: Duration,
    pub lenient: bool,
    /// Strip `SELECT DISTINCT` from both queries before comparing.
    pub strip_distinct: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            timeout: crate::exec::DEFAULT_TIMEOUT,
            lenient: false,
            strip_distinct: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExClass {
    Pass,
    Mismatch,
    PredError,
    PredTimeout,
    GoldInvalid,
}

impl ExClass {
    pub fn passed(self) -> bool {
        self == ExClass::Pass
    }

    pub fn pred_invalid(self) -> bool {
        matches!(self, ExClass::PredError | ExClass::PredTimeout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExVerdict {
    pub pass: bool,
    pub class: ExClass,
    pub detail: Option<String>,
}

fn ex_on(db: &Path, gold: &str, pred: &str, opts: &EvalOptions) -> ExVerdict {
    let (gold, pred) = if opts.strip_distinct {
        (strip_distinct(gold), strip_distinct(pred))
    } else {
        (gold.to_string(), pred.to_string())
    };
    let policy = ComparePolicy::from_gold(&gold, opts.lenient);
    let g = execute_at(&gold, db, opts.timeout);
    let Ok(gk) = result_key_with(&g, policy) else {
        return ExVerdict {
            pass: false,
            class: ExClass::GoldInvalid,
            detail: g.error_message,
        };
    };
    let p = execute_at(&pred, db, opts.timeout);
    let class = match p.status {
        ExecStatus::Error => ExClass::PredError,
        ExecStatus::Timeout => ExClass::PredTimeout,
        ExecStatus::Ok => match result_key_with(&p, policy) {
            Ok(pk) if pk == gk => ExClass::Pass,
            _ => ExClass::Mismatch,
        },
    };
    ExVerdict {
        pass: class.passed(),
        class,
        detail: p.error_message,
    }
}

fn gold_of(case: &EvalCase) -> Result<&str, EvalError> {
    case.task
        .gold_sql
        .as_deref()
        .ok_or_else(|| EvalError::MissingGold(case.task.question_id.clone()))
}

/// EX on the case's original database.
pub fn eval_ex(
    case: &EvalCase,
    schema: &DatabaseSchema,
    opts: &EvalOptions,
) -> Result<ExVerdict, EvalError> {
    Ok(ex_on(&schema.storage_path, gold_of(case)?, &case.predicted_sql, opts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsVerdict {
    pub pass: bool,
    /// Original database first, then each augmented copy.
    pub per_db: Vec<(PathBuf, ExClass)>,
    /// Set when a copy could not be opened; the case is then neither
    /// passed nor failed.
    pub unevaluable: Option<String>,
}

/// TS: EX must pass on the original and on every augmented copy.
pub fn eval_ts(
    case: &EvalCase,
    schema: &DatabaseSchema,
    opts: &EvalOptions,
) -> Result<TsVerdict, EvalError> {
    let gold = gold_of(case)?;
    if case.augmented_db_paths.is_empty() {
        return Err(EvalError::NoAugmented(case.task.question_id.clone()));
    }
    if let Some(missing) = case.augmented_db_paths.iter().find(|p| !p.is_file()) {
        return Ok(TsVerdict {
            pass: false,
            per_db: Vec::new(),
            unevaluable: Some(format!("missing test-suite copy {}", missing.display())),
        });
    }
    let per_db: Vec<(PathBuf, ExClass)> = std::iter::once(&schema.storage_path)
        .chain(case.augmented_db_paths.iter())
        .map(|db| (db.clone(), ex_on(db, gold, &case.predicted_sql, opts).class))
        .collect();
    Ok(TsVerdict {
        pass: per_db.iter().all(|(_, c)| c.passed()),
        per_db,
        unevaluable: None,
    })
}

/// Everything the report needs about one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseVerdict {
    pub question_id: String,
    pub difficulty: Option<String>,
    pub ex: ExClass,
    /// `None` when TS is not run; `Some(None)` when unevaluable.
    pub ts: Option<Option<bool>>,
}

impl CaseVerdict {
    /// Derives a verdict from per-database EX classes (original first).
    pub fn from_db_classes(
        question_id: impl Into<String>,
        difficulty: Option<String>,
        classes: &[ExClass],
    ) -> CaseVerdict {
        let ex = classes.first().copied().unwrap_or(ExClass::GoldInvalid);
        let ts = (classes.len() > 1).then(|| Some(classes.iter().all(|c| c.passed())));
        CaseVerdict {
            question_id: question_id.into(),
            difficulty,
            ex,
            ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyStats {
    pub count: usize,
    pub ex: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    /// Cases with a runnable gold query; the denominator of every ratio.
    pub evaluated: usize,
    pub ex: f64,
    pub ts: Option<f64>,
    pub invalid_rate: f64,
    pub per_difficulty: BTreeMap<String, DifficultyStats>,
    pub failures: Vec<Failure>,
    pub gold_invalid: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_name(c: ExClass) -> &'static str {
    match c {
        ExClass::Pass => "pass",
        ExClass::Mismatch => "mismatch",
        ExClass::PredError => "pred_error",
        ExClass::PredTimeout => "pred_timeout",
        ExClass::GoldInvalid => "gold_invalid",
    }
}

/// Aggregates verdicts. Gold-invalid cases are listed and excluded from
/// every denominator; TS-unevaluable cases are excluded from TS only.
/// Output is independent of input order.
pub fn aggregate(verdicts: &[CaseVerdict]) -> Result<MetricsReport, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted: Vec<&CaseVerdict> = verdicts.iter().collect();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));

    #[derive(Default)]
    struct Tally {
        count: usize,
        ex: usize,
        ts_den: usize,
        ts: usize,
        ts_run: bool,
    }
    let mut overall = Tally::default();
    let mut invalid = 0;
    let mut buckets: BTreeMap<String, Tally> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut gold_invalid = Vec::new();

    for v in sorted {
        if v.ex == ExClass::GoldInvalid {
            gold_invalid.push(v.question_id.clone());
            failures.push(Failure {
                id: v.question_id.clone(),
                class: "gold_invalid".into(),
            });
            continue;
        }
        let label = v.difficulty.clone().unwrap_or_else(|| UNLABELED.into());
        let bucket = buckets.entry(label).or_default();
        for t in [&mut overall, bucket] {
            t.count += 1;
            t.ex += usize::from(v.ex.passed());
            if let Some(ts) = v.ts {
                t.ts_run = true;
                if let Some(pass) = ts {
                    t.ts_den += 1;
                    t.ts += usize::from(pass && v.ex.passed());
                }
            }
        }
        if v.ex.pred_invalid() {
            invalid += 1;
        }
        if !v.ex.passed() {
            failures.push(Failure {
                id: v.question_id.clone(),
                class: class_name(v.ex).into(),
            });
        } else {
            match v.ts {
                Some(Some(false)) => failures.push(Failure {
                    id: v.question_id.clone(),
                    class: "ts_mismatch".into(),
                }),
                Some(None) => failures.push(Failure {
                    id: v.question_id.clone(),
                    class: "ts_unevaluable".into(),
                }),
                _ => {}
            }
        }
    }

    let ts_of = |t: &Tally| t.ts_run.then(|| ratio(t.ts, t.ts_den));
    Ok(MetricsReport {
        total: verdicts.len(),
        evaluated: overall.count,
        ex: ratio(overall.ex, overall.count),
        ts: ts_of(&overall),
        invalid_rate: ratio(invalid, overall.count),
        per_difficulty: buckets
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    DifficultyStats {
                        count: t.count,
                        ex: ratio(t.ex, t.count),
                        ts: ts_of(t),
                    },
                )
            })
            .collect(),
        failures,
        gold_invalid,
    })
}

/// Test-suite copies for a database: every `*.sqlite` file in
/// `<suite_dir>/<db_id>/`, sorted by name.
pub fn suite_copies(suite_dir: &Path, db_id: &str) -> Vec<PathBuf> {
    let dir = suite_dir.join(db_id);
    let Ok(entries) = std::fs::read_dir(&dir) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sqlite"))
        .collect();
    out.sort();
    out
}

/// Pairs tasks with predicted SQL by question id. Every task needs a
/// prediction and every prediction needs a task.
pub fn build_cases(
    tasks: &[QuestionTask],
    predictions: &[(String, String)],
    suite_dir: Option<&Path>,
) -> Result<Vec<EvalCase>, EvalError> {
    let by_id: HashMap<&str, &str> = predictions
        .iter()
        .map(|(id, sql)| (id.as_str(), sql.as_str()))
        .collect();
    let task_ids: HashSet<&str> = tasks.iter().map(|t| t.question_id.as_str()).collect();
    let missing: Vec<String> = tasks
        .iter()
        .filter(|t| !by_id.contains_key(t.question_id.as_str()))
        .map(|t| t.question_id.clone())
        .collect();
    let mut unknown: Vec<String> = by_id
        .keys()
        .filter(|id| !task_ids.contains(*id))
        .map(|id| id.to_string())
        .collect();
    unknown.sort();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(EvalError::MissingPrediction { missing, unknown });
    }
    Ok(tasks
        .iter()
        .map(|t| EvalCase {
            task: t.clone(),
            predicted_sql: by_id[t.question_id.as_str()].to_string(),
            augmented_db_paths: suite_dir
                .map(|d| suite_copies(d, &t.db_id))
                .unwrap_or_default(),
        })
        .collect())
}

/// Evaluates every case (in parallel) and aggregates. TS runs when
/// `with_ts` is set; cases without copies are then TS-unevaluable.
pub fn report(
    cases: &[EvalCase],
    catalog: &HashMap<String, DatabaseSchema>,
    opts: &EvalOptions,
    with_ts: bool,
) -> Result<MetricsReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    let verdicts: Vec<CaseVerdict> = cases
        .par_iter()
        .map(|case| {
            let schema = catalog
                .get(&case.task.db_id)
                .ok_or_else(|| EvalError::UnknownDatabase(case.task.db_id.clone()))?;
            let ex = eval_ex(case, schema, opts)?;
            let ts = if with_ts && ex.class != ExClass::GoldInvalid {
                if case.augmented_db_paths.is_empty() {
                    Some(None)
                } else {
                    let v = eval_ts(case, schema, opts)?;
                    Some(v.unevaluable.is_none().then_some(v.pass))
                }
            } else {
                None
            };
            Ok(CaseVerdict {
                question_id: case.task.question_id.clone(),
                difficulty: case.task.difficulty.as_ref().map(|d| d.label().to_string()),
                ex: ex.class,
                ts,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    aggregate(&verdicts)
}

/// Fixed-width text table of a report.
pub fn render_table(r: &MetricsReport) -> String {
    let pct = |x: f64| format!("{:.2}%", 100.0 * x);
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:>7} {:>9} {:>9}", "difficulty", "count", "EX", "TS");
    for (k, s) in &r.per_difficulty {
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>9} {:>9}",
            k,
            s.count,
            pct(s.ex),
            s.ts.map(pct).unwrap_or_else(|| "-".into())
        );
    }
    let _ = writeln!(
        out,
        "{:<14} {:>7} {:>9} {:>9}",
        "all",
        r.evaluated,
        pct(r.ex),
        r.ts.map(pct).unwrap_or_else(|| "-".into())
    );
    let _ = writeln!(out, "invalid rate: {}", pct(r.invalid_rate));
    if !r.gold_invalid.is_empty() {
        let _ = writeln!(out, "gold invalid (excluded): {}", r.gold_invalid.join(", "));
    }
    out
}

/// CSV rows `difficulty,count,ex,ts` plus an `all` row.
pub fn render_csv(r: &MetricsReport) -> String {
    let mut out = String::from("difficulty,count,ex,ts\n");
    let ts = |t: Option<f64>| t.map(|x| x.to_string()).unwrap_or_default();
    for (k, s) in &r.per_difficulty {
        let _ = writeln!(out, "{k},{},{},{}", s.count, s.ex, ts(s.ts));
    }
    let _ = writeln!(out, "all,{},{},{}", r.evaluated, r.ex, ts(r.ts));
    out
}
