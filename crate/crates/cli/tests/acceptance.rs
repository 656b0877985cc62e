//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sqlharness::consistency::{consistency_select, cross_paradigm_select_executed, SqlCandidate};
use sqlharness::content::{extract_content, MatchConfig};
use sqlharness::eval::{
    aggregate, build_cases, eval_ex, eval_ts, report, suite_copies, CaseVerdict, EvalCase,
    EvalOptions, ExClass,
};
use sqlharness::exec::{execute, result_key_with, Cell, ComparePolicy, ExecStatus, ExecutionOutcome};
use sqlharness::prompt::{build_prompt, PromptMode, PromptStyle};
use sqlharness::schema::{
    load_question_set, load_schema_catalog, CatalogFormat, CatalogOptions, DatabaseSchema,
    QuestionTask,
};
use sqlharness::selection::{
    apply_selection, extract_references, retrieve_columns, score_selection, ColumnRef,
    HashingEmbedder, Integration, SelectionMode, SelectionSet,
};
use sqlharness::synth::{filter_candidates, SynthConfig, SyntheticCandidate};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Loaded {
    staged: support::Staged,
    catalog: HashMap<String, DatabaseSchema>,
    tasks: Vec<QuestionTask>,
}

fn load(kind: &str) -> Loaded {
    let staged = support::stage(kind);
    let format = if kind == "bird" {
        CatalogFormat::BirdTablesJson
    } else {
        CatalogFormat::SpiderTablesJson
    };
    let catalog = load_schema_catalog(&staged.tables, &CatalogOptions::new(format))
        .unwrap()
        .into_iter()
        .map(|s| (s.db_id.clone(), s))
        .collect();
    let tasks = load_question_set(&staged.questions).unwrap();
    Loaded {
        staged,
        catalog,
        tasks,
    }
}

fn program_aided_extraction() -> Check {
    let bird = load("bird");
    let schema = &bird.catalog["california_schools"];
    let sql = "SELECT `FRPM Count (K-12)`/`Enrollment (K-12)` FROM frpm WHERE `County Name`=`Alameda` ORDER BY (CAST(`FRPM Count (K-12)` AS REAL) / `Enrollment (K-12)`) DESC LIMIT 1";
    let start = Instant::now();
    let sel = extract_references(sql, schema, SelectionMode::ProgramAided).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let cols: BTreeSet<&str> = sel.columns.iter().map(|c| c.column.as_str()).collect();
    let want: BTreeSet<&str> = ["FRPM Count (K-12)", "Enrollment (K-12)", "County Name"].into();
    ensure!(sel.tables == ["frpm"], "tables {:?}", sel.tables);
    ensure!(cols == want, "columns {cols:?}");
    ensure!(sel.columns.iter().all(|c| c.table == "frpm"), "columns outside frpm");
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}");
    Ok(format!("tables={{frpm}}, 3 columns, {elapsed:?}"))
}

fn outcome(result: Option<i64>) -> ExecutionOutcome {
    ExecutionOutcome {
        status: if result.is_some() { ExecStatus::Ok } else { ExecStatus::Error },
        rows: result.map(|v| vec![vec![Cell::Integer(v)]]).unwrap_or_default(),
        error_message: result.is_none().then(|| "error".to_string()),
        elapsed: Duration::ZERO,
    }
}

/// Brute-force ranking: score every valid candidate by the summed weight of
/// all valid candidates sharing its result, take the maximizers, then apply
/// the declared tie rules (earliest sample index across groups, smallest
/// SQL inside the group).
fn brute_force_select(
    results: &[Option<i64>],
    sqls: &[String],
    weights: &[Option<f64>],
    use_weights: bool,
) -> (usize, f64, bool) {
    let n = results.len();
    let weighted = use_weights && weights.iter().all(Option::is_some);
    let w = |i: usize| if weighted { weights[i].unwrap() } else { 1.0 };
    let mut score = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        if results[i].is_none() {
            continue;
        }
        let mut s = 0.0;
        for j in 0..n {
            if results[j] == results[i] {
                s += w(j);
            }
        }
        score[i] = s;
    }
    let best = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return (0, 0.0, true);
    }
    let maximizers: Vec<usize> = (0..n).filter(|&i| score[i] == best).collect();
    let first = *maximizers.iter().min().unwrap();
    let group = results[first];
    let chosen = (0..n)
        .filter(|&i| results[i] == group)
        .min_by(|&a, &b| sqls[a].cmp(&sqls[b]).then(a.cmp(&b)))
        .unwrap();
    (chosen, best, false)
}

fn consistency_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for case in 0..1000 {
        let n = rng.gen_range(1..=32);
        let distinct = rng.gen_range(1..=6);
        let p_invalid = rng.gen_range(0.0..0.7);
        let results: Vec<Option<i64>> = (0..n)
            .map(|_| (!rng.gen_bool(p_invalid)).then(|| rng.gen_range(0..distinct)))
            .collect();
        // dyadic weights keep every sum exact
        let all_weighted = rng.gen_bool(0.7);
        let weights: Vec<Option<f64>> = (0..n)
            .map(|_| {
                (all_weighted || rng.gen_bool(0.5)).then(|| rng.gen_range(1..=64) as f64 / 64.0)
            })
            .collect();
        let sqls: Vec<String> = (0..n).map(|_| format!("SELECT {}", rng.gen_range(0..1000))).collect();
        let use_weights = rng.gen_bool(0.6);
        let candidates: Vec<SqlCandidate> = (0..n)
            .map(|i| {
                let mut c = SqlCandidate::new(sqls[i].clone(), "p", i);
                c.weight = weights[i];
                c.outcome = Some(outcome(results[i]));
                c
            })
            .collect();
        let got = consistency_select(&candidates, use_weights, ComparePolicy::default())
            .map_err(|e| e.to_string())?;
        let (idx, mass, all_invalid) = brute_force_select(&results, &sqls, &weights, use_weights);
        let valid = results.iter().filter(|r| r.is_some()).count();
        if got.chosen.source.sample_index != idx
            || got.group_mass != mass
            || got.all_invalid != all_invalid
            || got.valid_count != valid
            || got.error_count != n - valid
        {
            mismatches.push(case);
        }
    }
    let elapsed = start.elapsed();
    ensure!(mismatches.is_empty(), "{} mismatches, first case {}", mismatches.len(), mismatches[0]);
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 sets, 0 mismatches, {elapsed:?}"))
}

/// Line-by-line transcription: collect valid executions with their paradigm
/// indexes, count occurrences, keep SQLs whose execution attains the
/// maximum count; ties go to the highest-priority paradigm.
fn algorithm_one(results: &[Option<i64>], priority: &[usize]) -> (usize, usize, bool) {
    let p = results.len();
    let mut executions = Vec::new();
    let mut indexes = Vec::new();
    for j in 0..p {
        let e = results[j];
        if let Some(v) = e {
            executions.push(v);
            indexes.push(j);
        }
    }
    let rank = |j: usize| priority.iter().position(|&x| x == j).unwrap();
    if indexes.is_empty() {
        let first = (0..p).min_by_key(|&j| rank(j)).unwrap();
        return (first, 0, true);
    }
    let counts = |e: i64| executions.iter().filter(|&&x| x == e).count();
    let max = executions.iter().map(|&e| counts(e)).max().unwrap();
    let outputs: Vec<usize> = indexes
        .iter()
        .copied()
        .filter(|&j| counts(results[j].unwrap()) == max)
        .collect();
    let chosen = outputs.into_iter().min_by_key(|&j| rank(j)).unwrap();
    (chosen, max, false)
}

fn algorithm_one_trace() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let p = rng.gen_range(2..=8);
        let distinct = rng.gen_range(1..=4);
        let results: Vec<Option<i64>> = (0..p)
            .map(|_| (!rng.gen_bool(0.25)).then(|| rng.gen_range(0..distinct)))
            .collect();
        let mut priority: Vec<usize> = (0..p).collect();
        priority.shuffle(&mut rng);
        let names: Vec<String> = priority.iter().map(|j| format!("p{j}")).collect();
        let candidates: Vec<SqlCandidate> = (0..p)
            .map(|j| {
                let mut c = SqlCandidate::new(format!("SELECT {j}"), format!("p{j}"), 0);
                c.outcome = Some(outcome(results[j]));
                c
            })
            .collect();
        let got = cross_paradigm_select_executed(&candidates, &names, ComparePolicy::default())
            .map_err(|e| e.to_string())?;
        let (j, size, all_invalid) = algorithm_one(&results, &priority);
        if got.chosen.source.paradigm_id != format!("p{j}")
            || got.group_mass != size as f64
            || got.all_invalid != all_invalid
        {
            mismatches += 1;
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatches");
    Ok("200 vectors, 0 mismatches".into())
}

fn content_case_studies() -> Check {
    let bird = load("bird");
    let schema = &bird.catalog["california_schools"];
    let alameda = &bird.tasks[0].question;
    let fresno = &bird.tasks[1].question;
    let cfg = MatchConfig::default();
    let a = extract_content(alameda, schema, &cfg).map_err(|e| e.to_string())?;
    let f = extract_content(fresno, schema, &cfg).map_err(|e| e.to_string())?;
    ensure!(a.contains("frpm", "County Name", "Alameda"), "Alameda match missing");
    ensure!(
        f.contains("frpm", "District Name", "Fresno County Office of Education"),
        "Fresno match missing"
    );
    let conn = rusqlite::Connection::open(&schema.storage_path).map_err(|e| e.to_string())?;
    for m in a.matches.iter().chain(&f.matches) {
        let sql = format!(
            "SELECT count(*) FROM \"{}\" WHERE CAST(\"{}\" AS TEXT) = ?1",
            m.table, m.column
        );
        let n: i64 = conn
            .query_row(&sql, [&m.value], |r| r.get(0))
            .map_err(|e| e.to_string())?;
        ensure!(n > 0, "{}.{} = {:?} not in database", m.table, m.column, m.value);
    }
    let strict = MatchConfig {
        threshold: 1.0,
        ..cfg
    };
    let exact = extract_content(alameda, schema, &strict).map_err(|e| e.to_string())?;
    ensure!(exact.matches.iter().all(|m| m.score == 1.0), "inexact match at threshold 1.0");
    ensure!(
        exact.contains("frpm", "County Name", "Alameda"),
        "exact Alameda match lost at threshold 1.0"
    );
    ensure!(
        !exact
            .matches
            .iter()
            .any(|m| m.keyword == "Alameda County" && m.value == "Alameda"),
        "'Alameda County' -> 'Alameda' survives at threshold 1.0"
    );
    Ok(format!(
        "{} + {} matches, all present in the database",
        a.matches.len(),
        f.matches.len()
    ))
}

fn set(cols: &[&str]) -> SelectionSet {
    SelectionSet {
        db_id: "d".into(),
        question_id: None,
        tables: Vec::new(),
        columns: cols
            .iter()
            .map(|c| match c.split_once('.') {
                Some((t, c)) => ColumnRef::new(t, c),
                None => ColumnRef::new("t", *c),
            })
            .collect(),
        mode: SelectionMode::GroundTruth,
        integration: Integration::Hard,
        scores: None,
    }
}

fn selection_arithmetic() -> Check {
    // (predicted, truth, recall, precision, f1); None where undefined
    let cases: [(&[&str], &[&str], Option<f64>, f64, Option<f64>); 20] = [
        (&["a", "b", "c"], &["a", "b"], Some(1.0), 2.0 / 3.0, Some(4.0 / 5.0)),
        (&["a", "b"], &["a", "b"], Some(1.0), 1.0, Some(1.0)),
        (&["a"], &["b"], Some(0.0), 0.0, Some(0.0)),
        (&["a"], &["a", "b"], Some(0.5), 1.0, Some(2.0 / 3.0)),
        (&["a", "b", "c", "d"], &["a"], Some(1.0), 0.25, Some(2.0 / 5.0)),
        (&["a", "b"], &["b", "c"], Some(0.5), 0.5, Some(0.5)),
        (&["a", "b", "c"], &["c", "d", "e"], Some(1.0 / 3.0), 1.0 / 3.0, Some(1.0 / 3.0)),
        (&["a", "b", "c"], &["a", "b", "c", "d", "e", "f"], Some(0.5), 1.0, Some(2.0 / 3.0)),
        (&["a", "b", "c", "d", "e"], &["a", "b"], Some(1.0), 0.4, Some(4.0 / 7.0)),
        (&["a", "b", "c"], &["a", "d"], Some(0.5), 1.0 / 3.0, Some(2.0 / 5.0)),
        (&["a", "b", "c", "d"], &["a", "b", "e"], Some(2.0 / 3.0), 0.5, Some(4.0 / 7.0)),
        (&[], &[], Some(1.0), 1.0, Some(1.0)),
        (&[], &["a"], Some(0.0), 0.0, Some(0.0)),
        (&["a"], &[], None, 0.0, None),
        (
            &["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"],
            &["a", "b", "c"],
            Some(1.0),
            0.3,
            Some(6.0 / 13.0),
        ),
        (&["a", "b"], &["a", "b", "c", "d", "e", "f", "g"], Some(2.0 / 7.0), 1.0, Some(4.0 / 9.0)),
        (
            &["a", "b", "c", "d", "e", "f"],
            &["d", "e", "f", "g", "h", "i", "j", "k"],
            Some(3.0 / 8.0),
            0.5,
            Some(3.0 / 7.0),
        ),
        (&["T.A"], &["t.a"], Some(1.0), 1.0, Some(1.0)),
        (&["t.a", "u.a"], &["t.a"], Some(1.0), 0.5, Some(2.0 / 3.0)),
        (&["a", "b", "c", "d", "e"], &["b", "c", "d", "e", "f", "g"], Some(2.0 / 3.0), 0.8, Some(8.0 / 11.0)),
    ];
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    };
    for (i, (pred, truth, r, p, f)) in cases.iter().enumerate() {
        let m = score_selection(&set(pred), &set(truth));
        ensure!(
            close(m.recall, *r) && close(Some(m.precision), Some(*p)) && close(m.f1, *f),
            "pair {i}: got {m:?}"
        );
    }

    let embedder = HashingEmbedder::default();
    let mut checked = 0;
    for kind in ["spider", "bird"] {
        let fx = load(kind);
        for task in &fx.tasks {
            let schema = &fx.catalog[&task.db_id];
            let mut prev = retrieve_columns(&task.question, schema, &embedder, 1).map_err(|e| e.to_string())?;
            for k in 2..=schema.column_count() {
                let cur = retrieve_columns(&task.question, schema, &embedder, k).map_err(|e| e.to_string())?;
                ensure!(
                    prev.columns.iter().all(|c| cur.columns.contains(c)),
                    "{} top-{} not inside top-{k}",
                    task.question_id,
                    k - 1
                );
                prev = cur;
                checked += 1;
            }
        }
    }
    Ok(format!("20 pairs within 1e-12, {checked} nested top-k steps"))
}

fn evaluator_semantics() -> Check {
    let opts = EvalOptions::default();
    let mut summary = Vec::new();
    for kind in ["spider", "bird"] {
        let fx = load(kind);
        let gold: Vec<(String, String)> = fx
            .tasks
            .iter()
            .map(|t| (t.question_id.clone(), t.gold_sql.clone().unwrap()))
            .collect();
        let suite = fx.staged.ts.is_dir().then_some(fx.staged.ts.as_path());
        let cases = build_cases(&fx.tasks, &gold, suite).map_err(|e| e.to_string())?;
        let r = report(&cases, &fx.catalog, &opts, suite.is_some()).map_err(|e| e.to_string())?;
        ensure!(r.ex == 1.0, "{kind}: gold-vs-gold EX {}", r.ex);
        if suite.is_some() {
            ensure!(r.ts == Some(1.0), "{kind}: gold-vs-gold TS {:?}", r.ts);
            summary.push(format!("{kind} EX=TS=1"));
        } else {
            summary.push(format!("{kind} EX=1 (no test suite)"));
        }
    }

    let fx = load("spider");
    let mut task = fx.tasks[0].clone();
    task.gold_sql = Some("SELECT count(*) FROM singer WHERE Age > 40".into());
    let case = EvalCase {
        task,
        predicted_sql: "SELECT count(*) FROM singer WHERE Age > 35".into(),
        augmented_db_paths: suite_copies(&fx.staged.ts, "concert_singer"),
    };
    ensure!(case.augmented_db_paths.len() == 3, "expected 3 copies");
    let schema = &fx.catalog["concert_singer"];
    let ex = eval_ex(&case, schema, &opts).map_err(|e| e.to_string())?;
    let ts = eval_ts(&case, schema, &opts).map_err(|e| e.to_string())?;
    let failing = ts.per_db.iter().filter(|(_, c)| !c.passed()).count();
    ensure!(ex.pass && !ts.pass && failing == 1, "crafted pair: ex {} ts {} failing {failing}", ex.pass, ts.pass);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let classes = [
        ExClass::Pass,
        ExClass::Pass,
        ExClass::Mismatch,
        ExClass::PredError,
        ExClass::PredTimeout,
        ExClass::GoldInvalid,
    ];
    for m in 0..500 {
        let cases = rng.gen_range(1..=20);
        let copies = rng.gen_range(1..=4);
        let verdicts: Vec<CaseVerdict> = (0..cases)
            .map(|i| {
                let row: Vec<ExClass> = (0..=copies).map(|_| *classes.choose(&mut rng).unwrap()).collect();
                CaseVerdict::from_db_classes(format!("q{i}"), None, &row)
            })
            .collect();
        if verdicts.iter().all(|v| v.ex == ExClass::GoldInvalid) {
            continue;
        }
        let r = aggregate(&verdicts).map_err(|e| e.to_string())?;
        let ts = r.ts.unwrap_or(0.0);
        ensure!(ts <= r.ex, "matrix {m}: TS {ts} > EX {}", r.ex);
    }
    summary.push("crafted pair EX=1 TS=0".into());
    summary.push("TS<=EX on 500 matrices".into());
    Ok(summary.join(", "))
}

fn synthetic_filter() -> Check {
    let fx = load("bird");
    let task = fx.tasks.iter().find(|t| t.db_id == "works_cycles").unwrap();
    let schema = &fx.catalog["works_cycles"];
    let rewrites = [
        ("SELECT ProductListPriceHistory.ListPrice FROM Product JOIN ProductListPriceHistory ON Product.ProductID = ProductListPriceHistory.ProductID WHERE Product.Name = 'LL Fork'", 0.95),
        ("SELECT plph.ListPrice FROM Product p, ProductListPriceHistory plph WHERE p.ProductID = plph.ProductID AND p.Name = 'LL Fork' LIMIT 3", 0.85),
        ("SELECT ListPrice FROM ProductListPriceHistory WHERE ProductID IN (SELECT ProductID FROM Product WHERE Name = 'LL Fork')", 0.75),
    ];
    let candidates: Vec<SyntheticCandidate> = rewrites
        .iter()
        .map(|(sql, s)| SyntheticCandidate {
            source_question_id: task.question_id.clone(),
            sql: sql.to_string(),
            similarity: *s,
            correct: None,
            kept: None,
        })
        .collect();
    let timeout = Duration::from_secs(5);
    let out = filter_candidates(&candidates, task, schema, &SynthConfig::default(), timeout)
        .map_err(|e| e.to_string())?;
    ensure!(out.iter().all(|c| c.correct == Some(true)), "not all rewrites correct");
    let kept: Vec<&SyntheticCandidate> = out.iter().filter(|c| c.kept == Some(true)).collect();
    ensure!(kept.len() == 2, "kept {}", kept.len());
    let sims: Vec<f64> = kept.iter().map(|c| c.similarity).collect();
    ensure!(sims == [0.85, 0.75], "kept similarities {sims:?}");

    let gold = task.gold_sql.as_deref().unwrap();
    let policy = ComparePolicy::from_gold(gold, false);
    let gold_key = result_key_with(&execute(gold, schema, timeout), policy).map_err(|e| e.to_string())?;
    for c in &kept {
        let key = result_key_with(&execute(&c.sql, schema, timeout), policy).map_err(|e| e.to_string())?;
        ensure!(key == gold_key, "kept rewrite differs from gold: {}", c.sql);
    }
    Ok("kept 2 of 3 at ceiling 0.9, both re-verified".into())
}

fn prompt_goldens() -> Check {
    let golden = |name: &str| fs::read_to_string(support::fixtures().join("golden").join(name)).unwrap();
    let spider = load("spider");
    let schema = &spider.catalog["concert_singer"];
    for (mode, file) in [
        (PromptMode::Concise, "concert_singer_concise.txt"),
        (PromptMode::Verbose, "concert_singer_verbose.txt"),
    ] {
        let style = PromptStyle {
            mode,
            lowercase_identifiers: true,
            ..PromptStyle::default()
        };
        let p = build_prompt(schema, &spider.tasks[0], &style, None, None, &[]).map_err(|e| e.to_string())?;
        ensure!(p.rendered == golden(file), "{file} differs");
    }

    let bird = load("bird");
    let ca = &bird.catalog["california_schools"];
    let mut count = 0;
    for task in bird.tasks.iter().filter(|t| t.db_id == "california_schools") {
        let base = build_prompt(ca, task, &PromptStyle::default(), None, None, &[]).map_err(|e| e.to_string())?;
        let mut sel = extract_references(task.gold_sql.as_deref().unwrap(), ca, SelectionMode::GroundTruth)
            .map_err(|e| e.to_string())?;
        sel.integration = Integration::Soft;
        let style = apply_selection(&PromptStyle::default(), &sel).map_err(|e| e.to_string())?;
        let soft = build_prompt(ca, task, &style, None, Some(&sel), &[]).map_err(|e| e.to_string())?;
        let base_lines: BTreeSet<&str> = base.x1.lines().collect();
        let soft_lines: BTreeSet<&str> = soft.x1.lines().collect();
        ensure!(base_lines.is_subset(&soft_lines), "{}: soft schema block drops lines", task.question_id);
        ensure!(soft.rendered.contains(&base.x1), "{}: soft prompt lacks baseline schema", task.question_id);
        count += 1;
    }
    Ok(format!("concise and verbose byte-exact, soft superset on {count} questions"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn end_to_end_determinism() -> Check {
    let start = Instant::now();
    let env = spider_env(&spider_replay());
    let mut runs = Vec::new();
    for (i, jobs) in ["8", "8", "8", "1"].iter().enumerate() {
        let out = env.root().join(format!("run{i}"));
        let out_s = out.display().to_string();
        let p = env.cli(&["--output", &out_s, "predict", "--combine", "--jobs", jobs]);
        ensure!(p.status.success(), "predict failed: {}", stderr(&p));
        let preds = out.join("predictions_combined.jsonl").display().to_string();
        let e = env.cli(&["--output", &out_s, "evaluate", "--predictions", &preds, "--jobs", jobs]);
        ensure!(e.status.success(), "evaluate failed: {}", stderr(&e));
        runs.push((snapshot(&out), stdout(&e)));
    }
    let (first_files, first_table) = &runs[0];
    ensure!(first_files.len() == 5, "expected 5 output files, got {}", first_files.len());
    for (i, (files, table)) in runs.iter().enumerate().skip(1) {
        ensure!(files == first_files, "run {i} files differ");
        ensure!(table == first_table, "run {i} table differs");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("3 runs at --jobs 8 and 1 at --jobs 1 byte-identical, {elapsed:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("program-aided column extraction", program_aided_extraction),
        ("consistency selection vs brute-force oracle", consistency_oracle),
        ("cross-paradigm selection vs reference transcription", algorithm_one_trace),
        ("content matcher case studies", content_case_studies),
        ("selection metrics arithmetic", selection_arithmetic),
        ("evaluator semantics", evaluator_semantics),
        ("synthetic rewrite filter", synthetic_filter),
        ("prompt golden files", prompt_goldens),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
