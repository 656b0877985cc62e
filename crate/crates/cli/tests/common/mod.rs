//! Shared setup for CLI tests: staged fixtures, config files and the
//! scripted backends the replay recordings were produced with.
#![allow(dead_code)]

#[path = "../../../core/tests/support/mod.rs"]
pub mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqlharness::llm::{
    CompletionBackend, CompletionRequest, CompletionResponse, LlmError, Sample, Usage,
};
use sqlharness_cli::config::{Overrides, RunConfig};

pub fn cli_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn spider_replay() -> PathBuf {
    cli_fixtures().join("replay/concert_singer.jsonl")
}

pub fn bird_replay() -> PathBuf {
    cli_fixtures().join("replay/bird_synthesis.jsonl")
}

pub const SPIDER_CONFIG: &str = r#"seed = 42

[paths]
catalog = "tables.json"
catalog_format = "spider"
questions = "questions.json"
databases = "database"
test_suite = "ts"
output = "out"

[backend]
kind = "replay"
replay_file = "REPLAY"

[[paradigms]]
id = "concise"
num_samples = 5
temperature = 0.7
[paradigms.style]
lowercase_identifiers = true

[[paradigms]]
id = "verbose"
num_samples = 5
temperature = 0.7
use_weights = true
[paradigms.style]
mode = "verbose"
lowercase_identifiers = true

[[paradigms]]
id = "retrieval"
num_samples = 3
temperature = 0.5
content = true
[paradigms.selection]
mode = "retrieval"
integration = "soft"
top_k = 8
"#;

pub const BIRD_CONFIG: &str = r#"seed = 42

[paths]
catalog = "tables.json"
catalog_format = "bird"
questions = "questions.json"
databases = "database"
output = "out"
preliminary = "preliminary.jsonl"

[backend]
kind = "replay"
replay_file = "REPLAY"

[[paradigms]]
id = "concise"
"#;

/// Draft SQL for program-aided selection on the BIRD fixture.
pub const BIRD_PRELIMINARY: &str = r#"{"question_id": "0", "sql": "SELECT `FRPM Count (K-12)` / `Enrollment (K-12)` FROM frpm WHERE `County Name` = 'Alameda' ORDER BY 1 DESC LIMIT 1"}
{"question_id": "1", "sql": "SELECT Zip FROM schools WHERE District = 'Fresno County Office of Education' AND Charter = 1"}
{"question_id": "2", "sql": "SELECT label FROM generalinfo WHERE city IN (SELECT city FROM geographic WHERE region = 'unknown') LIMIT 3"}
{"question_id": "3", "sql": "SELECT T2.ListPrice FROM Product AS T1 JOIN ProductListPriceHistory AS T2 ON T1.ProductID = T2.ProductID WHERE T1.Name = 'LL Fork'"}
"#;

pub struct Env {
    pub staged: support::Staged,
    pub config: PathBuf,
    pub out: PathBuf,
}

impl Env {
    pub fn root(&self) -> &Path {
        self.staged.dir.path()
    }

    pub fn load(&self) -> RunConfig {
        RunConfig::load(&self.config, &Overrides::default()).unwrap()
    }

    pub fn cli(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sqlharness"));
        cmd.arg("--config").arg(&self.config).args(args);
        for var in [
            "SQLHARNESS_CONFIG",
            "SQLHARNESS_OUTPUT",
            "SQLHARNESS_SEED",
            "SQLHARNESS_REPLAY",
            "SQLHARNESS_ENDPOINT",
            "SQLHARNESS_MODEL",
            "SQLHARNESS_API_KEY",
        ] {
            cmd.env_remove(var);
        }
        cmd.output().unwrap()
    }
}

fn write_config(staged: support::Staged, template: &str, replay: &Path) -> Env {
    let root = staged.dir.path().to_path_buf();
    let config = root.join("sqlharness.toml");
    let text = template.replace("REPLAY", &replay.display().to_string());
    fs::write(&config, text).unwrap();
    Env {
        out: root.join("out"),
        config,
        staged,
    }
}

pub fn spider_env(replay: &Path) -> Env {
    write_config(support::stage("spider"), SPIDER_CONFIG, replay)
}

pub fn bird_env(replay: &Path) -> Env {
    let staged = support::stage("bird");
    fs::write(staged.dir.path().join("preliminary.jsonl"), BIRD_PRELIMINARY).unwrap();
    write_config(staged, BIRD_CONFIG, replay)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Candidate pools per spider question: `(question, good variants, wrong
/// SQL, TS-divergent SQL)`. The divergent query agrees with gold on the
/// original database only.
pub const SPIDER_POOLS: [(&str, [&str; 2], &str, Option<&str>); 10] = [
    (
        "How many singers do we have?",
        ["SELECT count(*) FROM singer", "SELECT COUNT(*) FROM singer"],
        "SELECT count(*) FROM stadium",
        None,
    ),
    (
        "What are the names, countries, and ages for every singer in descending order of age?",
        [
            "SELECT name, country, age FROM singer ORDER BY age DESC",
            "SELECT Name, Country, Age FROM singer ORDER BY Age DESC",
        ],
        "SELECT name FROM singer ORDER BY age DESC",
        None,
    ),
    (
        "What is the average, minimum, and maximum age of all singers from France?",
        [
            "SELECT avg(age), min(age), max(age) FROM singer WHERE country = 'France'",
            "SELECT AVG(Age), MIN(Age), MAX(Age) FROM singer WHERE Country = 'France'",
        ],
        "SELECT avg(age), min(age), max(age) FROM singer",
        None,
    ),
    (
        "Show the name and the release year of the song by the youngest singer.",
        [
            "SELECT song_name, song_release_year FROM singer ORDER BY age LIMIT 1",
            "SELECT song_name, song_release_year FROM singer WHERE age = (SELECT min(age) FROM singer)",
        ],
        "SELECT song_name, song_release_year FROM singer ORDER BY age DESC LIMIT 1",
        None,
    ),
    (
        "What are all distinct countries where singers above age 20 are from?",
        [
            "SELECT DISTINCT country FROM singer WHERE age > 20",
            "SELECT country FROM singer WHERE age > 20 GROUP BY country",
        ],
        "SELECT country FROM singer",
        Some("SELECT DISTINCT Country FROM singer WHERE Age > 24"),
    ),
    (
        "Show all countries and the number of singers in each country.",
        [
            "SELECT country, count(*) FROM singer GROUP BY country",
            "SELECT Country, COUNT(*) FROM singer GROUP BY Country",
        ],
        "SELECT country, count(*) FROM singer",
        None,
    ),
    (
        "Show location and name for all stadiums with a capacity between 5000 and 10000.",
        [
            "SELECT location, name FROM stadium WHERE capacity BETWEEN 5000 AND 10000",
            "SELECT location, name FROM stadium WHERE capacity >= 5000 AND capacity <= 10000",
        ],
        "SELECT location, name FROM stadium WHERE capacity > 5000",
        None,
    ),
    (
        "What are the names of the singers who performed in a concert in 2014?",
        [
            "SELECT T2.name FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id JOIN concert AS T3 ON T1.concert_id = T3.concert_id WHERE T3.year = 2014",
            "SELECT s.name FROM singer AS s JOIN singer_in_concert AS sc ON s.singer_id = sc.singer_id JOIN concert AS c ON sc.concert_id = c.concert_id WHERE c.year = '2014'",
        ],
        "SELECT T2.name FROM singer_in_concert AS T1 JOIN singer AS T2 ON T1.singer_id = T2.singer_id",
        None,
    ),
    (
        "How many concerts are there in year 2014 or 2015?",
        [
            "SELECT count(*) FROM concert WHERE year = 2014 OR year = 2015",
            "SELECT count(*) FROM concert WHERE year IN ('2014', '2015')",
        ],
        "SELECT count(*) FROM concert WHERE year = 2014",
        None,
    ),
    (
        "Show the stadium name and the number of concerts in each stadium.",
        [
            "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id",
            "SELECT s.name, count(*) FROM stadium AS s JOIN concert AS c ON s.stadium_id = c.stadium_id GROUP BY s.stadium_id",
        ],
        "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id",
        None,
    ),
];

const BROKEN: &str = "SELECT nme FROM singer";

/// Deterministic stand-in for a model. The paradigm is told apart by sample
/// count and template: 5 concise, 5 verbose (with log-probabilities) and 3
/// for the retrieval paradigm.
pub struct ScriptedSql;

impl CompletionBackend for ScriptedSql {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let (i, (_, good, bad, diverge)) = SPIDER_POOLS
            .iter()
            .enumerate()
            .find(|(_, p)| req.prompt.contains(p.0))
            .ok_or_else(|| LlmError::Malformed("unscripted question".into()))?;
        let verbose = req.prompt.contains("Let us take a question");
        let plain = |sqls: &[&str]| -> Vec<Sample> {
            sqls.iter()
                .map(|s| Sample {
                    text: s.to_string(),
                    logprob: None,
                })
                .collect()
        };
        let samples = match (req.num_samples, verbose) {
            (5, false) => match (i, diverge) {
                (2, _) => plain(&[bad, bad, bad, good[0], BROKEN]),
                (_, Some(d)) => plain(&[d, d, good[0], BROKEN, d]),
                _ => plain(&[good[0], good[0], bad, BROKEN, good[1]]),
            },
            (5, true) => {
                let scored: Vec<(&str, f64)> = if i == 8 || i == 9 {
                    vec![(bad, -0.05), (good[0], -2.0), (good[0], -2.2), (good[1], -2.4), (BROKEN, -1.0)]
                } else {
                    vec![(good[0], -0.2), (good[1], -0.5), (bad, -1.5), (BROKEN, -0.3), (good[0], -0.9)]
                };
                scored
                    .into_iter()
                    .map(|(s, lp)| Sample {
                        text: s.to_string(),
                        logprob: Some(lp),
                    })
                    .collect()
            }
            (3, _) => match i {
                8 => plain(&[good[0], good[0], good[0]]),
                9 => plain(&[bad, bad, good[0]]),
                _ => plain(&[good[0], bad, good[0]]),
            },
            (n, _) => return Err(LlmError::InvalidRequest(format!("unscripted sample count {n}"))),
        };
        Ok(CompletionResponse {
            samples,
            model_id: "scripted".into(),
            usage: Usage::default(),
        })
    }
}

/// Rewrite responses for the BIRD fixture, keyed by question text.
pub const BIRD_REWRITES: [(&str, &str); 4] = [
    (
        "highest eligible free rate",
        r#"[{"sql": "SELECT MAX(CAST(`FRPM Count (K-12)` AS REAL) / `Enrollment (K-12)`) FROM frpm WHERE `County Name` = 'Alameda'", "similarity": 0.7},
 {"sql": "SELECT MAX(`Enrollment (K-12)`) FROM frpm WHERE `County Name` = 'Alameda'", "similarity": 0.5}]"#,
    ),
    (
        "charter schools in Fresno",
        r#"Sure:
[{"sql": "SELECT Zip FROM schools WHERE CDSCode IN (SELECT CDSCode FROM frpm WHERE `District Name` = 'Fresno County Office of Education' AND `Charter School (Y/N)` = 1)", "similarity": 0.6},
 {"similarity": 0.3}]"#,
    ),
    (
        "unidentified region",
        r#"[{"sql": "SELECT gi.label FROM generalinfo gi, geographic g WHERE gi.city = g.city AND g.region = 'unknown' LIMIT 3", "similarity": 0.8},
 {"sql": "SELECT label FROM generalinfo WHERE id_restaurant IN (SELECT id_restaurant FROM location WHERE city IN (SELECT city FROM geographic WHERE region = 'unknown')) LIMIT 3", "similarity": 0.7},
 {"sql": "SELECT label FROM generalinfo WHERE city IN (SELECT city FROM geographic WHERE region = 'unknown') LIMIT 3", "similarity": 0.6}]"#,
    ),
    (
        "LL Fork",
        r#"[{"sql": "SELECT ProductListPriceHistory.ListPrice FROM Product JOIN ProductListPriceHistory ON Product.ProductID = ProductListPriceHistory.ProductID WHERE Product.Name = 'LL Fork'", "similarity": 0.95},
 {"sql": "SELECT plph.ListPrice FROM Product p, ProductListPriceHistory plph WHERE p.ProductID = plph.ProductID AND p.Name = 'LL Fork' LIMIT 3", "similarity": 0.85},
 {"sql": "SELECT ListPrice FROM ProductListPriceHistory WHERE ProductID IN (SELECT ProductID FROM Product WHERE Name = 'LL Fork')", "similarity": 0.75}]"#,
    ),
];

pub struct ScriptedRewrites;

impl CompletionBackend for ScriptedRewrites {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let text = BIRD_REWRITES
            .iter()
            .find(|(q, _)| req.prompt.contains(q))
            .map(|(_, a)| a.to_string())
            .ok_or_else(|| LlmError::Malformed("unscripted question".into()))?;
        Ok(CompletionResponse {
            samples: vec![Sample {
                text,
                logprob: None,
            }],
            model_id: "scripted".into(),
            usage: Usage::default(),
        })
    }
}
