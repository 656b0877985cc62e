//! Run configuration: a TOML file, environment overrides and flags.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use sqlharness::content::MatchConfig;
use sqlharness::llm::RetryPolicy;
use sqlharness::pipeline::ParadigmConfig;
use sqlharness::schema::CatalogFormat;
use sqlharness::synth::SynthConfig;

/// Invalid or unreadable configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CatalogKind {
    Spider,
    Bird,
}

impl From<CatalogKind> for CatalogFormat {
    fn from(k: CatalogKind) -> Self {
        match k {
            CatalogKind::Spider => CatalogFormat::SpiderTablesJson,
            CatalogKind::Bird => CatalogFormat::BirdTablesJson,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    #[serde(default = "default_catalog_kind")]
    pub catalog_format: CatalogKind,
    pub questions: PathBuf,
    /// Holds `<db_id>/<db_id>.sqlite`; defaults to `database/` next to the catalog.
    #[serde(default)]
    pub databases: Option<PathBuf>,
    pub output: PathBuf,
    /// Holds `<db_id>/*.sqlite` augmented copies for test-suite accuracy.
    #[serde(default)]
    pub test_suite: Option<PathBuf>,
    /// Draft SQL per question for program-aided selection.
    #[serde(default)]
    pub preliminary: Option<PathBuf>,
}

fn default_catalog_kind() -> CatalogKind {
    CatalogKind::Spider
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Record,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub replay_file: Option<PathBuf>,
    pub record_file: Option<PathBuf>,
    pub request_timeout_secs: u64,
    pub retry: RetryPolicy,
    pub burst: u32,
    pub requests_per_second: Option<f64>,
    pub max_in_flight: Option<usize>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            endpoint: None,
            model: None,
            api_key_env: "SQLHARNESS_API_KEY".into(),
            replay_file: None,
            record_file: None,
            request_timeout_secs: 120,
            retry: RetryPolicy::default(),
            burst: 4,
            requests_per_second: None,
            max_in_flight: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub timeout_secs: f64,
    pub lenient: bool,
    pub strip_distinct: bool,
    pub test_suite: bool,
    pub ex_floor: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            timeout_secs: 30.0,
            lenient: false,
            strip_distinct: false,
            test_suite: true,
            ex_floor: None,
        }
    }
}

impl EvaluationConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSelectionConfig {
    pub top_k: usize,
}

impl Default for ColumnSelectionConfig {
    fn default() -> Self {
        ColumnSelectionConfig { top_k: 10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Write wall-clock timings into prediction records.
    #[serde(default)]
    pub record_timing: bool,
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub paradigms: Vec<ParadigmConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub selection: ColumnSelectionConfig,
    #[serde(default)]
    pub content: MatchConfig,
    #[serde(default)]
    pub synthesis: SynthConfig,
    /// Resolved API key; never read from the file.
    #[serde(skip)]
    pub api_key: Option<String>,
}

/// Values given on the command line or through `SQLHARNESS_*` variables.
/// Any `Some` replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replay_file: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let p = &mut cfg.paths;
        for path in [&mut p.catalog, &mut p.questions, &mut p.output] {
            resolve(base_dir, path);
        }
        for path in [&mut p.databases, &mut p.test_suite, &mut p.preliminary]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, path);
        }
        for path in [&mut cfg.backend.replay_file, &mut cfg.backend.record_file]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, path);
        }
        for paradigm in &mut cfg.paradigms {
            if let Some(d) = paradigm.demonstrations.as_mut() {
                resolve(base_dir, d);
            }
        }
        Ok(cfg)
    }

    /// Reads `path`, applies overrides and validates. Relative paths in the
    /// file are taken relative to the file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides, then falls back to the API key variable named in
    /// the file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output {
            self.paths.output = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.replay_file {
            self.backend.replay_file = Some(v.clone());
        }
        if let Some(v) = &o.endpoint {
            self.backend.endpoint = Some(v.clone());
        }
        if let Some(v) = &o.model {
            self.backend.model = Some(v.clone());
        }
        self.api_key = o
            .api_key
            .clone()
            .or_else(|| std::env::var(&self.backend.api_key_env).ok())
            .filter(|k| !k.is_empty());
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_be_file = |what: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(config_err(format!("{what} not found: {}", p.display())))
            }
        };
        let must_be_dir = |what: &str, p: &Path| {
            if p.is_dir() {
                Ok(())
            } else {
                Err(config_err(format!("{what} directory not found: {}", p.display())))
            }
        };
        must_be_file("catalog", &self.paths.catalog)?;
        must_be_file("question file", &self.paths.questions)?;
        if let Some(d) = &self.paths.databases {
            must_be_dir("databases", d)?;
        }
        if let Some(d) = &self.paths.test_suite {
            must_be_dir("test suite", d)?;
        }
        if let Some(p) = &self.paths.preliminary {
            must_be_file("preliminary SQL file", p)?;
        }
        if self.paths.output.exists() && !self.paths.output.is_dir() {
            return Err(config_err(format!(
                "output path is not a directory: {}",
                self.paths.output.display()
            )));
        }

        let mut seen = HashSet::new();
        for p in &self.paradigms {
            if p.id.trim().is_empty() {
                return Err(config_err("paradigm with empty id"));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(config_err(format!("duplicate paradigm id `{}`", p.id)));
            }
            if p.num_samples == 0 {
                return Err(config_err(format!("paradigm `{}`: num_samples must be at least 1", p.id)));
            }
            if let Some(sel) = &p.selection {
                if sel.top_k == 0 {
                    return Err(config_err(format!("paradigm `{}`: top_k must be at least 1", p.id)));
                }
            }
            p.match_config
                .validate()
                .map_err(|e| config_err(format!("paradigm `{}`: {e}", p.id)))?;
            if let Some(d) = &p.demonstrations {
                must_be_file(&format!("paradigm `{}` demonstrations", p.id), d)?;
            }
        }
        self.content.validate().map_err(|e| config_err(e.to_string()))?;
        self.synthesis
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if !(self.evaluation.timeout_secs > 0.0) {
            return Err(config_err("evaluation.timeout_secs must be positive"));
        }
        if self.selection.top_k == 0 {
            return Err(config_err("selection.top_k must be at least 1"));
        }
        if let Some(rate) = self.backend.requests_per_second {
            if !(rate > 0.0) {
                return Err(config_err("backend.requests_per_second must be positive"));
            }
        }
        Ok(())
    }

    /// Backend settings checked only by commands that call the model.
    pub fn validate_backend(&self) -> Result<(), ConfigError> {
        let b = &self.backend;
        match b.kind {
            BackendKind::Replay => {
                let f = b
                    .replay_file
                    .as_ref()
                    .ok_or_else(|| config_err("replay backend needs backend.replay_file"))?;
                if !f.is_file() {
                    return Err(config_err(format!("replay file not found: {}", f.display())));
                }
            }
            BackendKind::Http | BackendKind::Record => {
                if b.endpoint.is_none() {
                    return Err(config_err("http backend needs backend.endpoint"));
                }
                if b.kind == BackendKind::Record && b.record_file.is_none() {
                    return Err(config_err("record backend needs backend.record_file"));
                }
            }
        }
        Ok(())
    }

    pub fn paradigm(&self, id: &str) -> Result<&ParadigmConfig, ConfigError> {
        self.paradigms
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| config_err(format!("unknown paradigm `{id}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[paths]
catalog = "tables.json"
questions = "q.json"
output = "out"

[[paradigms]]
id = "a"
num_samples = 4
temperature = 0.5
[paradigms.style]
mode = "verbose"

[[paradigms]]
id = "b"
[paradigms.selection]
mode = "retrieval"
integration = "soft"
top_k = 5
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.catalog, PathBuf::from("/base/tables.json"));
        assert_eq!(cfg.paradigms.len(), 2);
        assert_eq!(cfg.paradigms[0].num_samples, 4);
        assert_eq!(cfg.paradigms[1].selection.as_ref().unwrap().top_k, 5);
        assert_eq!(cfg.backend.kind, BackendKind::Replay);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            output: Some("/elsewhere".into()),
            api_key: Some("k".into()),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.paths.output, PathBuf::from("/elsewhere"));
        assert_eq!(cfg.api_key.as_deref(), Some("k"));
    }

    #[test]
    fn rejects_unknown_keys_and_duplicates() {
        let bad = MINIMAL.replace("seed = 3", "sed = 3");
        assert!(RunConfig::parse(&bad, Path::new("/")).is_err());

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tables.json"), "[]").unwrap();
        std::fs::write(dir.path().join("q.json"), "[]").unwrap();
        let dup = MINIMAL.replace("id = \"b\"", "id = \"a\"");
        let cfg = RunConfig::parse(&dup, dir.path()).unwrap();
        assert!(cfg.validate().unwrap_err().0.contains("duplicate"));
        let cfg = RunConfig::parse(MINIMAL, dir.path()).unwrap();
        cfg.validate().unwrap();
        let missing = RunConfig::parse(MINIMAL, Path::new("/nonexistent")).unwrap();
        assert!(missing.validate().unwrap_err().0.contains("catalog"));
    }
}
