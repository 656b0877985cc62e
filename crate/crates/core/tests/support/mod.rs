//! Stages fixture catalogs into a temp dir, building SQLite files from the
//! checked-in `schema.sql` + `data.sql` scripts.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

pub fn fixtures() -> PathBuf {
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    let own = here.join("tests/fixtures");
    if own.join("spider").is_dir() {
        own
    } else {
        here.join("../core/tests/fixtures")
    }
}

pub struct Staged {
    pub dir: TempDir,
    pub tables: PathBuf,
    pub questions: PathBuf,
    pub databases: PathBuf,
    pub ts: PathBuf,
}

impl Staged {
    pub fn db(&self, db_id: &str) -> PathBuf {
        self.databases.join(db_id).join(format!("{db_id}.sqlite"))
    }
}

pub fn build_sqlite(path: &Path, scripts: &[&Path]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let conn = rusqlite::Connection::open(path).unwrap();
    for s in scripts {
        let sql = fs::read_to_string(s).unwrap_or_else(|e| panic!("{}: {e}", s.display()));
        conn.execute_batch(&sql)
            .unwrap_or_else(|e| panic!("{}: {e}", s.display()));
    }
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

/// Stages `fixtures/<kind>` (`spider` or `bird`).
pub fn stage(kind: &str) -> Staged {
    let src = fixtures().join(kind);
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let databases = root.join("database");
    let ts = root.join("ts");
    fs::copy(src.join("tables.json"), root.join("tables.json")).unwrap();
    fs::copy(src.join("questions.json"), root.join("questions.json")).unwrap();

    let mut dbs: Vec<PathBuf> = fs::read_dir(&src)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("schema.sql").is_file())
        .collect();
    dbs.sort();
    for db in dbs {
        let id = db.file_name().unwrap().to_string_lossy().to_string();
        let schema = db.join("schema.sql");
        build_sqlite(
            &databases.join(&id).join(format!("{id}.sqlite")),
            &[&schema, &db.join("data.sql")],
        );
        let desc = db.join("database_description");
        if desc.is_dir() {
            copy_dir(&desc, &databases.join(&id).join("database_description"));
        }
        let suite = src.join("ts").join(&id);
        if suite.is_dir() {
            let mut copies: Vec<PathBuf> = fs::read_dir(&suite)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().is_some_and(|x| x == "sql"))
                .collect();
            copies.sort();
            for c in copies {
                let name = c.file_stem().unwrap().to_string_lossy().to_string();
                build_sqlite(&ts.join(&id).join(format!("{name}.sqlite")), &[&schema, &c]);
            }
        }
    }
    Staged {
        tables: root.join("tables.json"),
        questions: root.join("questions.json"),
        databases,
        ts,
        dir,
    }
}
