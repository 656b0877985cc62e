//! Read-only SQL execution with per-statement deadlines, cell normalization
//! and result digests for equivalence checks.

use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::DatabaseSchema;
use crate::sqllex::has_top_level_order_by;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("outcome is not executable (status {0:?})")]
    NotExecutable(ExecStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Cell {
    Null,
    Integer(i64),
    /// Real rounded to 6 significant digits, shortest round-trip text.
    Decimal(String),
    Text(String),
    /// Hex SHA-256 of the blob bytes.
    Blob(String),
}

/// Canonical text of a real at 6 significant digits.
pub fn canonical_decimal(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().unwrap_or(v);
    if rounded == 0.0 {
        return "0".into();
    }
    format!("{rounded}")
}

impl Cell {
    fn from_value(v: ValueRef<'_>) -> Cell {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(r) => Cell::Decimal(canonical_decimal(r)),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(hex::encode(Sha256::digest(b))),
        }
    }

    /// Numeric view used by the lenient policy.
    fn coerced(&self) -> Cell {
        match self {
            Cell::Integer(i) => Cell::Decimal(canonical_decimal(*i as f64)),
            Cell::Text(t) => match t.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Cell::Decimal(canonical_decimal(v)),
                _ => self.clone(),
            },
            other => other.clone(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let (tag, body): (u8, &[u8]) = match self {
            Cell::Null => (0, b""),
            Cell::Integer(_) => (1, b""),
            Cell::Decimal(s) => (2, s.as_bytes()),
            Cell::Text(s) => (3, s.as_bytes()),
            Cell::Blob(s) => (4, s.as_bytes()),
        };
        out.push(tag);
        if let Cell::Integer(i) = self {
            out.extend_from_slice(&i.to_be_bytes());
        } else {
            out.extend_from_slice(&(body.len() as u64).to_be_bytes());
            out.extend_from_slice(body);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    pub rows: Vec<Vec<Cell>>,
    pub error_message: Option<String>,
    pub elapsed: Duration,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    fn failed(status: ExecStatus, message: String, elapsed: Duration) -> Self {
        ExecutionOutcome {
            status,
            rows: Vec::new(),
            error_message: Some(message),
            elapsed,
        }
    }
}

/// Fixed-length digest of an outcome's rows under a comparison policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResultKey(pub String);

impl std::fmt::Display for ResultKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparePolicy {
    pub order_sensitive: bool,
    /// Treat integers, reals and numeric text as the same kind of value.
    pub lenient: bool,
}

impl ComparePolicy {
    /// Order sensitivity follows a top-level `ORDER BY` in the gold query.
    pub fn from_gold(gold_sql: &str, lenient: bool) -> Self {
        ComparePolicy {
            order_sensitive: has_top_level_order_by(gold_sql),
            lenient,
        }
    }
}

pub fn result_key(outcome: &ExecutionOutcome, order_sensitive: bool) -> Result<ResultKey, ExecError> {
    result_key_with(
        outcome,
        ComparePolicy {
            order_sensitive,
            lenient: false,
        },
    )
}

pub fn result_key_with(
    outcome: &ExecutionOutcome,
    policy: ComparePolicy,
) -> Result<ResultKey, ExecError> {
    if !outcome.is_ok() {
        return Err(ExecError::NotExecutable(outcome.status));
    }
    let mut rows: Vec<Vec<u8>> = outcome
        .rows
        .iter()
        .map(|row| {
            let mut buf = Vec::new();
            buf.extend_from_slice(&(row.len() as u64).to_be_bytes());
            for cell in row {
                if policy.lenient {
                    cell.coerced().encode(&mut buf);
                } else {
                    cell.encode(&mut buf);
                }
            }
            buf
        })
        .collect();
    if !policy.order_sensitive {
        rows.sort_unstable();
    }
    let mut h = Sha256::new();
    h.update([u8::from(policy.order_sensitive)]);
    h.update((rows.len() as u64).to_be_bytes());
    for r in &rows {
        h.update((r.len() as u64).to_be_bytes());
        h.update(r);
    }
    Ok(ResultKey(hex::encode(h.finalize())))
}

/// One read-only connection. Not shared across threads.
pub struct SqlExecutor {
    conn: Connection,
}

impl SqlExecutor {
    pub fn open(path: &Path) -> Result<Self, String> {
        if !path.is_file() {
            return Err(format!("database file not found: {}", path.display()));
        }
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| e.to_string())?;
        conn.pragma_update(None, "query_only", true)
            .map_err(|e| e.to_string())?;
        Ok(SqlExecutor { conn })
    }

    pub fn execute(&self, sql: &str, timeout: Duration) -> ExecutionOutcome {
        let start = Instant::now();
        let deadline = start + timeout;
        self.conn
            .progress_handler(1_000, Some(move || Instant::now() >= deadline));
        let result = self.run(sql.trim().trim_end_matches(';').trim());
        self.conn.progress_handler(0, None::<fn() -> bool>);
        let elapsed = start.elapsed();
        match result {
            Ok(rows) => ExecutionOutcome {
                status: ExecStatus::Ok,
                rows,
                error_message: None,
                elapsed,
            },
            Err(e) => {
                let interrupted = matches!(
                    &e,
                    rusqlite::Error::SqliteFailure(f, _)
                        if f.code == rusqlite::ErrorCode::OperationInterrupted
                );
                if interrupted || Instant::now() >= deadline {
                    ExecutionOutcome::failed(
                        ExecStatus::Timeout,
                        format!("interrupted after {:?}", timeout),
                        elapsed,
                    )
                } else {
                    ExecutionOutcome::failed(ExecStatus::Error, e.to_string(), elapsed)
                }
            }
        }
    }

    fn run(&self, sql: &str) -> Result<Vec<Vec<Cell>>, rusqlite::Error> {
        let mut stmt = self.conn.prepare(sql)?;
        let n = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(n);
            for i in 0..n {
                cells.push(Cell::from_value(row.get_ref(i)?));
            }
            out.push(cells);
        }
        Ok(out)
    }
}

/// Executes `sql` against the schema's storage file. Every failure,
/// including an unopenable file, is encoded in the outcome.
pub fn execute(sql: &str, schema: &DatabaseSchema, timeout: Duration) -> ExecutionOutcome {
    execute_at(sql, &schema.storage_path, timeout)
}

pub fn execute_at(sql: &str, path: &Path, timeout: Duration) -> ExecutionOutcome {
    match SqlExecutor::open(path) {
        Ok(ex) => ex.execute(sql, timeout),
        Err(msg) => ExecutionOutcome::failed(ExecStatus::Error, msg, Duration::ZERO),
    }
}
