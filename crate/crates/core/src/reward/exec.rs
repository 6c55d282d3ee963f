//! Execution results, result-set matching and the scripted fixture backend.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sqlref::{canonical_text, has_top_level_order_by};

/// Absolute tolerance for numeric cell comparison.
pub const NUMERIC_TOLERANCE: f64 = 1e-9;

/// A typed result cell. Serialized as the bare JSON value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl Cell {
    fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Real(r) => Some(*r),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Bool(_) => 1,
            Cell::Int(_) | Cell::Real(_) => 2,
            Cell::Text(_) => 3,
        }
    }

    /// Total order used to sort rows before comparison.
    fn sort_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Bool(a), Cell::Bool(b)) => a.cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Int(a), Cell::Int(b)) => a.cmp(b),
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => self.rank().cmp(&other.rank()),
            },
        }
    }
}

/// Null equals null, numbers within `NUMERIC_TOLERANCE`, everything else exact.
pub fn cells_equal(a: &Cell, b: &Cell) -> bool {
    match (a, b) {
        (Cell::Null, Cell::Null) => true,
        (Cell::Bool(x), Cell::Bool(y)) => x == y,
        (Cell::Text(x), Cell::Text(y)) => x == y,
        (Cell::Int(x), Cell::Int(y)) => x == y,
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() <= NUMERIC_TOLERANCE,
            _ => false,
        },
    }
}

fn rows_equal(a: &[Cell], b: &[Cell]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| cells_equal(x, y))
}

fn row_cmp(a: &[Cell], b: &[Cell]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.sort_cmp(y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

/// Outcome of running one query. `rows` is present iff `status` is ok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<Cell>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

impl ExecutionResult {
    pub fn ok(rows: Vec<Vec<Cell>>) -> Self {
        Self { status: ExecStatus::Ok, rows: Some(rows), error: None, elapsed_ms: None }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        Self { status: ExecStatus::Error, rows: None, error: Some(msg.into()), elapsed_ms: None }
    }

    pub fn timeout(elapsed_ms: Option<f64>) -> Self {
        Self { status: ExecStatus::Timeout, rows: None, error: None, elapsed_ms }
    }

    pub fn with_elapsed(mut self, ms: f64) -> Self {
        self.elapsed_ms = Some(ms);
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_ok() != self.rows.is_some() {
            return Err(Error::Input(format!(
                "execution result with status {:?} must {}carry rows",
                self.status,
                if self.is_ok() { "" } else { "not " }
            )));
        }
        Ok(())
    }
}

/// Something that runs SQL. `Err` means the backend itself failed (transport),
/// which is not the same as a query that ran and failed.
pub trait ExecutionBackend: Send + Sync {
    fn execute(&self, sql: &str, timeout_ms: u64) -> Result<ExecutionResult>;
}

impl<B: ExecutionBackend + ?Sized> ExecutionBackend for &B {
    fn execute(&self, sql: &str, timeout_ms: u64) -> Result<ExecutionResult> {
        (**self).execute(sql, timeout_ms)
    }
}

impl<B: ExecutionBackend + ?Sized> ExecutionBackend for Box<B> {
    fn execute(&self, sql: &str, timeout_ms: u64) -> Result<ExecutionResult> {
        (**self).execute(sql, timeout_ms)
    }
}

/// 1 iff the query ran to completion within `timeout_ms`. A reported elapsed
/// time above the limit is downgraded to a timeout.
pub fn execution_reward<B: ExecutionBackend + ?Sized>(
    sql: &str,
    backend: &B,
    timeout_ms: u64,
) -> Result<(f64, ExecutionResult)> {
    let mut res = backend.execute(sql, timeout_ms)?;
    res.validate().map_err(|e| Error::Transport(format!("backend returned an invalid result: {e}")))?;
    if res.is_ok() && res.elapsed_ms.is_some_and(|ms| ms > timeout_ms as f64) {
        res = ExecutionResult::timeout(res.elapsed_ms);
    }
    let r = if res.is_ok() { 1.0 } else { 0.0 };
    Ok((r, res))
}

/// 1 iff both results are ok and their row collections agree: as sequences
/// when `order_sensitive`, as multisets otherwise.
pub fn match_reward(predicted: &ExecutionResult, gold: &ExecutionResult, order_sensitive: bool) -> f64 {
    let (Some(p), Some(g)) = (&predicted.rows, &gold.rows) else {
        return 0.0;
    };
    if !(predicted.is_ok() && gold.is_ok()) || p.len() != g.len() {
        return 0.0;
    }
    let same = if order_sensitive { p.iter().zip(g).all(|(a, b)| rows_equal(a, b)) } else { multiset_equal(p, g) };
    if same {
        1.0
    } else {
        0.0
    }
}

fn multiset_equal(p: &[Vec<Cell>], g: &[Vec<Cell>]) -> bool {
    let mut ps: Vec<&Vec<Cell>> = p.iter().collect();
    let mut gs: Vec<&Vec<Cell>> = g.iter().collect();
    ps.sort_by(|a, b| row_cmp(a, b));
    gs.sort_by(|a, b| row_cmp(a, b));
    if ps.iter().zip(&gs).all(|(a, b)| rows_equal(a, b)) {
        return true;
    }
    // tolerance can reorder near-equal numbers; fall back to greedy pairing
    let mut used = vec![false; gs.len()];
    'rows: for a in &ps {
        for (j, b) in gs.iter().enumerate() {
            if !used[j] && rows_equal(a, b) {
                used[j] = true;
                continue 'rows;
            }
        }
        return false;
    }
    true
}

/// Match with order sensitivity taken from the predicted query's top-level ORDER BY.
pub fn score_match(predicted_sql: &str, predicted: &ExecutionResult, gold: &ExecutionResult) -> f64 {
    match_reward(predicted, gold, has_top_level_order_by(predicted_sql))
}

/// Hex sha256 of the canonical query text.
pub fn normalized_sql_hash(sql: &str) -> String {
    let digest = Sha256::digest(canonical_text(sql).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One scripted response. Keyed by `sql` (hashed on load) or a precomputed `sql_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ExecutionResult>,
    /// Every call fails at the transport level.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub transport_failure: bool,
    /// The first `fail_first` calls fail at the transport level.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_first: u32,
}

fn is_zero(x: &u32) -> bool {
    *x == 0
}

/// Scripted backend keyed by normalized SQL hash. Unknown queries get an
/// error result, as a real engine would for a query it cannot run.
#[derive(Debug, Default)]
pub struct FixtureBackend {
    entries: HashMap<String, FixtureEntry>,
    calls: Mutex<HashMap<String, u32>>,
}

impl FixtureBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Result<Self> {
        let mut map = HashMap::new();
        for e in entries {
            let key = match (&e.sql, &e.sql_hash) {
                (Some(sql), _) => normalized_sql_hash(sql),
                (None, Some(h)) => h.to_ascii_lowercase(),
                (None, None) => return Err(Error::Input("fixture entry needs sql or sql_hash".into())),
            };
            if !e.transport_failure && e.result.is_none() {
                return Err(Error::Input(format!("fixture entry {key} has no result")));
            }
            if let Some(r) = &e.result {
                r.validate()?;
            }
            map.insert(key, e);
        }
        Ok(Self { entries: map, calls: Mutex::new(HashMap::new()) })
    }

    /// Reads one JSON entry per line; blank lines and `#` comments are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let e: FixtureEntry =
                serde_json::from_str(t).map_err(|e| Error::Parse(format!("fixture line {}: {e}", n + 1)))?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ExecutionBackend for FixtureBackend {
    fn execute(&self, sql: &str, _timeout_ms: u64) -> Result<ExecutionResult> {
        let key = normalized_sql_hash(sql);
        let Some(entry) = self.entries.get(&key) else {
            return Ok(ExecutionResult::error("no scripted result for query"));
        };
        if entry.transport_failure {
            return Err(Error::Transport("scripted transport failure".into()));
        }
        if entry.fail_first > 0 {
            let mut calls = self.calls.lock().map_err(|_| Error::Transport("fixture lock poisoned".into()))?;
            let n = calls.entry(key).or_insert(0);
            *n += 1;
            if *n <= entry.fail_first {
                return Err(Error::Transport(format!("scripted transport failure ({} of {})", n, entry.fail_first)));
            }
        }
        Ok(entry.result.clone().expect("validated on load"))
    }
}
