//! Line-delimited JSON protocol for out-of-process execution backends.
//!
//! The client writes one request per line and reads one response per line:
//!
//! ```text
//! -> {"id": 7, "sql": "SELECT 1", "timeout_ms": 5000}
//! <- {"id": 7, "status": "ok", "rows": [[1]], "elapsed_ms": 0.4}
//! <- {"id": 8, "status": "error", "error": "no such table: t"}
//! <- {"id": 9, "status": "timeout"}
//! ```
//!
//! A closed stream or an unparseable response is a transport failure.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::exec::{ExecStatus, ExecutionBackend, ExecutionResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: u64,
    pub sql: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(flatten)]
    pub result: ExecutionResult,
}

/// Extra time granted past the query timeout before the client gives up.
pub const DEFAULT_GRACE_MS: u64 = 1000;

struct Conn {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Client side of the protocol over any byte stream pair. Calls are
/// serialized on one connection.
pub struct LineBackend {
    conn: Mutex<Conn>,
    grace: Duration,
    child: Option<Mutex<Child>>,
}

impl LineBackend {
    /// Wraps an already-open stream pair. A reader thread forwards lines so
    /// that each call can wait with a deadline.
    pub fn from_streams<R, W>(reader: R, writer: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Self {
            conn: Mutex::new(Conn { writer: Box::new(writer), lines: rx, next_id: 1 }),
            grace: Duration::from_millis(DEFAULT_GRACE_MS),
            child: None,
        }
    }

    /// Spawns `cmd` and speaks the protocol over its stdin/stdout.
    pub fn spawn(cmd: &mut Command) -> Result<Self> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Transport("child has no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Transport("child has no stdout".into()))?;
        let mut backend = Self::from_streams(BufReader::new(stdout), stdin);
        backend.child = Some(Mutex::new(child));
        Ok(backend)
    }

    /// Connects to a backend listening on a TCP socket.
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect: {e}")))?;
        let reader = stream.try_clone()?;
        Ok(Self::from_streams(BufReader::new(reader), stream))
    }

    pub fn with_grace(mut self, grace: Duration) -> Self {
        self.grace = grace;
        self
    }
}

impl Drop for LineBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl ExecutionBackend for LineBackend {
    fn execute(&self, sql: &str, timeout_ms: u64) -> Result<ExecutionResult> {
        let mut conn = self.conn.lock().map_err(|_| Error::Transport("connection lock poisoned".into()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        let req = Request { id, sql: sql.to_string(), timeout_ms };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| Error::Transport(format!("write request: {e}")))?;

        let sent = Instant::now();
        let deadline = sent + Duration::from_millis(timeout_ms) + self.grace;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match conn.lines.recv_timeout(left) {
                Ok(Ok(l)) => l,
                Ok(Err(e)) => return Err(Error::Transport(format!("read response: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Ok(ExecutionResult::timeout(Some(sent.elapsed().as_secs_f64() * 1e3)))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Transport("backend closed the connection".into()))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let resp: Response =
                serde_json::from_str(&line).map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
            // responses to earlier calls that timed out on our side are stale
            if resp.id != id {
                continue;
            }
            resp.result.validate().map_err(|e| Error::Transport(format!("invalid response: {e}")))?;
            return Ok(resp.result);
        }
    }
}

/// Server loop: answers each request line using `backend`. Malformed requests
/// get an error response with id 0. A transport failure inside `backend`
/// ends the session so the client observes it as one too.
pub fn serve<B, R, W>(backend: &B, reader: R, mut writer: W) -> Result<()>
where
    B: ExecutionBackend + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => {
                let start = Instant::now();
                let mut result = backend.execute(&req.sql, req.timeout_ms)?;
                if result.elapsed_ms.is_none() {
                    result.elapsed_ms = Some(start.elapsed().as_secs_f64() * 1e3);
                }
                if result.status == ExecStatus::Ok && result.elapsed_ms.is_some_and(|ms| ms > req.timeout_ms as f64) {
                    result = ExecutionResult::timeout(result.elapsed_ms);
                }
                Response { id: req.id, result }
            }
            Err(e) => Response { id: 0, result: ExecutionResult::error(format!("malformed request: {e}")) },
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::exec::{Cell, FixtureBackend};

    #[test]
    fn response_field_names() {
        let r = Response { id: 3, result: ExecutionResult::ok(vec![vec![Cell::Int(1)]]).with_elapsed(1.5) };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":3,"status":"ok","rows":[[1]],"elapsed_ms":1.5}"#);
        let e: Response = serde_json::from_str(r#"{"id":4,"status":"timeout"}"#).unwrap();
        assert_eq!(e.result.status, ExecStatus::Timeout);
    }

    #[test]
    fn serve_answers_in_order() {
        let fx = FixtureBackend::from_reader(r#"{"sql":"SELECT 1","result":{"status":"ok","rows":[[1]]}}"#.as_bytes())
            .unwrap();
        let input = "{\"id\":1,\"sql\":\"select 1\",\"timeout_ms\":100}\nnot json\n";
        let mut out = Vec::new();
        serve(&fx, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Response> =
            String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].id, 1);
        assert!(lines[0].result.is_ok());
        assert_eq!(lines[1].id, 0);
        assert_eq!(lines[1].result.status, ExecStatus::Error);
    }
}
