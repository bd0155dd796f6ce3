//! Line-delimited JSON protocol for external training workers.
//!
//! The worker is spawned through `sh -c`, announces itself with
//! `{"protocol":"seedtune/1"}` and then answers one request line per trial:
//!
//! ```text
//! -> {"id":0,"config":{"lr":0.001},"seed":17,"budget":1.0}
//! <- {"id":0,"value":182.5}
//! <- {"id":0,"error":"diverged"}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub const PROTOCOL: &str = "seedtune/1";

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("failed to spawn worker `{cmd}`: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker did not answer within {0:?}")]
    Timeout(Duration),
    #[error("worker exited ({status}); stderr: {stderr}")]
    Exited { status: String, stderr: String },
    #[error("worker reported an error for trial {id}: {message}")]
    TrialFailed { id: u64, message: String },
    #[error("worker i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerRequest<'a> {
    pub id: u64,
    pub config: &'a BTreeMap<String, f64>,
    pub seed: u64,
    pub budget: f64,
}

/// A live worker process.
pub struct WorkerClient {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    timeout: Duration,
}

impl WorkerClient {
    /// Spawns `cmd` and waits for the handshake line.
    pub fn spawn(cmd: &str, timeout: Duration) -> Result<Self, WorkerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| WorkerError::Spawn {
                cmd: cmd.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr_pipe = child.stderr.take().expect("stderr is piped");

        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = stderr_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                if let Ok(mut s) = sink.lock() {
                    s.push_str(&String::from_utf8_lossy(&buf[..n]));
                }
            }
        });

        let mut client = Self {
            child,
            stdin,
            lines,
            stderr,
            timeout,
        };
        let line = client.read_line()?;
        let hello: Value = serde_json::from_str(&line)
            .map_err(|e| WorkerError::Protocol(format!("handshake is not JSON ({e}): {line}")))?;
        if hello.get("protocol").and_then(Value::as_str) != Some(PROTOCOL) {
            return Err(WorkerError::Protocol(format!(
                "expected handshake {{\"protocol\":\"{PROTOCOL}\"}}, got {line}"
            )));
        }
        Ok(client)
    }

    fn exit_error(&mut self) -> WorkerError {
        let status = wait_briefly(&mut self.child);
        // Give the stderr reader a moment to drain.
        thread::sleep(Duration::from_millis(20));
        let stderr = self.stderr.lock().map(|s| s.trim().to_string()).unwrap_or_default();
        WorkerError::Exited { status, stderr }
    }

    fn read_line(&mut self) -> Result<String, WorkerError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(WorkerError::Io(e)),
            Err(RecvTimeoutError::Timeout) => {
                self.kill();
                Err(WorkerError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(self.exit_error()),
        }
    }

    /// Sends one trial and waits for its answer. `id` mismatches, non-numeric
    /// values and malformed lines are protocol errors.
    pub fn request(&mut self, request: &WorkerRequest<'_>) -> Result<f64, WorkerError> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        if self.stdin.write_all(line.as_bytes()).and_then(|_| self.stdin.flush()).is_err() {
            return Err(self.exit_error());
        }
        let reply = self.read_line()?;
        parse_reply(&reply, request.id)
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for WorkerClient {
    fn drop(&mut self) {
        self.kill();
    }
}

fn wait_briefly(child: &mut Child) -> String {
    for _ in 0..20 {
        if let Ok(Some(status)) = child.try_wait() {
            return status.to_string();
        }
        thread::sleep(Duration::from_millis(10));
    }
    "still running".to_string()
}

/// Parses a reply line for trial `id`.
pub fn parse_reply(line: &str, id: u64) -> Result<f64, WorkerError> {
    let v: Value = serde_json::from_str(line)
        .map_err(|e| WorkerError::Protocol(format!("reply is not JSON ({e}): {line}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| WorkerError::Protocol(format!("reply is not an object: {line}")))?;
    match obj.get("id").and_then(Value::as_u64) {
        Some(got) if got == id => {}
        Some(got) => {
            return Err(WorkerError::Protocol(format!("expected id {id}, got {got}")));
        }
        None => return Err(WorkerError::Protocol(format!("reply without integer id: {line}"))),
    }
    if let Some(err) = obj.get("error") {
        return Err(WorkerError::TrialFailed {
            id,
            message: err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string()),
        });
    }
    match obj.get("value") {
        Some(Value::Number(n)) => n
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| WorkerError::Protocol(format!("value is not a finite number: {n}"))),
        Some(other) => Err(WorkerError::Protocol(format!(
            "type check failed: value must be a number, got {other}"
        ))),
        None => Err(WorkerError::Protocol(format!("reply has neither value nor error: {line}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_reply(r#"{"id":3,"value":1.5}"#, 3).unwrap(), 1.5);
        assert!(matches!(
            parse_reply(r#"{"id":4,"value":1.5}"#, 3),
            Err(WorkerError::Protocol(_))
        ));
        assert!(matches!(
            parse_reply(r#"{"id":3,"error":"nan loss"}"#, 3),
            Err(WorkerError::TrialFailed { id: 3, .. })
        ));
        let err = parse_reply(r#"{"id":3,"value":"1.5"}"#, 3).unwrap_err();
        assert!(err.to_string().contains("type check"));
        assert!(matches!(parse_reply("{\"id\":3", 3), Err(WorkerError::Protocol(_))));
    }

    #[test]
    fn request_wire_format() {
        let config = BTreeMap::from([("x".to_string(), 0.25)]);
        let req = WorkerRequest {
            id: 7,
            config: &config,
            seed: 11,
            budget: 1.0,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":7,"config":{"x":0.25},"seed":11,"budget":1.0}"#
        );
    }

    #[test]
    fn shell_worker_round_trip() {
        let cmd = r#"echo '{"protocol":"seedtune/1"}'; read line; echo '{"id":0,"value":2.5}'"#;
        let mut w = WorkerClient::spawn(cmd, Duration::from_secs(5)).unwrap();
        let config = BTreeMap::from([("x".to_string(), 0.5)]);
        let v = w
            .request(&WorkerRequest {
                id: 0,
                config: &config,
                seed: 1,
                budget: 1.0,
            })
            .unwrap();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn missing_handshake_and_crash() {
        let err = WorkerClient::spawn(r#"echo '{"hello":1}'"#, Duration::from_secs(5)).err();
        assert!(matches!(err, Some(WorkerError::Protocol(_))));
        let err = WorkerClient::spawn("echo boom >&2; exit 3", Duration::from_secs(5)).err();
        match err {
            Some(WorkerError::Exited { stderr, .. }) => assert!(stderr.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slow_worker_times_out() {
        let err = WorkerClient::spawn("sleep 5", Duration::from_millis(200)).err();
        assert!(matches!(err, Some(WorkerError::Timeout(_))));
    }
}
