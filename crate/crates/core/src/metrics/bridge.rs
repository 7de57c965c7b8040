//! Client for metrics served out of process.
//!
//! Newline-delimited JSON over a child's stdin/stdout or a TCP socket:
//!
//! ```text
//! -> {"op":"hello","version":1}
//! <- {"op":"hello","version":1,"name":"comet"}
//! -> {"op":"score","id":1,"batch":[{"gts":[["a","b"]],"hyp":["a"]}]}
//! <- {"op":"score","id":1,"scores":[0.5]}      or
//! <- {"op":"error","id":1,"message":"..."}
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{Metric, MetricError, MetricKind, MetricRequest};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// Program and arguments; the protocol runs over its stdin/stdout.
    Command { program: String, args: Vec<String> },
}

impl std::str::FromStr for Endpoint {
    type Err = MetricError;

    /// Accepts `tcp://host:port`, `tcp:host:port` or `cmd:program arg ...`.
    fn from_str(s: &str) -> Result<Self, MetricError> {
        if let Some(addr) = s.strip_prefix("tcp://").or_else(|| s.strip_prefix("tcp:")) {
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| MetricError::Handshake("empty command endpoint".into()))?;
            return Ok(Endpoint::Command {
                program,
                args: parts.collect(),
            });
        }
        Err(MetricError::Handshake(format!(
            "unrecognized endpoint `{s}` (expected tcp://host:port or cmd:program ...)"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct BridgeOptions {
    pub timeout: Duration,
    pub batch_capacity: usize,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        BridgeOptions {
            timeout: Duration::from_secs(60),
            batch_capacity: 64,
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    broken: bool,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // the reader thread holds a clone, so closing needs an explicit shutdown
        if let Some(socket) = self.socket.take() {
            let _ = socket.shutdown(Shutdown::Both);
        }
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn send(&mut self, msg: &impl Serialize) -> Result<(), MetricError> {
        let mut line = serde_json::to_vec(msg).map_err(|e| MetricError::Protocol(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Value, MetricError> {
        let line = match self.lines.recv_timeout(timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(MetricError::Timeout(timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                return Err(MetricError::Protocol("bridge closed the connection".into()));
            }
        };
        parse_line(&line)
    }
}

/// Parses one response line. Python's `json` module writes bare `NaN` and
/// `Infinity`; those become nulls so they surface as non-finite scores.
fn parse_line(line: &str) -> Result<Value, MetricError> {
    match serde_json::from_str(line) {
        Ok(v) => Ok(v),
        Err(first) => {
            let patched = line
                .replace("-Infinity", "null")
                .replace("Infinity", "null")
                .replace("NaN", "null");
            serde_json::from_str(&patched)
                .map_err(|_| MetricError::Protocol(format!("malformed response `{line}`: {first}")))
        }
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(source);
        for line in reader.lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

/// A metric whose scores come from an external process speaking the bridge
/// protocol. Calls are serialized over the single connection.
pub struct BridgeMetric {
    name: String,
    capacity: usize,
    timeout: Duration,
    conn: Mutex<Connection>,
}

#[derive(Serialize)]
struct Hello {
    op: &'static str,
    version: u64,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    op: &'static str,
    id: u64,
    batch: &'a [MetricRequest],
}

impl BridgeMetric {
    pub fn connect(endpoint: &Endpoint, options: BridgeOptions) -> Result<Self, MetricError> {
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| MetricError::Handshake(format!("cannot connect to {addr}: {e}")))?;
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                let socket = stream.try_clone()?;
                Connection {
                    writer: Box::new(stream),
                    lines: spawn_reader(reader),
                    next_id: 1,
                    broken: false,
                    child: None,
                    socket: Some(socket),
                }
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| MetricError::Handshake(format!("cannot start `{program}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    next_id: 1,
                    broken: false,
                    child: Some(child),
                    socket: None,
                }
            }
        };
        Self::handshake(conn, options)
    }

    fn handshake(mut conn: Connection, options: BridgeOptions) -> Result<Self, MetricError> {
        conn.send(&Hello {
            op: "hello",
            version: PROTOCOL_VERSION,
        })
        .map_err(|e| MetricError::Handshake(e.to_string()))?;
        let reply = conn.recv(options.timeout).map_err(|e| match e {
            MetricError::Timeout(_) => e,
            other => MetricError::Handshake(other.to_string()),
        })?;
        if reply.get("op").and_then(Value::as_str) != Some("hello") {
            return Err(MetricError::Handshake(format!("unexpected reply {reply}")));
        }
        let version = reply.get("version").and_then(Value::as_u64);
        if version != Some(PROTOCOL_VERSION) {
            return Err(MetricError::Handshake(format!(
                "protocol version mismatch: client {PROTOCOL_VERSION}, server {version:?}"
            )));
        }
        let name = reply
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or("external")
            .to_string();
        let mut capacity = options.batch_capacity.max(1);
        if let Some(server_cap) = reply.get("batch_size").and_then(Value::as_u64) {
            capacity = capacity.min(server_cap.max(1) as usize);
        }
        Ok(BridgeMetric {
            name,
            capacity,
            timeout: options.timeout,
            conn: Mutex::new(conn),
        })
    }
}

impl Metric for BridgeMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> MetricKind {
        MetricKind::External
    }

    fn batch_capacity(&self) -> usize {
        self.capacity
    }

    fn single_flight(&self) -> bool {
        true
    }

    fn score_chunk(&self, chunk: &[MetricRequest]) -> Result<Vec<f64>, MetricError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if conn.broken {
            return Err(MetricError::Protocol(
                "connection unusable after an earlier failure".into(),
            ));
        }
        let id = conn.next_id;
        conn.next_id += 1;
        conn.send(&ScoreRequest {
            op: "score",
            id,
            batch: chunk,
        })?;
        let reply = conn.recv(self.timeout)?;
        let reply_id = reply.get("id").and_then(Value::as_u64);
        if reply_id != Some(id) {
            conn.broken = true;
            return Err(MetricError::Protocol(format!(
                "expected response id {id}, got {reply_id:?}"
            )));
        }
        match reply.get("op").and_then(Value::as_str) {
            Some("score") => {
                let scores = reply
                    .get("scores")
                    .and_then(Value::as_array)
                    .ok_or_else(|| MetricError::Protocol("score response without `scores`".into()))?;
                scores
                    .iter()
                    .enumerate()
                    .map(|(i, v)| match v {
                        Value::Null => Err(MetricError::NonFinite {
                            index: i,
                            value: f64::NAN,
                        }),
                        v => v.as_f64().ok_or_else(|| {
                            MetricError::Protocol(format!("non-numeric score `{v}`"))
                        }),
                    })
                    .collect()
            }
            Some("error") => Err(MetricError::ChunkFailed {
                chunk: 0,
                message: reply
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified error")
                    .to_string(),
            }),
            other => Err(MetricError::Protocol(format!("unexpected op {other:?}"))),
        }
    }
}
