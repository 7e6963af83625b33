//! Adapter for classifiers living in another process.
//!
//! Wire protocol, one JSON object per message:
//!
//! ```text
//! {"op":"info"}                          -> {"classes": C, "dim": D}
//! {"op":"predict","points":[[..],..]}    -> {"probs":[[..],..]}
//! ```
//!
//! Messages travel as newline-delimited JSON over a child process's stdio,
//! or as the body of `POST <url>/predict`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One request/response exchange with a backend.
pub trait Transport: Send {
    fn exchange(&mut self, request: &str) -> Result<String>;
}

struct StdioTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioTransport {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend(format!("cannot start '{command}': {e}"), ""))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(StdioTransport {
            child,
            stdin,
            stdout,
        })
    }
}

impl Transport for StdioTransport {
    fn exchange(&mut self, request: &str) -> Result<String> {
        writeln!(self.stdin, "{request}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::backend(format!("write to backend failed: {e}"), ""))?;
        let mut line = String::new();
        let read = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::backend(format!("read from backend failed: {e}"), ""))?;
        if read == 0 {
            return Err(Error::backend("backend closed its output", ""));
        }
        Ok(line)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl Transport for HttpTransport {
    fn exchange(&mut self, request: &str) -> Result<String> {
        let mut response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(request)
            .map_err(|e| Error::backend(format!("POST {} failed: {e}", self.url), ""))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::backend(format!("reading response failed: {e}"), ""))
    }
}

/// Remote classifier reached through a [`Transport`]. Requests from
/// concurrent callers are serialized.
pub struct ExternalClassifier {
    endpoint: String,
    classes: usize,
    dim: usize,
    transport: Mutex<Box<dyn Transport>>,
}

impl std::fmt::Debug for ExternalClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClassifier")
            .field("endpoint", &self.endpoint)
            .field("classes", &self.classes)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ExternalClassifier {
    /// Connects to `http(s)://…` URLs over HTTP, otherwise runs the string
    /// as a shell command speaking the protocol on stdio.
    pub fn connect(command_or_url: &str, class_count: usize) -> Result<Self> {
        let transport: Box<dyn Transport> =
            if command_or_url.starts_with("http://") || command_or_url.starts_with("https://") {
                let base = command_or_url.trim_end_matches('/');
                let url = if base.ends_with("/predict") {
                    base.to_owned()
                } else {
                    format!("{base}/predict")
                };
                Box::new(HttpTransport {
                    url,
                    agent: ureq::Agent::new_with_defaults(),
                })
            } else {
                Box::new(StdioTransport::spawn(command_or_url)?)
            };
        Self::with_transport(transport, command_or_url, class_count)
    }

    /// Performs the handshake over an arbitrary transport.
    pub fn with_transport(
        mut transport: Box<dyn Transport>,
        endpoint: &str,
        class_count: usize,
    ) -> Result<Self> {
        let raw = transport.exchange(&json!({"op": "info"}).to_string())?;
        let reply: Value = serde_json::from_str(raw.trim())
            .map_err(|e| Error::backend(format!("handshake reply is not JSON: {e}"), &raw))?;
        let field = |name: &str| {
            reply
                .get(name)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::backend(format!("handshake reply lacks '{name}'"), &raw))
        };
        let classes = field("classes")?;
        let dim = field("dim")?;
        if classes != class_count {
            return Err(Error::backend(
                format!("backend declares {classes} classes, expected {class_count}"),
                raw,
            ));
        }
        if dim == 0 || classes < 2 {
            return Err(Error::backend("backend declares an empty problem", raw));
        }
        Ok(ExternalClassifier {
            endpoint: endpoint.to_owned(),
            classes,
            dim,
            transport: Mutex::new(transport),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    /// One wire request for all rows of `points`.
    pub(crate) fn predict_chunk(&self, points: &Matrix) -> Result<Matrix> {
        let request = json!({"op": "predict", "points": points.to_rows()}).to_string();
        let raw = {
            let mut transport = self
                .transport
                .lock()
                .map_err(|_| Error::backend("transport lock poisoned", ""))?;
            transport.exchange(&request)?
        };
        parse_probs(&raw, points.rows(), self.classes)
    }
}

fn parse_probs(raw: &str, rows: usize, classes: usize) -> Result<Matrix> {
    let garbled = |why: &str| Error::backend(format!("malformed predict reply: {why}"), raw);
    let reply: Value = serde_json::from_str(raw.trim()).map_err(|e| garbled(&e.to_string()))?;
    let probs = reply
        .get("probs")
        .and_then(Value::as_array)
        .ok_or_else(|| garbled("missing 'probs' array"))?;
    if probs.len() != rows {
        return Err(garbled(&format!("{} rows for {rows} points", probs.len())));
    }
    let mut out = Matrix::zeros(rows, classes);
    for (i, row) in probs.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| garbled("row is not an array"))?;
        if row.len() != classes {
            return Err(garbled(&format!("row of length {} for {classes} classes", row.len())));
        }
        let dst = out.row_mut(i);
        for (d, v) in dst.iter_mut().zip(row) {
            *d = v
                .as_f64()
                .filter(|p| p.is_finite() && *p >= 0.0)
                .ok_or_else(|| garbled("entry is not a nonnegative number"))?;
        }
        let sum: f64 = dst.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(garbled(&format!("row {i} sums to {sum}")));
        }
        dst.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(out)
}
