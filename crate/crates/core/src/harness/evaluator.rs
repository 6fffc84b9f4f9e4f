//! Objective handles and the external-evaluator protocol.
//!
//! An external evaluator is any program that reads one request line
//! `{"x": [..raw coords..], "id": n}` and answers with one line, either
//! `{"y": value}` or `{"error": "message"}`. Three launch modes exist:
//!
//! - `one-shot`: one process per evaluation, request on stdin, reply on stdout.
//! - `persistent`: processes stay alive and stream one request/reply pair per
//!   evaluation; an idle pool grows up to the number of concurrent callers.
//! - `file`: the request is written to `{input}`, the command is run, and the
//!   reply is read from `{output}` once the command exits.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("evaluation timed out after {0:.3} s")]
    Timeout(f64),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("evaluator returned a non-finite value")]
    NonFiniteValue,
    #[error("evaluator process crashed: {0}")]
    ProcessCrash(String),
    #[error("evaluator reported failure: {0}")]
    Reported(String),
    #[error("could not launch evaluator: {0}")]
    Spawn(String),
    #[error("point outside the objective's domain: {0}")]
    OutOfBounds(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl EvalError {
    /// Short machine-friendly tag used in journals.
    pub fn tag(&self) -> &'static str {
        match self {
            EvalError::Timeout(_) => "timeout",
            EvalError::ProtocolViolation(_) => "protocol_violation",
            EvalError::NonFiniteValue => "non_finite_value",
            EvalError::ProcessCrash(_) => "process_crash",
            EvalError::Reported(_) => "evaluator_failure",
            EvalError::Spawn(_) => "spawn",
            EvalError::OutOfBounds(_) => "out_of_bounds",
            EvalError::Io(_) => "io",
        }
    }
}

/// A black-box objective to be minimized. `x` is in raw units and `id` is the
/// run's dispatch index for this evaluation.
pub trait Objective: Send + Sync {
    fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError>;
}

impl<F> Objective for F
where
    F: Fn(&[f64], usize) -> Result<f64, EvalError> + Send + Sync,
{
    fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        self(x, id)
    }
}

pub type ObjectiveHandle = Arc<dyn Objective>;

/// Negates an objective so a maximization problem can be minimized.
pub struct Negated(pub ObjectiveHandle);

impl Objective for Negated {
    fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        self.0.evaluate(x, id).map(|v| -v)
    }
}

#[derive(Serialize)]
struct Request<'a> {
    x: &'a [f64],
    id: usize,
}

/// The request line for one evaluation, without the trailing newline.
pub fn encode_request(x: &[f64], id: usize) -> String {
    serde_json::to_string(&Request { x, id }).expect("request serializes")
}

fn looks_non_finite(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    lower.contains("\"y\"") && (lower.contains("nan") || lower.contains("inf"))
}

/// Parses one reply line.
pub fn parse_response(line: &str) -> Result<f64, EvalError> {
    let text = line.trim_end_matches(['\n', '\r']);
    if text.trim().is_empty() {
        return Err(EvalError::ProtocolViolation("empty reply".into()));
    }
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            if looks_non_finite(text) || e.to_string().contains("out of range") {
                return Err(EvalError::NonFiniteValue);
            }
            return Err(EvalError::ProtocolViolation(format!("malformed reply: {e}")));
        }
    };
    let Value::Object(map) = value else {
        return Err(EvalError::ProtocolViolation("reply is not a JSON object".into()));
    };
    if map.len() != 1 {
        let keys: Vec<&str> = map.keys().map(String::as_str).collect();
        return Err(EvalError::ProtocolViolation(format!(
            "reply must hold exactly one of `y` or `error`, got {keys:?}"
        )));
    }
    if let Some(y) = map.get("y") {
        return match y {
            Value::Number(n) => match n.as_f64() {
                Some(v) if v.is_finite() => Ok(v),
                _ => Err(EvalError::NonFiniteValue),
            },
            Value::String(s) if s.parse::<f64>().is_ok_and(|v| !v.is_finite()) => {
                Err(EvalError::NonFiniteValue)
            }
            other => Err(EvalError::ProtocolViolation(format!("`y` must be a number, got {other}"))),
        };
    }
    if let Some(e) = map.get("error") {
        let msg = match e {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        return Err(EvalError::Reported(msg));
    }
    Err(EvalError::ProtocolViolation(format!(
        "unknown reply key {:?}",
        map.keys().next()
    )))
}

/// Sends one request over a stream pair and parses the reply.
pub fn exchange<R: BufRead, W: Write>(reader: &mut R, writer: &mut W, x: &[f64], id: usize) -> Result<f64, EvalError> {
    writeln!(writer, "{}", encode_request(x, id)).map_err(|e| EvalError::ProcessCrash(e.to_string()))?;
    writer.flush().map_err(|e| EvalError::ProcessCrash(e.to_string()))?;
    let mut line = String::new();
    let n = reader
        .read_line(&mut line)
        .map_err(|e| EvalError::ProtocolViolation(format!("unreadable reply: {e}")))?;
    if n == 0 {
        return Err(EvalError::ProcessCrash("evaluator closed its output".into()));
    }
    if !line.ends_with('\n') {
        return Err(EvalError::ProtocolViolation("truncated reply line".into()));
    }
    parse_response(&line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExternalMode {
    OneShot,
    Persistent,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    /// Program and arguments. In `file` mode `{input}` and `{output}` are
    /// replaced by the request and reply paths.
    pub command: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: ExternalMode,
    /// Per-evaluation wall-clock limit in seconds.
    #[serde(default)]
    pub timeout_s: Option<f64>,
    /// Working directory for launched processes.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

fn default_mode() -> ExternalMode {
    ExternalMode::OneShot
}

struct LiveProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
}

impl LiveProcess {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Reads lines from `stdout` on a helper thread so reads can time out.
/// The final line is forwarded even without a trailing newline.
fn spawn_line_reader<R: io::Read + Send + 'static>(stdout: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stdout);
        loop {
            let mut buf = Vec::new();
            let msg = match reader.read_until(b'\n', &mut buf) {
                Ok(0) => {
                    let _ = tx.send(Err(io::Error::new(io::ErrorKind::UnexpectedEof, "end of output")));
                    break;
                }
                Ok(_) => String::from_utf8(buf)
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "reply is not valid UTF-8")),
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            };
            if tx.send(msg).is_err() {
                break;
            }
        }
    });
    rx
}

fn not_utf8(e: &io::Error) -> Option<EvalError> {
    (e.kind() == io::ErrorKind::InvalidData).then(|| EvalError::ProtocolViolation(e.to_string()))
}

/// Runs evaluations through an external program.
pub struct ExternalEvaluator {
    spec: ExternalSpec,
    idle: Mutex<Vec<LiveProcess>>,
    spawns: AtomicUsize,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("spec", &self.spec)
            .field("spawns", &self.spawn_count())
            .finish()
    }
}

impl ExternalEvaluator {
    pub fn new(spec: ExternalSpec) -> Result<Self, EvalError> {
        if spec.command.is_empty() || spec.command[0].trim().is_empty() {
            return Err(EvalError::Spawn("empty command".into()));
        }
        Ok(Self {
            spec,
            idle: Mutex::new(Vec::new()),
            spawns: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ExternalSpec {
        &self.spec
    }

    /// Processes launched so far.
    pub fn spawn_count(&self) -> usize {
        self.spawns.load(Ordering::SeqCst)
    }

    fn timeout(&self) -> Option<Duration> {
        self.spec.timeout_s.filter(|t| *t > 0.0).map(Duration::from_secs_f64)
    }

    fn command(&self, substitutions: &[(&str, String)]) -> Command {
        let args: Vec<String> = self
            .spec
            .command
            .iter()
            .map(|a| {
                substitutions
                    .iter()
                    .fold(a.clone(), |acc, (k, v)| acc.replace(k, v))
            })
            .collect();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..]);
        if let Some(dir) = &self.spec.workdir {
            cmd.current_dir(dir);
        }
        cmd
    }

    fn spawn_piped(&self) -> Result<LiveProcess, EvalError> {
        let mut child = self
            .command(&[])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EvalError::Spawn(format!("{}: {e}", self.spec.command[0])))?;
        self.spawns.fetch_add(1, Ordering::SeqCst);
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(LiveProcess {
            child,
            stdin,
            lines: spawn_line_reader(stdout),
        })
    }

    fn await_line(&self, proc: &mut LiveProcess) -> Result<String, EvalError> {
        let received = match self.timeout() {
            Some(t) => proc.lines.recv_timeout(t),
            None => proc.lines.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match received {
            Ok(Ok(line)) => {
                if !line.ends_with('\n') {
                    return Err(EvalError::ProtocolViolation("truncated reply line".into()));
                }
                Ok(line)
            }
            Ok(Err(e)) if not_utf8(&e).is_some() => Err(not_utf8(&e).expect("checked")),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                let status = proc.child.try_wait().ok().flatten();
                Err(EvalError::ProcessCrash(match status {
                    Some(s) => format!("exited with {s} before replying"),
                    None => "closed its output before replying".into(),
                }))
            }
            Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout(self.spec.timeout_s.unwrap_or(0.0))),
        }
    }

    fn send(proc: &mut LiveProcess, x: &[f64], id: usize) -> Result<(), EvalError> {
        writeln!(proc.stdin, "{}", encode_request(x, id))
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| EvalError::ProcessCrash(format!("cannot write request: {e}")))
    }

    fn evaluate_one_shot(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        let mut proc = self.spawn_piped()?;
        let sent = Self::send(&mut proc, x, id);
        let LiveProcess { child, stdin, lines } = proc;
        drop(stdin);
        self.finish_one_shot(child, lines, sent)
    }

    fn finish_one_shot(
        &self,
        child: Child,
        lines: Receiver<io::Result<String>>,
        sent: Result<(), EvalError>,
    ) -> Result<f64, EvalError> {
        let mut holder = OneShot { child, lines };
        let res = sent
            .and_then(|_| holder.await_line(self.timeout(), self.spec.timeout_s))
            .and_then(|l| parse_response(&l));
        let _ = holder.child.kill();
        let _ = holder.child.wait();
        res
    }

    fn evaluate_persistent(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        let reused = self.idle.lock().expect("evaluator pool poisoned").pop();
        let mut proc = match reused {
            // a pooled process with unread output is replaced
            Some(p) if p.lines.try_recv().is_ok() => {
                p.kill();
                self.spawn_piped()?
            }
            Some(p) => p,
            None => self.spawn_piped()?,
        };
        let res = Self::send(&mut proc, x, id)
            .and_then(|_| self.await_line(&mut proc))
            .and_then(|l| parse_response(&l));
        match &res {
            Ok(_) | Err(EvalError::Reported(_)) | Err(EvalError::NonFiniteValue) => {
                self.idle.lock().expect("evaluator pool poisoned").push(proc);
            }
            Err(_) => proc.kill(),
        }
        res
    }

    fn evaluate_file(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let dir = std::env::temp_dir().join(format!(
            "linebo-eval-{}-{}-{}",
            std::process::id(),
            id,
            COUNTER.fetch_add(1, Ordering::SeqCst)
        ));
        fs::create_dir_all(&dir).map_err(|e| EvalError::Io(e.to_string()))?;
        let input = dir.join("request.json");
        let output = dir.join("reply.json");
        let res = (|| {
            fs::write(&input, format!("{}\n", encode_request(x, id))).map_err(|e| EvalError::Io(e.to_string()))?;
            let mut child = self
                .command(&[
                    ("{input}", input.display().to_string()),
                    ("{output}", output.display().to_string()),
                ])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .map_err(|e| EvalError::Spawn(format!("{}: {e}", self.spec.command[0])))?;
            self.spawns.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            let status = loop {
                if let Some(s) = child.try_wait().map_err(|e| EvalError::Io(e.to_string()))? {
                    break s;
                }
                if self.timeout().is_some_and(|t| started.elapsed() > t) {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EvalError::Timeout(self.spec.timeout_s.unwrap_or(0.0)));
                }
                thread::sleep(Duration::from_millis(2));
            };
            let text = match fs::read_to_string(&output) {
                Ok(t) => t,
                Err(_) if !status.success() => {
                    return Err(EvalError::ProcessCrash(format!("exited with {status}")))
                }
                Err(_) => return Err(EvalError::ProtocolViolation("no reply file written".into())),
            };
            let line = text.lines().next().unwrap_or("");
            parse_response(line)
        })();
        let _ = fs::remove_dir_all(&dir);
        res
    }
}

struct OneShot {
    child: Child,
    lines: Receiver<io::Result<String>>,
}

impl OneShot {
    fn await_line(&mut self, timeout: Option<Duration>, timeout_s: Option<f64>) -> Result<String, EvalError> {
        let received = match timeout {
            Some(t) => self.lines.recv_timeout(t),
            None => self.lines.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match received {
            Ok(Ok(line)) if line.ends_with('\n') => Ok(line),
            Ok(Ok(_)) => Err(EvalError::ProtocolViolation("truncated reply line".into())),
            Ok(Err(e)) if not_utf8(&e).is_some() => Err(not_utf8(&e).expect("checked")),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait().ok();
                Err(EvalError::ProcessCrash(match status {
                    Some(s) => format!("exited with {s} before replying"),
                    None => "closed its output before replying".into(),
                }))
            }
            Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout(timeout_s.unwrap_or(0.0))),
        }
    }
}

impl Objective for ExternalEvaluator {
    fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        match self.spec.mode {
            ExternalMode::OneShot => self.evaluate_one_shot(x, id),
            ExternalMode::Persistent => self.evaluate_persistent(x, id),
            ExternalMode::File => self.evaluate_file(x, id),
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for p in idle.drain(..) {
                p.kill();
            }
        }
    }
}
