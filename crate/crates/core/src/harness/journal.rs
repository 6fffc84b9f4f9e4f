//! Run journals (one JSON record per line) and best-so-far traces.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gp::KernelParams;
use crate::linesearch::Selection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dispatch,
    Observation,
    Failure,
    Proposal,
    Fit,
}

/// One journal line. Fields that do not apply to an event kind are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run: String,
    pub algo: String,
    pub batch: usize,
    /// Dense per-run record index.
    pub seq: usize,
    pub kind: EventKind,
    /// Dispatch index of the evaluation this record belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acq: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acq_evals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refit: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<KernelParams>,
    pub n_completed: usize,
    pub n_pending: usize,
    pub max_evals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl EvalRecord {
    pub fn new(kind: EventKind) -> Self {
        Self {
            run: String::new(),
            algo: String::new(),
            batch: 0,
            seq: 0,
            kind,
            eval: None,
            point: None,
            value: None,
            sim_time: None,
            wall_time: None,
            worker: None,
            attempt: None,
            dim: None,
            line_beta: None,
            selection: None,
            acq: None,
            exploration: None,
            acq_evals: None,
            n_train: None,
            refit: None,
            params: None,
            n_completed: 0,
            n_pending: 0,
            max_evals: 0,
            error: None,
            warning: None,
        }
    }

    /// Evaluations neither finished nor in flight.
    pub fn remaining(&self) -> usize {
        self.max_evals.saturating_sub(self.n_completed + self.n_pending)
    }
}

/// Identifies the run a journal belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run: String,
    pub algo: String,
    pub batch: usize,
}

/// Append-only record log, optionally streamed to a writer as it grows.
pub struct Journal {
    meta: RunMeta,
    records: Vec<EvalRecord>,
    sink: Option<Box<dyn Write + Send>>,
    sink_error: Option<io::Error>,
    started: Instant,
    record_wall: bool,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("meta", &self.meta)
            .field("records", &self.records.len())
            .finish()
    }
}

impl Journal {
    pub fn new(meta: RunMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
            sink: None,
            sink_error: None,
            started: Instant::now(),
            record_wall: false,
        }
    }

    /// Streams every appended record to `sink` as one JSON line.
    pub fn with_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub(crate) fn set_record_wall(&mut self, on: bool) {
        self.record_wall = on;
        self.started = Instant::now();
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Stamps run identity, sequence number and (if enabled) wall time.
    pub fn append(&mut self, mut rec: EvalRecord) {
        rec.run.clone_from(&self.meta.run);
        rec.algo.clone_from(&self.meta.algo);
        rec.batch = self.meta.batch;
        rec.seq = self.records.len();
        if self.record_wall && rec.wall_time.is_none() {
            rec.wall_time = Some(self.elapsed());
        }
        if let Some(sink) = self.sink.as_mut() {
            if self.sink_error.is_none() {
                let res = serde_json::to_writer(&mut *sink, &rec)
                    .map_err(io::Error::from)
                    .and_then(|_| sink.write_all(b"\n"))
                    .and_then(|_| sink.flush());
                if let Err(e) = res {
                    self.sink_error = Some(e);
                }
            }
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    /// First streaming error, if any write to the sink failed.
    pub fn sink_error(&self) -> Option<&io::Error> {
        self.sink_error.as_ref()
    }

    pub fn into_records(self) -> Vec<EvalRecord> {
        self.records
    }
}

/// Reads a line-delimited journal.
pub fn read_journal<R: BufRead>(reader: R) -> io::Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("journal line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_journal<W: Write>(mut w: W, records: &[EvalRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Best-so-far value after a completed evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Number of completed evaluations (1-based).
    pub eval_index: usize,
    pub sim_time: Option<f64>,
    pub wall_time: Option<f64>,
    pub best: f64,
}

pub const TRACE_HEADER: &str = "eval_index,simulated_time,wall_time,best_value";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TracePoint]) -> io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for t in trace {
        writeln!(
            w,
            "{},{},{},{}",
            t.eval_index,
            opt_cell(t.sim_time),
            opt_cell(t.wall_time),
            t.best
        )?;
    }
    w.flush()
}

/// Rebuilds the best-so-far trace from a journal's observation records.
pub fn trace_from_journal(records: &[EvalRecord]) -> Vec<TracePoint> {
    let mut best = f64::INFINITY;
    records
        .iter()
        .filter(|r| r.kind == EventKind::Observation)
        .filter_map(|r| r.value.map(|v| (r, v)))
        .enumerate()
        .map(|(i, (r, v))| {
            best = best.min(v);
            TracePoint {
                eval_index: i + 1,
                sim_time: r.sim_time,
                wall_time: r.wall_time,
                best,
            }
        })
        .collect()
}
