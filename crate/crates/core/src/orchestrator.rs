//! Optimization loops: sequential and asynchronous-batch line BO, random
//! search, and full-space BO baselines.
//!
//! All loops share one event-driven engine. A single coordinator owns the
//! dataset, the model and the journal; workers only evaluate the objective.
//! Under the simulated clock completions come from a discrete-event queue, so
//! a run is a pure function of its configuration and seed.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcqContext, AcqError, AcqKind, AcqSettings};
use crate::gp::{fit_with_hint, FitConfig, GpError, GpModel, KernelParams};
use crate::harness::derive_seed;
use crate::harness::evaluator::{EvalError, ObjectiveHandle};
use crate::harness::journal::{EvalRecord, EventKind, Journal, RunMeta, TracePoint};
use crate::linesearch::{propose_next, DimSelectPolicy, LineError, LineGridConfig};
use crate::space::{DesignSpace, SpaceError};

/// Largest exhaustive grid the full-space grid optimizer accepts.
pub const MAX_GRID_EVALS: usize = 1 << 22;

/// Distance below which a proposal counts as a duplicate of a pending point.
pub const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("invalid optimizer settings: {0}")]
    InvalidConfig(String),
    #[error("invalid execution settings: {0}")]
    InvalidExec(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum InnerOptimizer {
    /// Shifted Halton candidates, then one coordinate-wise sweep from the
    /// best few, scoring a small grid around each coordinate.
    QuasiRandom {
        candidates: usize,
        refine_starts: usize,
        /// Grid points per coordinate and start.
        refine_evals: usize,
    },
    /// Exhaustive regular grid with `per_dim` points per axis, no refinement.
    Grid { per_dim: usize },
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        InnerOptimizer::QuasiRandom {
            candidates: 1024,
            refine_starts: 5,
            refine_evals: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Strategy {
    Line {
        acq: AcqSettings,
        policy: DimSelectPolicy,
        grid: LineGridConfig,
    },
    FullSpace {
        acq: AcqSettings,
        inner: InnerOptimizer,
    },
    Random,
}

impl Strategy {
    pub fn line(kind: AcqKind) -> Self {
        Strategy::Line {
            acq: AcqSettings::with_kind(kind),
            policy: DimSelectPolicy::default(),
            grid: LineGridConfig::default(),
        }
    }

    pub fn full_space(kind: AcqKind) -> Self {
        Strategy::FullSpace {
            acq: AcqSettings::with_kind(kind),
            inner: InnerOptimizer::default(),
        }
    }

    fn acq(&self) -> Option<&AcqSettings> {
        match self {
            Strategy::Line { acq, .. } | Strategy::FullSpace { acq, .. } => Some(acq),
            Strategy::Random => None,
        }
    }
}

/// When hyperparameters are re-optimized rather than reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefitSchedule {
    /// Refit at every proposal while the training set has at most this many points.
    pub every_until: usize,
    /// Beyond that, refit every `interval`-th model proposal.
    pub interval: usize,
}

impl Default for RefitSchedule {
    fn default() -> Self {
        Self {
            every_until: 100,
            interval: 5,
        }
    }
}

impl RefitSchedule {
    fn due(&self, n_train: usize, bo_iter: usize) -> bool {
        n_train <= self.every_until || self.interval <= 1 || bo_iter % self.interval == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub refit: RefitSchedule,
}

impl OptimizerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            fit: FitConfig::default(),
            refit: RefitSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |e: String| RunError::InvalidConfig(e);
        if let Some(acq) = self.strategy.acq() {
            acq.validate().map_err(|e: AcqError| bad(e.to_string()))?;
        }
        match &self.strategy {
            Strategy::Line { policy, grid, .. } => {
                policy.validate().map_err(|e| bad(e.to_string()))?;
                grid.validate().map_err(|e| bad(e.to_string()))?;
            }
            Strategy::FullSpace { inner, .. } => match *inner {
                InnerOptimizer::QuasiRandom {
                    candidates,
                    refine_starts,
                    ..
                } => {
                    if candidates == 0 {
                        return Err(bad("full-space search needs at least one candidate".into()));
                    }
                    if refine_starts > candidates {
                        return Err(bad(format!(
                            "refine_starts = {refine_starts} exceeds candidates = {candidates}"
                        )));
                    }
                }
                InnerOptimizer::Grid { per_dim } => {
                    if per_dim < 2 {
                        return Err(bad(format!("grid per_dim = {per_dim} must be at least 2")));
                    }
                }
            },
            Strategy::Random => {}
        }
        if self.fit.restarts == 0 {
            return Err(bad("fit restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Successful evaluations per run, initial design included.
    pub max_evals: usize,
    pub n_init: usize,
    pub batch_size: usize,
    pub repeats: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_evals: 350,
            n_init: 20,
            batch_size: 1,
            repeats: 20,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.max_evals == 0 {
            return Err(RunError::InvalidBudget("max_evals must be at least 1".into()));
        }
        if self.n_init > self.max_evals {
            return Err(RunError::InvalidBudget(format!(
                "n_init = {} exceeds max_evals = {}",
                self.n_init, self.max_evals
            )));
        }
        if self.batch_size == 0 {
            return Err(RunError::InvalidBudget("batch_size must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(RunError::InvalidBudget("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluation latency under the simulated clock, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LatencyModel {
    Constant { seconds: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Constant { seconds: 1.0 }
    }
}

impl LatencyModel {
    fn validate(&self) -> Result<(), RunError> {
        let ok = match *self {
            LatencyModel::Constant { seconds } => seconds.is_finite() && seconds >= 0.0,
            LatencyModel::Uniform { low, high } => low.is_finite() && high.is_finite() && 0.0 <= low && low <= high,
            LatencyModel::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(RunError::InvalidExec(format!("invalid latency model {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LatencyModel::Constant { seconds } => seconds,
            LatencyModel::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
            LatencyModel::Exponential { mean } => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ClockMode {
    /// Deterministic discrete-event clock; objectives run inline.
    Simulated { latency: LatencyModel },
    /// Real concurrent evaluation, one thread per in-flight evaluation.
    Wall,
}

impl Default for ClockMode {
    fn default() -> Self {
        ClockMode::Simulated {
            latency: LatencyModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub clock: ClockMode,
    /// Per-evaluation limit in seconds (simulated or wall, matching `clock`).
    pub eval_timeout_s: Option<f64>,
    /// Re-dispatches of a failed point before it is dropped.
    pub max_retries: usize,
    /// Failed dispatches tolerated before the run stops with partial results.
    /// `None` allows as many as `max_evals`.
    pub max_failures: Option<usize>,
    /// Stamp records with elapsed wall time even under the simulated clock.
    pub record_wall_time: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            clock: ClockMode::default(),
            eval_timeout_s: None,
            max_retries: 1,
            max_failures: None,
            record_wall_time: false,
        }
    }
}

impl ExecConfig {
    pub fn simulated(latency: LatencyModel) -> Self {
        Self {
            clock: ClockMode::Simulated { latency },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if let ClockMode::Simulated { latency } = &self.clock {
            latency.validate()?;
        }
        if let Some(t) = self.eval_timeout_s {
            if !(t.is_finite() && t > 0.0) {
                return Err(RunError::InvalidExec(format!("eval_timeout_s = {t} must be positive")));
            }
        }
        Ok(())
    }
}

/// Identity of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLabel {
    pub run_id: String,
    pub algo: String,
    pub seed: u64,
}

impl RunLabel {
    pub fn new(run_id: impl Into<String>, algo: impl Into<String>, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            algo: algo.into(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub algo: String,
    pub batch: usize,
    pub seed: u64,
    /// Best-so-far after each successful evaluation.
    pub trace: Vec<TracePoint>,
    pub best_value: Option<f64>,
    /// Raw-unit location of `best_value`.
    pub best_point: Option<Vec<f64>>,
    /// Clock time at the last completion (simulated or wall seconds).
    pub total_time: f64,
    pub completed: usize,
    pub failures: usize,
    /// Stopped early after too many failures.
    pub aborted: bool,
    pub journal: Vec<EvalRecord>,
}

struct InFlight {
    eval: usize,
    worker: usize,
    unit: Vec<f64>,
    attempt: usize,
}

enum AfterCompletion {
    Retry { worker: usize, unit: Vec<f64>, attempt: usize },
    Freed { worker: usize },
}

struct Engine<'a> {
    space: &'a DesignSpace,
    optimizer: &'a OptimizerConfig,
    budget: BudgetConfig,
    exec: &'a ExecConfig,
    rng: ChaCha8Rng,
    data: crate::gp::Dataset,
    best: Option<(Vec<f64>, f64)>,
    in_flight: Vec<InFlight>,
    params: Option<KernelParams>,
    random_dispatched: usize,
    bo_iter: usize,
    dispatched: usize,
    failures: usize,
    aborted: bool,
    clock: Option<f64>,
    journal: Journal,
    trace: Vec<TracePoint>,
}

impl<'a> Engine<'a> {
    fn record(&self, kind: EventKind) -> EvalRecord {
        let mut r = EvalRecord::new(kind);
        r.n_completed = self.data.len();
        r.n_pending = self.in_flight.len();
        r.max_evals = self.budget.max_evals;
        r.sim_time = self.clock;
        r
    }

    fn can_dispatch(&self) -> bool {
        !self.aborted && self.data.len() + self.in_flight.len() < self.budget.max_evals
    }

    fn random_point(&mut self) -> Vec<f64> {
        (0..self.space.dim()).map(|_| self.rng.random::<f64>()).collect()
    }

    fn raw(&self, unit: &[f64]) -> Vec<f64> {
        self.space.denormalize(unit).expect("unit-cube point")
    }

    /// Chooses the next point in normalized coordinates and journals it.
    fn next_point(&mut self) -> Vec<f64> {
        let use_random = matches!(self.optimizer.strategy, Strategy::Random)
            || self.random_dispatched < self.budget.n_init
            || self.data.len() < 2;
        if use_random {
            self.random_dispatched += 1;
            let unit = self.random_point();
            let mut rec = self.record(EventKind::Proposal);
            rec.point = Some(self.raw(&unit));
            rec.acq = Some("random".into());
            self.journal.append(rec);
            return unit;
        }
        self.bo_iter += 1;
        match self.model_proposal() {
            Ok(unit) => unit,
            Err(msg) => {
                let unit = self.random_point();
                let mut rec = self.record(EventKind::Proposal);
                rec.point = Some(self.raw(&unit));
                rec.acq = Some("random".into());
                rec.warning = Some(format!("model proposal failed, sampled at random: {msg}"));
                self.journal.append(rec);
                unit
            }
        }
    }

    /// Builds the model on real data plus fantasies for in-flight points.
    fn build_model(&mut self) -> Result<GpModel, GpError> {
        let cfg = &self.optimizer.fit;
        let mut train = self.data.clone();
        if !self.in_flight.is_empty() {
            let base = match &self.params {
                Some(p) => GpModel::new(self.data.clone(), p.clone())?,
                None => {
                    let m = fit_with_hint(&self.data, cfg, None, &mut self.rng)?;
                    self.params = Some(m.params().clone());
                    m
                }
            };
            let pending: Vec<&[f64]> = self.in_flight.iter().map(|f| f.unit.as_slice()).collect();
            for (u, p) in pending.iter().zip(base.predict_batch(&pending)?) {
                train.push(u.to_vec(), p.mean)?;
            }
        }
        let refit = self.params.is_none() || self.optimizer.refit.due(train.len(), self.bo_iter);
        let n_train = train.len();
        let model = match (&self.params, refit) {
            (Some(p), false) => GpModel::new(train, p.clone())?,
            _ => fit_with_hint(&train, cfg, self.params.as_ref(), &mut self.rng)?,
        };
        self.params = Some(model.params().clone());
        let mut rec = self.record(EventKind::Fit);
        rec.n_train = Some(n_train);
        rec.refit = Some(refit);
        rec.params = Some(model.params().clone());
        self.journal.append(rec);
        Ok(model)
    }

    fn model_proposal(&mut self) -> Result<Vec<f64>, String> {
        let model = self.build_model().map_err(|e| e.to_string())?;
        let (x_star, y_star) = self.best.clone().expect("at least two observations");
        let mut rec = self.record(EventKind::Proposal);
        rec.n_train = Some(model.len());
        let unit = match &self.optimizer.strategy {
            Strategy::Line { acq, policy, grid } => {
                let p = propose_next(&model, &x_star, y_star, policy, grid, acq, &mut self.rng)
                    .map_err(|e: LineError| e.to_string())?;
                rec.dim = Some(p.dim);
                rec.line_beta = Some(p.beta);
                rec.selection = Some(p.selection);
                rec.acq = Some(acq.kind.name().into());
                rec.exploration = Some(p.exploration);
                rec.acq_evals = Some(p.acq_evals);
                if p.degenerate {
                    rec.warning = Some("zero-width line segment, proposing the incumbent".into());
                }
                p.point
            }
            Strategy::FullSpace { acq, inner } => {
                let ctx = acq
                    .context(model.scaling().apply(y_star), &mut self.rng)
                    .map_err(|e| e.to_string())?;
                let (unit, evals) = maximize_full_space(&model, &ctx, inner, &mut self.rng)?;
                rec.acq = Some(acq.kind.name().into());
                rec.exploration = Some(ctx.beta);
                rec.acq_evals = Some(evals);
                unit
            }
            Strategy::Random => unreachable!("random strategy never builds a model"),
        };
        rec.point = Some(self.raw(&unit));
        if self.in_flight.iter().any(|f| distance(&f.unit, &unit) <= DUPLICATE_TOL) {
            let msg = "proposal duplicates a pending point";
            rec.warning = Some(match rec.warning.take() {
                Some(w) => format!("{w}; {msg}"),
                None => msg.into(),
            });
        }
        self.journal.append(rec);
        Ok(unit)
    }

    fn dispatch(&mut self, worker: usize, unit: Vec<f64>, attempt: usize) -> (usize, Vec<f64>) {
        let eval = self.dispatched;
        self.dispatched += 1;
        let raw = self.raw(&unit);
        self.in_flight.push(InFlight {
            eval,
            worker,
            unit,
            attempt,
        });
        let mut rec = self.record(EventKind::Dispatch);
        rec.eval = Some(eval);
        rec.point = Some(raw.clone());
        rec.worker = Some(worker);
        rec.attempt = Some(attempt);
        self.journal.append(rec);
        (eval, raw)
    }

    fn complete(&mut self, eval: usize, result: Result<f64, EvalError>) -> AfterCompletion {
        let idx = self
            .in_flight
            .iter()
            .position(|f| f.eval == eval)
            .expect("completion for an in-flight evaluation");
        let job = self.in_flight.remove(idx);
        let raw = self.raw(&job.unit);
        let result = result.and_then(|v| if v.is_finite() { Ok(v) } else { Err(EvalError::NonFiniteValue) });
        match result {
            Ok(value) => {
                self.data
                    .push(job.unit.clone(), value)
                    .expect("validated observation");
                if self.best.as_ref().is_none_or(|(_, b)| value < *b) {
                    self.best = Some((job.unit.clone(), value));
                }
                let mut rec = self.record(EventKind::Observation);
                rec.eval = Some(eval);
                rec.point = Some(raw);
                rec.value = Some(value);
                rec.worker = Some(job.worker);
                rec.attempt = Some(job.attempt);
                self.journal.append(rec);
                let wall = self.journal.records().last().and_then(|r| r.wall_time);
                self.trace.push(TracePoint {
                    eval_index: self.data.len(),
                    sim_time: self.clock,
                    wall_time: wall,
                    best: self.best.as_ref().map(|b| b.1).expect("just observed"),
                });
                AfterCompletion::Freed { worker: job.worker }
            }
            Err(err) => {
                self.failures += 1;
                let limit = self.exec.max_failures.unwrap_or(self.budget.max_evals);
                if self.failures > limit {
                    self.aborted = true;
                }
                let mut rec = self.record(EventKind::Failure);
                rec.eval = Some(eval);
                rec.point = Some(raw);
                rec.worker = Some(job.worker);
                rec.attempt = Some(job.attempt);
                rec.error = Some(format!("{}: {err}", err.tag()));
                if self.aborted {
                    rec.warning = Some(format!("failure limit {limit} exceeded, stopping"));
                }
                self.journal.append(rec);
                if !self.aborted && job.attempt <= self.exec.max_retries {
                    AfterCompletion::Retry {
                        worker: job.worker,
                        unit: job.unit,
                        attempt: job.attempt + 1,
                    }
                } else {
                    AfterCompletion::Freed { worker: job.worker }
                }
            }
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Completion source behind the engine.
trait Backend {
    fn launch(&mut self, eval: usize, raw: Vec<f64>);
    /// Next completion and the clock reading at which it happened.
    fn next(&mut self) -> Option<(usize, Result<f64, EvalError>, Option<f64>)>;
}

#[derive(PartialEq)]
struct Event {
    time: f64,
    eval: usize,
    result: Result<f64, EvalError>,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // min-heap on (time, eval)
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.eval.cmp(&self.eval))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

struct SimBackend {
    objective: ObjectiveHandle,
    latency: LatencyModel,
    timeout: Option<f64>,
    latency_seed: u64,
    now: f64,
    queue: BinaryHeap<Event>,
}

impl Backend for SimBackend {
    fn launch(&mut self, eval: usize, raw: Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.latency_seed, eval as u64));
        let latency = self.latency.sample(&mut rng);
        let (time, result) = match self.timeout {
            Some(t) if latency > t => (self.now + t, Err(EvalError::Timeout(t))),
            _ => (self.now + latency, self.objective.evaluate(&raw, eval)),
        };
        self.queue.push(Event { time, eval, result });
    }

    fn next(&mut self) -> Option<(usize, Result<f64, EvalError>, Option<f64>)> {
        let ev = self.queue.pop()?;
        self.now = ev.time;
        Some((ev.eval, ev.result, Some(ev.time)))
    }
}

struct WallBackend {
    objective: ObjectiveHandle,
    timeout: Option<Duration>,
    tx: mpsc::Sender<(usize, Result<f64, EvalError>)>,
    rx: mpsc::Receiver<(usize, Result<f64, EvalError>)>,
    deadlines: Vec<(usize, Option<Instant>)>,
}

impl Backend for WallBackend {
    fn launch(&mut self, eval: usize, raw: Vec<f64>) {
        let tx = self.tx.clone();
        let objective = self.objective.clone();
        self.deadlines.push((eval, self.timeout.map(|t| Instant::now() + t)));
        thread::spawn(move || {
            let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| objective.evaluate(&raw, eval)))
                .unwrap_or_else(|_| Err(EvalError::ProcessCrash("objective panicked".into())));
            let _ = tx.send((eval, res));
        });
    }

    fn next(&mut self) -> Option<(usize, Result<f64, EvalError>, Option<f64>)> {
        loop {
            if self.deadlines.is_empty() {
                return None;
            }
            let earliest = self
                .deadlines
                .iter()
                .filter_map(|(e, d)| d.map(|d| (d, *e)))
                .min();
            let received = match earliest {
                Some((deadline, eval)) => {
                    let wait = deadline.saturating_duration_since(Instant::now());
                    match self.rx.recv_timeout(wait) {
                        Ok(msg) => Some(msg),
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            self.deadlines.retain(|(e, _)| *e != eval);
                            let t = self.timeout.map(|t| t.as_secs_f64()).unwrap_or(0.0);
                            return Some((eval, Err(EvalError::Timeout(t)), None));
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => None,
                    }
                }
                None => self.rx.recv().ok(),
            };
            let (eval, res) = received?;
            // results of timed-out evaluations arrive late and are dropped
            if let Some(pos) = self.deadlines.iter().position(|(e, _)| *e == eval) {
                self.deadlines.remove(pos);
                return Some((eval, res, None));
            }
        }
    }
}

fn execute(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    optimizer: &OptimizerConfig,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
    sink: Option<Box<dyn Write + Send>>,
) -> Result<RunResult, RunError> {
    budget.validate()?;
    optimizer.validate()?;
    exec.validate()?;
    let mut journal = Journal::new(RunMeta {
        run: label.run_id.clone(),
        algo: label.algo.clone(),
        batch: budget.batch_size,
    });
    if let Some(s) = sink {
        journal = journal.with_sink(s);
    }
    let wall_mode = matches!(exec.clock, ClockMode::Wall);
    journal.set_record_wall(exec.record_wall_time || wall_mode);

    let mut engine = Engine {
        space,
        optimizer,
        budget: *budget,
        exec,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(label.seed, 0)),
        data: crate::gp::Dataset::new(space.dim()),
        best: None,
        in_flight: Vec::new(),
        params: None,
        random_dispatched: 0,
        bo_iter: 0,
        dispatched: 0,
        failures: 0,
        aborted: false,
        clock: if wall_mode { None } else { Some(0.0) },
        journal,
        trace: Vec::new(),
    };
    let mut backend: Box<dyn Backend> = match exec.clock {
        ClockMode::Simulated { latency } => Box::new(SimBackend {
            objective: objective.clone(),
            latency,
            timeout: exec.eval_timeout_s,
            latency_seed: derive_seed(label.seed, 1),
            now: 0.0,
            queue: BinaryHeap::new(),
        }),
        ClockMode::Wall => {
            let (tx, rx) = mpsc::channel();
            Box::new(WallBackend {
                objective: objective.clone(),
                timeout: exec.eval_timeout_s.map(Duration::from_secs_f64),
                tx,
                rx,
                deadlines: Vec::new(),
            })
        }
    };

    for worker in 0..budget.batch_size {
        if !engine.can_dispatch() {
            break;
        }
        let unit = engine.next_point();
        let (eval, raw) = engine.dispatch(worker, unit, 1);
        backend.launch(eval, raw);
    }
    while let Some((eval, result, time)) = backend.next() {
        if time.is_some() {
            engine.clock = time;
        }
        match engine.complete(eval, result) {
            AfterCompletion::Retry { worker, unit, attempt } => {
                let (eval, raw) = engine.dispatch(worker, unit, attempt);
                backend.launch(eval, raw);
            }
            AfterCompletion::Freed { worker } => {
                if engine.can_dispatch() {
                    let unit = engine.next_point();
                    let (eval, raw) = engine.dispatch(worker, unit, 1);
                    backend.launch(eval, raw);
                }
            }
        }
    }

    let total_time = match engine.clock {
        Some(t) => t,
        None => engine.journal.elapsed(),
    };
    let best_point = engine.best.as_ref().map(|(u, _)| engine.raw(u));
    Ok(RunResult {
        run_id: label.run_id.clone(),
        algo: label.algo.clone(),
        batch: budget.batch_size,
        seed: label.seed,
        best_value: engine.best.as_ref().map(|b| b.1),
        best_point,
        total_time,
        completed: engine.data.len(),
        failures: engine.failures,
        aborted: engine.aborted,
        trace: engine.trace,
        journal: engine.journal.into_records(),
    })
}

/// Runs any strategy at any batch size. `sink` receives journal lines as
/// they are produced.
pub fn run(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    optimizer: &OptimizerConfig,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
    sink: Option<Box<dyn Write + Send>>,
) -> Result<RunResult, RunError> {
    execute(objective, space, optimizer, budget, exec, label, sink)
}

/// One evaluation at a time: random initial design, then model proposals.
pub fn run_sequential(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    optimizer: &OptimizerConfig,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
) -> Result<RunResult, RunError> {
    if budget.batch_size != 1 {
        return Err(RunError::InvalidBudget(format!(
            "sequential runs need batch_size = 1, got {}",
            budget.batch_size
        )));
    }
    execute(objective, space, optimizer, budget, exec, label, None)
}

/// Keeps `batch_size` evaluations in flight, proposing against a model that
/// treats pending points as observed at their predictive means.
pub fn run_async_batch(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    optimizer: &OptimizerConfig,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
) -> Result<RunResult, RunError> {
    execute(objective, space, optimizer, budget, exec, label, None)
}

/// Uniform sampling of the whole budget.
pub fn run_random_search(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
) -> Result<RunResult, RunError> {
    let optimizer = OptimizerConfig::new(Strategy::Random);
    execute(objective, space, &optimizer, budget, exec, label, None)
}

/// Sequential BO maximizing the acquisition over the whole cube.
pub fn run_fullspace_bo(
    objective: &ObjectiveHandle,
    space: &DesignSpace,
    optimizer: &OptimizerConfig,
    budget: &BudgetConfig,
    exec: &ExecConfig,
    label: &RunLabel,
) -> Result<RunResult, RunError> {
    if !matches!(optimizer.strategy, Strategy::FullSpace { .. }) {
        return Err(RunError::InvalidConfig("full-space BO needs a full-space strategy".into()));
    }
    run_sequential(objective, space, optimizer, budget, exec, label)
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut k = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|p| *p * *p <= k).all(|p| k % p != 0) {
            primes.push(k);
        }
        k += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// `n` Halton points in `[0, 1)^d` with a random toroidal shift.
pub fn shifted_halton<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let primes = first_primes(d);
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    (1..=n as u64)
        .map(|i| {
            primes
                .iter()
                .zip(&shift)
                .map(|(&p, s)| (radical_inverse(i, p) + s).fract())
                .collect()
        })
        .collect()
}

fn score(model: &GpModel, ctx: &AcqContext, pts: &[Vec<f64>]) -> Result<Vec<f64>, String> {
    Ok(model
        .predict_batch_std(pts)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| ctx.utility(p))
        .collect())
}

/// Maximizes the acquisition over the unit cube. Returns the point and the
/// number of acquisition evaluations spent.
pub fn maximize_full_space<R: Rng + ?Sized>(
    model: &GpModel,
    ctx: &AcqContext,
    inner: &InnerOptimizer,
    rng: &mut R,
) -> Result<(Vec<f64>, usize), String> {
    let d = model.dim();
    match *inner {
        InnerOptimizer::Grid { per_dim } => {
            let total = (per_dim as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
            if total > MAX_GRID_EVALS as u128 {
                return Err(format!("grid of {per_dim}^{d} points is too large"));
            }
            let total = total as usize;
            let step = 1.0 / (per_dim - 1) as f64;
            let mut best = (Vec::new(), f64::NEG_INFINITY);
            let chunk = 4096;
            let mut start = 0;
            while start < total {
                let end = (start + chunk).min(total);
                let pts: Vec<Vec<f64>> = (start..end)
                    .map(|mut k| {
                        (0..d)
                            .map(|_| {
                                let c = k % per_dim;
                                k /= per_dim;
                                (c as f64 * step).min(1.0)
                            })
                            .collect()
                    })
                    .collect();
                let vals = score(model, ctx, &pts)?;
                for (p, v) in pts.into_iter().zip(vals) {
                    if v > best.1 {
                        best = (p, v);
                    }
                }
                start = end;
            }
            if best.0.is_empty() {
                best.0 = vec![0.0; d];
            }
            Ok((best.0, total))
        }
        InnerOptimizer::QuasiRandom {
            candidates,
            refine_starts,
            refine_evals,
        } => {
            let cands = shifted_halton(candidates, d, rng);
            let vals = score(model, ctx, &cands)?;
            let mut evals = cands.len();
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
            let mut starts: Vec<(Vec<f64>, f64)> = order
                .iter()
                .take(refine_starts.max(1))
                .map(|&i| (cands[i].clone(), vals[i]))
                .collect();
            let n = model.len().max(1) as f64;
            let half = n.powf(-1.0 / d as f64).clamp(1e-3, 0.25);
            if refine_starts > 0 && refine_evals >= 2 {
                let last = (refine_evals - 1) as f64;
                for j in 0..d {
                    let mut pts = Vec::with_capacity(starts.len() * refine_evals);
                    for (x, _) in &starts {
                        let lo = (x[j] - half).max(0.0);
                        let hi = (x[j] + half).min(1.0);
                        for t in 0..refine_evals {
                            let mut q = x.clone();
                            q[j] = lo + (hi - lo) * t as f64 / last;
                            pts.push(q);
                        }
                    }
                    let vals = score(model, ctx, &pts)?;
                    evals += vals.len();
                    for (k, (x, fx)) in starts.iter_mut().enumerate() {
                        for t in 0..refine_evals {
                            let v = vals[k * refine_evals + t];
                            if v > *fx {
                                *fx = v;
                                x[j] = pts[k * refine_evals + t][j];
                            }
                        }
                    }
                }
            }
            let best = starts
                .into_iter()
                .fold(None::<(Vec<f64>, f64)>, |acc, s| match acc {
                    Some(a) if a.1 >= s.1 => Some(a),
                    _ => Some(s),
                })
                .expect("at least one start");
            Ok((best.0, evals))
        }
    }
}
