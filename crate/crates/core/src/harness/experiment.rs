//! Repeated runs, output files, and summary tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::benchmarks::BenchmarkSpec;
use super::config::{Algorithm, ConfigError, GpSection, RunConfig};
use super::journal::{read_journal, trace_from_journal, write_trace_csv, EvalRecord, EventKind};
use crate::orchestrator::{self, LatencyModel, RunError, RunLabel, RunResult};

pub const SUMMARY_HEADER: &str = "algo,batch,best,worst,mean,std,time_s";
pub const PLOT_HEADER: &str = "algo,batch,run,eval_index,simulated_time,wall_time,best_value";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

/// One line of a summary table: statistics of the final best values over
/// repeated runs, and the mean run time.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algo: String,
    pub batch: usize,
    pub best: f64,
    pub worst: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub time_s: f64,
    pub runs: usize,
}

impl SummaryRow {
    /// Aggregates `(final best, run time)` pairs. `None` when empty.
    pub fn from_finals(algo: &str, batch: usize, finals: &[(f64, f64)]) -> Option<Self> {
        if finals.is_empty() {
            return None;
        }
        let n = finals.len() as f64;
        let values: Vec<f64> = finals.iter().map(|f| f.0).collect();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            algo: algo.to_string(),
            batch,
            best: values.iter().copied().fold(f64::INFINITY, f64::min),
            worst: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
            time_s: finals.iter().map(|f| f.1).sum::<f64>() / n,
            runs: finals.len(),
        })
    }
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.algo, r.batch, r.best, r.worst, r.mean, r.std, r.time_s
        )?;
    }
    w.flush()
}

fn write_summary_file(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let f = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    write_summary_csv(BufWriter::new(f), rows).map_err(io_err(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub final_best: Option<f64>,
    pub total_time: f64,
    pub completed: usize,
    pub failures: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub summary: Option<SummaryRow>,
}

pub fn run_id(algo: &str, batch: usize, repeat: usize) -> String {
    format!("{algo}-b{batch}-r{repeat:02}")
}

/// Runs `budget.repeats` seeded runs of `cfg`, writing for each run
/// `journal-<run>.ndjson` (streamed as the run progresses) and
/// `trace-<run>.csv`, and rewriting `summary.csv` after every run so an
/// interrupted experiment keeps its completed results.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport, ExperimentError> {
    run_experiment_with(cfg, |_| {})
}

/// As [`run_experiment`], calling `on_run` after each finished run.
pub fn run_experiment_with<F>(cfg: &RunConfig, mut on_run: F) -> Result<ExperimentReport, ExperimentError>
where
    F: FnMut(&RunResult),
{
    cfg.validate()?;
    let space = cfg.design_space().map_err(|e| ConfigError {
        line: None,
        message: e.to_string(),
    })?;
    let objective = cfg.objective()?;
    let optimizer = cfg.optimizer();
    let exec = cfg.exec();
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(format!("creating {}", out.display())))?;

    let algo = cfg.algorithm.name();
    let batch = cfg.budget.batch_size;
    let mut runs = Vec::new();
    let mut finals = Vec::new();
    for r in 0..cfg.budget.repeats {
        let id = run_id(algo, batch, r);
        let seed = cfg.seed.wrapping_add(r as u64);
        let journal_path = out.join(format!("journal-{id}.ndjson"));
        let sink = File::create(&journal_path).map_err(io_err(format!("creating {}", journal_path.display())))?;
        let label = RunLabel::new(id.clone(), algo, seed);
        let result = orchestrator::run(
            &objective,
            &space,
            &optimizer,
            &cfg.budget,
            &exec,
            &label,
            Some(Box::new(BufWriter::new(sink))),
        )?;
        let trace_path = out.join(format!("trace-{id}.csv"));
        let tf = File::create(&trace_path).map_err(io_err(format!("creating {}", trace_path.display())))?;
        write_trace_csv(BufWriter::new(tf), &result.trace).map_err(io_err(format!("writing {}", trace_path.display())))?;

        if let Some(b) = result.best_value {
            finals.push((b, result.total_time));
        }
        runs.push(RunOutcome {
            run_id: id,
            seed,
            final_best: result.best_value,
            total_time: result.total_time,
            completed: result.completed,
            failures: result.failures,
            aborted: result.aborted,
        });
        let rows: Vec<SummaryRow> = SummaryRow::from_finals(algo, batch, &finals).into_iter().collect();
        write_summary_file(&out.join("summary.csv"), &rows)?;
        on_run(&result);
    }
    Ok(ExperimentReport {
        output_dir: out,
        runs,
        summary: SummaryRow::from_finals(algo, batch, &finals),
    })
}

/// Journal files given directly or found (`journal-*.ndjson`) in directories.
pub fn collect_journals(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(io_err(format!("listing {}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("journal-") && n.ends_with(".ndjson"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Records of every run found in `paths`, keyed by run id, in file order.
fn load_runs(paths: &[PathBuf]) -> Result<Vec<(String, Vec<EvalRecord>)>, ExperimentError> {
    let mut runs: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    for p in paths {
        let f = File::open(p).map_err(io_err(format!("opening {}", p.display())))?;
        let records = read_journal(BufReader::new(f)).map_err(io_err(format!("reading {}", p.display())))?;
        for rec in records {
            match runs.iter_mut().find(|(id, _)| *id == rec.run) {
                Some((_, v)) => v.push(rec),
                None => runs.push((rec.run.clone(), vec![rec])),
            }
        }
    }
    Ok(runs)
}

fn run_time(records: &[EvalRecord]) -> f64 {
    let sim = records.iter().filter_map(|r| r.sim_time).fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.max(t))));
    sim.or_else(|| records.iter().filter_map(|r| r.wall_time).reduce(f64::max))
        .unwrap_or(0.0)
}

/// One summary row per `(algo, batch)` found in the journals, in order of
/// first appearance.
pub fn summarize_journals(paths: &[PathBuf]) -> Result<Vec<SummaryRow>, ExperimentError> {
    let runs = load_runs(paths)?;
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (_, recs) in &runs {
        let Some(first) = recs.first() else { continue };
        let key = (first.algo.clone(), first.batch);
        let best = recs
            .iter()
            .filter(|r| r.kind == EventKind::Observation)
            .filter_map(|r| r.value)
            .reduce(f64::min);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = groups.entry(key).or_default();
        if let Some(b) = best {
            entry.push((b, run_time(recs)));
        }
    }
    Ok(order
        .into_iter()
        .filter_map(|k| SummaryRow::from_finals(&k.0, k.1, &groups[&k]))
        .collect())
}

/// Best-so-far against evaluation index and time for every run, one CSV.
pub fn write_plot_data<W: Write>(mut w: W, paths: &[PathBuf]) -> Result<(), ExperimentError> {
    let runs = load_runs(paths)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut body = || -> io::Result<()> {
        writeln!(w, "{PLOT_HEADER}")?;
        for (id, recs) in &runs {
            let Some(first) = recs.first() else { continue };
            for t in trace_from_journal(recs) {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    first.algo,
                    first.batch,
                    id,
                    t.eval_index,
                    cell(t.sim_time),
                    cell(t.wall_time),
                    t.best
                )?;
            }
        }
        w.flush()
    };
    body().map_err(io_err("writing plot data"))
}

/// The benchmark grid run by `linebo bench`.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// `(name, dim)` pairs.
    pub benchmarks: Vec<(String, usize)>,
    pub algos: Vec<Algorithm>,
    /// Batch sizes for the line algorithms; the others run sequentially.
    pub batches: Vec<usize>,
    pub max_evals: usize,
    pub n_init: usize,
    pub repeats: usize,
    pub seed: u64,
    pub latency_s: f64,
    pub gp: GpSection,
    pub output_dir: PathBuf,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            benchmarks: vec![("levy".into(), 12), ("rotated-quadratic".into(), 36)],
            algos: Algorithm::ALL.to_vec(),
            batches: vec![1, 5, 10, 15],
            max_evals: 350,
            n_init: 20,
            repeats: 20,
            seed: 0,
            latency_s: 10.0,
            gp: GpSection::default(),
            output_dir: PathBuf::from("linebo-bench"),
        }
    }
}

/// Parses `name:dim`.
pub fn parse_benchmark(s: &str) -> Result<(String, usize), String> {
    let (name, dim) = s
        .split_once(':')
        .ok_or_else(|| format!("benchmark `{s}` must look like name:dim"))?;
    let dim: usize = dim
        .trim()
        .parse()
        .map_err(|_| format!("benchmark `{s}`: `{dim}` is not a dimension"))?;
    Ok((name.trim().to_string(), dim))
}

/// Runs every `(benchmark, algorithm, batch)` cell; each benchmark directory
/// gets a `summary.csv` with one row per cell.
pub fn run_bench<F>(opts: &BenchOptions, mut progress: F) -> Result<Vec<(String, Vec<SummaryRow>)>, ExperimentError>
where
    F: FnMut(&str, &RunResult),
{
    let mut all = Vec::new();
    for (name, dim) in &opts.benchmarks {
        let label = format!("{name}-{dim}");
        let bench_dir = opts.output_dir.join(&label);
        let mut rows = Vec::new();
        for &algo in &opts.algos {
            let batches: Vec<usize> = if algo.is_line() { opts.batches.clone() } else { vec![1] };
            for b in batches {
                let mut cfg = RunConfig::for_benchmark(BenchmarkSpec::new(name, *dim), algo)?;
                cfg.seed = opts.seed;
                cfg.budget.max_evals = opts.max_evals;
                cfg.budget.n_init = opts.n_init;
                cfg.budget.repeats = opts.repeats;
                cfg.budget.batch_size = b;
                cfg.clock.latency = LatencyModel::Constant {
                    seconds: opts.latency_s,
                };
                cfg.gp = opts.gp;
                cfg.output_dir = bench_dir.join(format!("{}-b{b}", algo.name()));
                let report = run_experiment_with(&cfg, |r| progress(&label, r))?;
                rows.extend(report.summary);
                fs::create_dir_all(&bench_dir).map_err(io_err(format!("creating {}", bench_dir.display())))?;
                write_summary_file(&bench_dir.join("summary.csv"), &rows)?;
            }
        }
        all.push((label, rows));
    }
    Ok(all)
}
