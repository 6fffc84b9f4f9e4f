//! The `linebo` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{Algorithm, GpSection, RunConfig};
use super::experiment::{
    collect_journals, parse_benchmark, run_bench, run_experiment_with, summarize_journals, write_plot_data,
    write_summary_csv, BenchOptions,
};

#[derive(Debug, Parser)]
#[command(name = "linebo", version, about = "Line-search Bayesian optimization with asynchronous batches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a configuration file.
    Run(RunArgs),
    /// Run the benchmark grid over all algorithms.
    Bench(BenchArgs),
    /// Check a configuration file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate journals into a summary table.
    Summarize {
        /// Journal files or directories holding `journal-*.ndjson`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit best-so-far against evaluation index and time for plotting.
    PlotData {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Print nothing but errors.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 350)]
    pub budget: usize,
    #[arg(long, default_value_t = 20)]
    pub init: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Comma-separated `name:dim` list.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["levy:12".to_string(), "rotated-quadratic:36".to_string()])]
    pub benchmarks: Vec<String>,
    /// Comma-separated algorithm names (default: all).
    #[arg(long, value_delimiter = ',')]
    pub algos: Vec<String>,
    /// Batch sizes used for the line algorithms.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10, 15])]
    pub batches: Vec<usize>,
    /// Simulated evaluation latency in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub latency: f64,
    /// Base seed (default 0, or LINEBO_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `linebo-bench`, or LINEBO_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hyperparameter restarts per fit.
    #[arg(long)]
    pub gp_restarts: Option<usize>,
    /// Optimizer iterations per restart.
    #[arg(long)]
    pub gp_iters: Option<usize>,
    /// Refit hyperparameters every iteration up to this many training points.
    #[arg(long)]
    pub refit_until: Option<usize>,
    /// Beyond that, refit every this many iterations.
    #[arg(long)]
    pub refit_interval: Option<usize>,
    #[arg(long, short)]
    pub quiet: bool,
}

/// Usage or configuration problem (exit code 2) versus a failed run (1).
enum Failure {
    Usage(String),
    Runtime(String),
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code. Errors go to standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("creating {}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.apply_env().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(a) = &args.algo {
        cfg.algorithm = a.parse().map_err(Failure::Usage)?;
    }
    if let Some(b) = args.batch {
        cfg.budget.batch_size = b;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Validate { config } => {
            let mut cfg = RunConfig::load(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            cfg.apply_env().map_err(|e| Failure::Usage(e.to_string()))?;
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let quiet = args.quiet;
            let report = run_experiment_with(&cfg, |r| {
                if !quiet {
                    eprintln!(
                        "{}: best {} after {} evaluations ({} failed){}",
                        r.run_id,
                        r.best_value.map_or("none".to_string(), |v| v.to_string()),
                        r.completed,
                        r.failures,
                        if r.aborted { ", aborted" } else { "" }
                    );
                }
            })
            .map_err(|e| Failure::Runtime(e.to_string()))?;
            if !quiet {
                eprintln!("results in {}", report.output_dir.display());
            }
            if report.runs.iter().any(|r| r.aborted) {
                return Err(Failure::Runtime("at least one run stopped after too many failed evaluations".into()));
            }
            Ok(())
        }
        Command::Bench(args) => {
            let env_seed = match std::env::var(super::config::ENV_SEED) {
                Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| Failure::Usage(format!("LINEBO_SEED = `{s}` is not an unsigned integer")))?),
                Err(_) => None,
            };
            let env_out = std::env::var(super::config::ENV_OUT).ok().filter(|s| !s.is_empty());
            let benchmarks = args
                .benchmarks
                .iter()
                .map(|b| parse_benchmark(b))
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::Usage)?;
            let algos = if args.algos.is_empty() {
                Algorithm::ALL.to_vec()
            } else {
                args.algos
                    .iter()
                    .map(|a| a.parse())
                    .collect::<Result<Vec<Algorithm>, _>>()
                    .map_err(Failure::Usage)?
            };
            let mut gp = GpSection::default();
            if let Some(r) = args.gp_restarts {
                gp.restarts = r;
            }
            if let Some(i) = args.gp_iters {
                gp.max_iters = i;
            }
            if let Some(u) = args.refit_until {
                gp.refit_every_until = u;
            }
            if let Some(i) = args.refit_interval {
                gp.refit_interval = i;
            }
            let opts = BenchOptions {
                benchmarks,
                algos,
                batches: args.batches,
                max_evals: args.budget,
                n_init: args.init,
                repeats: args.repeats,
                seed: args.seed.or(env_seed).unwrap_or(0),
                latency_s: args.latency,
                gp,
                output_dir: args
                    .out
                    .or(env_out.map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("linebo-bench")),
            };
            let quiet = args.quiet;
            let results = run_bench(&opts, |bench, r| {
                if !quiet {
                    eprintln!(
                        "{bench} {}: best {}",
                        r.run_id,
                        r.best_value.map_or("none".to_string(), |v| v.to_string())
                    );
                }
            })
            .map_err(|e| match e {
                super::experiment::ExperimentError::Config(c) => Failure::Usage(c.to_string()),
                other => Failure::Runtime(other.to_string()),
            })?;
            if !quiet {
                for (bench, rows) in &results {
                    let mut out = io::stderr().lock();
                    let _ = writeln!(out, "{bench}");
                    let _ = write_summary_csv(&mut out, rows);
                }
            }
            Ok(())
        }
        Command::Summarize { inputs, out } => {
            let paths = collect_journals(&inputs).map_err(|e| Failure::Runtime(e.to_string()))?;
            if paths.is_empty() {
                return Err(Failure::Usage("no journals found".into()));
            }
            let rows = summarize_journals(&paths).map_err(|e| Failure::Runtime(e.to_string()))?;
            let w = output(&out)?;
            write_summary_csv(w, &rows).map_err(|e| Failure::Runtime(e.to_string()))
        }
        Command::PlotData { inputs, out } => {
            let paths = collect_journals(&inputs).map_err(|e| Failure::Runtime(e.to_string()))?;
            if paths.is_empty() {
                return Err(Failure::Usage("no journals found".into()));
            }
            let w = output(&out)?;
            write_plot_data(w, &paths).map_err(|e| Failure::Runtime(e.to_string()))
        }
    }
}
