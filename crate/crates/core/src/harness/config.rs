//! Run configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! algorithm = "lineasybo"
//! output_dir = "out"
//!
//! [space]
//! bounds = [[-10.0, 10.0], [-10.0, 10.0]]
//!
//! [objective.builtin]
//! name = "levy"
//! dim = 2
//!
//! [budget]
//! max_evals = 60
//! n_init = 10
//! batch_size = 1
//! repeats = 3
//! ```
//!
//! Every other section (`acquisition`, `policy`, `grid`, `gp`, `fullspace`,
//! `clock`) is optional and falls back to the defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::benchmarks::{BenchmarkFn, BenchmarkSpec};
use super::evaluator::{ExternalEvaluator, ExternalSpec, Negated, ObjectiveHandle};
use crate::acquisition::{AcqKind, AcqSettings};
use crate::gp::FitConfig;
use crate::linesearch::{DimSelectPolicy, LineGridConfig};
use crate::orchestrator::{
    BudgetConfig, ClockMode, ExecConfig, InnerOptimizer, LatencyModel, OptimizerConfig, RefitSchedule, Strategy,
};
use crate::space::DesignSpace;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_SEED: &str = "LINEBO_SEED";
pub const ENV_OUT: &str = "LINEBO_OUT";

/// A configuration problem, with the 1-based line it refers to when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    LinEasyBo,
    LineEi,
    LineLcb,
    FullSpaceEi,
    FullSpaceLcb,
    FullSpaceEasyBo,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::LinEasyBo,
        Algorithm::LineEi,
        Algorithm::LineLcb,
        Algorithm::FullSpaceEi,
        Algorithm::FullSpaceLcb,
        Algorithm::FullSpaceEasyBo,
        Algorithm::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::LinEasyBo => "lineasybo",
            Algorithm::LineEi => "line-ei",
            Algorithm::LineLcb => "line-lcb",
            Algorithm::FullSpaceEi => "fullspace-ei",
            Algorithm::FullSpaceLcb => "fullspace-lcb",
            Algorithm::FullSpaceEasyBo => "fullspace-easybo",
            Algorithm::Random => "random",
        }
    }

    pub fn acq_kind(self) -> Option<AcqKind> {
        match self {
            Algorithm::LinEasyBo | Algorithm::FullSpaceEasyBo => Some(AcqKind::RandLcb),
            Algorithm::LineEi | Algorithm::FullSpaceEi => Some(AcqKind::Ei),
            Algorithm::LineLcb | Algorithm::FullSpaceLcb => Some(AcqKind::Lcb),
            Algorithm::Random => None,
        }
    }

    pub fn is_line(self) -> bool {
        matches!(self, Algorithm::LinEasyBo | Algorithm::LineEi | Algorithm::LineLcb)
    }

    pub fn is_full_space(self) -> bool {
        matches!(
            self,
            Algorithm::FullSpaceEi | Algorithm::FullSpaceLcb | Algorithm::FullSpaceEasyBo
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    /// `ei`, `lcb` and `easybo` are accepted as the full-space variants.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "lineasybo" => Algorithm::LinEasyBo,
            "line-ei" => Algorithm::LineEi,
            "line-lcb" => Algorithm::LineLcb,
            "ei" | "fullspace-ei" => Algorithm::FullSpaceEi,
            "lcb" | "fullspace-lcb" => Algorithm::FullSpaceLcb,
            "easybo" | "fullspace-easybo" => Algorithm::FullSpaceEasyBo,
            "random" => Algorithm::Random,
            other => {
                return Err(format!(
                    "unknown algorithm `{other}` (expected lineasybo, line-ei, line-lcb, ei, lcb, easybo, random, fullspace-ei, fullspace-lcb, fullspace-easybo)"
                ))
            }
        })
    }
}

impl Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    /// `[lower, upper]` per dimension, raw units.
    pub bounds: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BenchmarkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalSpec>,
    /// Negate values so a quantity to be maximized can be minimized.
    #[serde(default)]
    pub maximize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    pub lcb_beta: f64,
    pub beta_range: [f64; 2],
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        let d = AcqSettings::default();
        Self {
            lcb_beta: d.lcb_beta,
            beta_range: [d.beta_range.0, d.beta_range.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub restarts: usize,
    pub max_iters: usize,
    pub isotropic: bool,
    pub warm_start: bool,
    pub refit_every_until: usize,
    pub refit_interval: usize,
}

impl Default for GpSection {
    fn default() -> Self {
        let f = FitConfig::default();
        let r = RefitSchedule::default();
        Self {
            restarts: f.restarts,
            max_iters: f.max_iters,
            isotropic: f.isotropic,
            warm_start: f.warm_start,
            refit_every_until: r.every_until,
            refit_interval: r.interval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullSpaceSection {
    /// `quasi-random` or `grid`.
    pub method: FullSpaceMethod,
    pub candidates: usize,
    pub refine_starts: usize,
    pub refine_evals: usize,
    pub per_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FullSpaceMethod {
    QuasiRandom,
    Grid,
}

impl Default for FullSpaceSection {
    fn default() -> Self {
        let InnerOptimizer::QuasiRandom {
            candidates,
            refine_starts,
            refine_evals,
        } = InnerOptimizer::default()
        else {
            unreachable!()
        };
        Self {
            method: FullSpaceMethod::QuasiRandom,
            candidates,
            refine_starts,
            refine_evals,
            per_dim: 8,
        }
    }
}

impl FullSpaceSection {
    fn inner(&self) -> InnerOptimizer {
        match self.method {
            FullSpaceMethod::QuasiRandom => InnerOptimizer::QuasiRandom {
                candidates: self.candidates,
                refine_starts: self.refine_starts,
                refine_evals: self.refine_evals,
            },
            FullSpaceMethod::Grid => InnerOptimizer::Grid { per_dim: self.per_dim },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockKind {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSection {
    pub mode: ClockKind,
    pub latency: LatencyModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_timeout_s: Option<f64>,
    pub max_retries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_failures: Option<usize>,
    pub record_wall_time: bool,
}

impl Default for ClockSection {
    fn default() -> Self {
        let e = ExecConfig::default();
        Self {
            mode: ClockKind::Simulated,
            latency: LatencyModel::default(),
            eval_timeout_s: e.eval_timeout_s,
            max_retries: e.max_retries,
            max_failures: e.max_failures,
            record_wall_time: e.record_wall_time,
        }
    }
}

/// The on-disk configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub space: SpaceSection,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub acquisition: AcquisitionSection,
    #[serde(default)]
    pub policy: DimSelectPolicy,
    #[serde(default)]
    pub grid: LineGridConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub gp: GpSection,
    #[serde(default)]
    pub fullspace: FullSpaceSection,
    #[serde(default)]
    pub clock: ClockSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("linebo-out")
}

/// 1-based line of `key` inside `[section]` (or at top level when `section`
/// is empty). Best effort: used only to point error messages somewhere useful.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.trim_start_matches('[').split(']').next().unwrap_or("").trim();
            current = name.to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || (!section.is_empty() && current.starts_with(&format!("{section}.")));
        if in_section {
            let k = line.split('=').next().unwrap_or("").trim();
            if !key.is_empty() && k == key {
                return Some(i + 1);
            }
        }
    }
    section_line
}

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ConfigError::new(line, e.message().trim().to_string())
        })?;
        cfg.validate_with(Some(text))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(None, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    /// Applies `LINEBO_SEED` and `LINEBO_OUT` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| ConfigError::new(None, format!("{ENV_SEED} = `{s}` is not an unsigned integer")))?;
        }
        if let Ok(o) = std::env::var(ENV_OUT) {
            if !o.is_empty() {
                self.output_dir = PathBuf::from(o);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let at = |section: &str, key: &str| text.and_then(|t| locate(t, section, key));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                at("", "schema_version"),
                format!(
                    "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        let space = self
            .design_space()
            .map_err(|e| ConfigError::new(at("space", "bounds"), format!("space.bounds: {e}")))?;
        match (&self.objective.builtin, &self.objective.external) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::new(
                    at("objective", ""),
                    "objective: give exactly one of `builtin` or `external`",
                ))
            }
            (None, None) => {
                return Err(ConfigError::new(
                    at("objective", ""),
                    "objective: missing field `builtin` or `external`",
                ))
            }
            (Some(spec), None) => {
                let f = BenchmarkFn::from_spec(spec)
                    .map_err(|e| ConfigError::new(at("objective.builtin", "name"), format!("objective.builtin: {e}")))?;
                if f.dim() != space.dim() {
                    return Err(ConfigError::new(
                        at("space", "bounds"),
                        format!(
                            "space.bounds has {} dimensions but objective.builtin.dim = {}",
                            space.dim(),
                            f.dim()
                        ),
                    ));
                }
                for (i, ((lo, hi), (flo, fhi))) in space.bounds().zip(f.space().bounds()).enumerate() {
                    if lo < flo || hi > fhi {
                        return Err(ConfigError::new(
                            at("space", "bounds"),
                            format!("space.bounds[{i}] = [{lo}, {hi}] leaves the {} domain [{flo}, {fhi}]", f.name()),
                        ));
                    }
                }
            }
            (None, Some(ext)) => {
                if ext.command.is_empty() || ext.command[0].trim().is_empty() {
                    return Err(ConfigError::new(
                        at("objective.external", "command"),
                        "objective.external.command must not be empty",
                    ));
                }
                if let Some(t) = ext.timeout_s {
                    if !(t.is_finite() && t > 0.0) {
                        return Err(ConfigError::new(
                            at("objective.external", "timeout_s"),
                            format!("objective.external.timeout_s = {t} must be positive"),
                        ));
                    }
                }
            }
        }
        self.budget
            .validate()
            .map_err(|e| {
                let msg = e.to_string();
                let key = ["max_evals", "n_init", "batch_size", "repeats"]
                    .into_iter()
                    .filter_map(|k| msg.find(k).map(|i| (i, k)))
                    .min()
                    .map_or("", |(_, k)| k);
                ConfigError::new(at("budget", key), format!("budget: {msg}"))
            })?;
        self.optimizer()
            .validate()
            .map_err(|e| ConfigError::new(None, e.to_string()))?;
        self.exec()
            .validate()
            .map_err(|e| ConfigError::new(at("clock", ""), format!("clock: {e}")))?;
        if self.gp.refit_interval == 0 {
            return Err(ConfigError::new(at("gp", "refit_interval"), "gp.refit_interval must be at least 1"));
        }
        Ok(())
    }

    pub fn design_space(&self) -> Result<DesignSpace, crate::space::SpaceError> {
        let pairs: Vec<(f64, f64)> = self.space.bounds.iter().map(|b| (b[0], b[1])).collect();
        DesignSpace::from_bounds(&pairs)
    }

    pub fn acq_settings(&self, kind: AcqKind) -> AcqSettings {
        AcqSettings {
            kind,
            lcb_beta: self.acquisition.lcb_beta,
            beta_range: (self.acquisition.beta_range[0], self.acquisition.beta_range[1]),
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let strategy = match self.algorithm {
            a if a.is_line() => Strategy::Line {
                acq: self.acq_settings(a.acq_kind().expect("line algorithms have an acquisition")),
                policy: self.policy,
                grid: self.grid,
            },
            a if a.is_full_space() => Strategy::FullSpace {
                acq: self.acq_settings(a.acq_kind().expect("full-space algorithms have an acquisition")),
                inner: self.fullspace.inner(),
            },
            _ => Strategy::Random,
        };
        OptimizerConfig {
            strategy,
            fit: FitConfig {
                restarts: self.gp.restarts,
                max_iters: self.gp.max_iters,
                isotropic: self.gp.isotropic,
                warm_start: self.gp.warm_start,
            },
            refit: RefitSchedule {
                every_until: self.gp.refit_every_until,
                interval: self.gp.refit_interval,
            },
        }
    }

    pub fn exec(&self) -> ExecConfig {
        ExecConfig {
            clock: match self.clock.mode {
                ClockKind::Simulated => ClockMode::Simulated {
                    latency: self.clock.latency,
                },
                ClockKind::Wall => ClockMode::Wall,
            },
            eval_timeout_s: self.clock.eval_timeout_s,
            max_retries: self.clock.max_retries,
            max_failures: self.clock.max_failures,
            record_wall_time: self.clock.record_wall_time,
        }
    }

    /// Builds the objective, negated when `maximize` is set.
    pub fn objective(&self) -> Result<ObjectiveHandle, ConfigError> {
        let base: ObjectiveHandle = match (&self.objective.builtin, &self.objective.external) {
            (Some(spec), None) => Arc::new(BenchmarkFn::from_spec(spec).map_err(|e| ConfigError::new(None, e.to_string()))?),
            (None, Some(ext)) => {
                Arc::new(ExternalEvaluator::new(ext.clone()).map_err(|e| ConfigError::new(None, e.to_string()))?)
            }
            _ => return Err(ConfigError::new(None, "objective: give exactly one of `builtin` or `external`")),
        };
        Ok(if self.objective.maximize {
            Arc::new(Negated(base))
        } else {
            base
        })
    }

    /// Configuration for a built-in benchmark over its whole domain.
    pub fn for_benchmark(spec: BenchmarkSpec, algorithm: Algorithm) -> Result<Self, ConfigError> {
        let f = BenchmarkFn::from_spec(&spec).map_err(|e| ConfigError::new(None, e.to_string()))?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            algorithm,
            output_dir: default_output_dir(),
            space: SpaceSection {
                bounds: f.space().bounds().map(|(l, u)| [l, u]).collect(),
            },
            objective: ObjectiveSection {
                builtin: Some(spec),
                external: None,
                maximize: false,
            },
            acquisition: AcquisitionSection::default(),
            policy: DimSelectPolicy::default(),
            grid: LineGridConfig::default(),
            budget: BudgetConfig::default(),
            gp: GpSection::default(),
            fullspace: FullSpaceSection::default(),
            clock: ClockSection::default(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
