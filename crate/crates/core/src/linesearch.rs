//! Acquisition maximization restricted to a line through the incumbent.
//!
//! Each iteration picks one coordinate axis, either uniformly at random or
//! by the steepest finite-difference slope of a Thompson sample around the
//! incumbent, and then grid-searches the acquisition along the feasible
//! segment of that axis. The number of acquisition evaluations per iteration
//! is `grid_points` plus at most [`MAX_REFINE_EVALS`], independent of the
//! dimension.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcqContext, AcqError, AcqSettings};
use crate::gp::{GpError, GpModel};
use crate::space::{axis_direction, clip_line, LineSegment, SpaceError};

/// Cap on golden-section evaluations after the grid pass.
pub const MAX_REFINE_EVALS: usize = 60;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Acq(#[from] AcqError),
    #[error("invalid dimension-selection policy: {0}")]
    InvalidPolicy(String),
    #[error("line grid needs at least 2 points, got {0}")]
    InvalidGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimSelectPolicy {
    /// Probability of picking the axis uniformly at random.
    pub p_random: f64,
    /// Finite-difference step of the Thompson slope estimate, normalized units.
    pub delta: f64,
}

impl Default for DimSelectPolicy {
    fn default() -> Self {
        Self {
            p_random: 0.8,
            delta: 0.01,
        }
    }
}

impl DimSelectPolicy {
    pub fn validate(&self) -> Result<(), LineError> {
        if !(0.0..=1.0).contains(&self.p_random) {
            return Err(LineError::InvalidPolicy(format!(
                "p_random = {} not in [0, 1]",
                self.p_random
            )));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(LineError::InvalidPolicy(format!(
                "delta = {} not in (0, 0.5)",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineGridConfig {
    pub grid_points: usize,
    pub refine: bool,
    /// Golden-section stopping width, in β units.
    pub refine_tol: f64,
}

impl Default for LineGridConfig {
    fn default() -> Self {
        Self {
            grid_points: 1001,
            refine: true,
            refine_tol: 1e-6,
        }
    }
}

impl LineGridConfig {
    pub fn validate(&self) -> Result<(), LineError> {
        if self.grid_points < 2 {
            return Err(LineError::InvalidGrid(self.grid_points));
        }
        Ok(())
    }
}

/// How the axis of an iteration was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    Thompson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimChoice {
    pub index: usize,
    pub via: Selection,
}

/// Picks the axis for the next line search.
///
/// With probability `p_random` the axis is uniform; otherwise it is the axis
/// with the largest absolute Thompson-sample slope at `x_star`, smallest
/// index on ties.
pub fn select_dimension<R: Rng + ?Sized>(
    model: &GpModel,
    x_star: &[f64],
    policy: &DimSelectPolicy,
    rng: &mut R,
) -> Result<DimChoice, LineError> {
    policy.validate()?;
    let d = model.dim();
    if x_star.len() != d {
        return Err(SpaceError::DimensionMismatch {
            expected: d,
            got: x_star.len(),
        }
        .into());
    }
    let u: f64 = rng.random();
    if u < policy.p_random {
        return Ok(DimChoice {
            index: rng.random_range(0..d),
            via: Selection::Random,
        });
    }
    let slopes = thompson_slopes(model, x_star, policy.delta, rng)?;
    let mut index = 0;
    for (j, s) in slopes.iter().enumerate() {
        if s.abs() > slopes[index].abs() {
            index = j;
        }
    }
    Ok(DimChoice {
        index,
        via: Selection::Thompson,
    })
}

/// Per-axis forward differences of one joint posterior draw around `x_star`.
///
/// The step is `+delta`, flipped to `-delta` on axes where `x_star + delta`
/// would leave the cube.
pub fn thompson_slopes<R: Rng + ?Sized>(
    model: &GpModel,
    x_star: &[f64],
    delta: f64,
    rng: &mut R,
) -> Result<Vec<f64>, LineError> {
    let d = x_star.len();
    let steps: Vec<f64> = x_star
        .iter()
        .map(|&x| if x + delta > 1.0 { -delta } else { delta })
        .collect();
    let mut queries = Vec::with_capacity(d + 1);
    queries.push(x_star.to_vec());
    for (j, &h) in steps.iter().enumerate() {
        let mut q = x_star.to_vec();
        q[j] += h;
        queries.push(q);
    }
    let f = model.sample_joint(&queries, rng)?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(j, &h)| (f[j + 1] - f[0]) / h)
        .collect())
}

/// Result of maximizing a scalar function over an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalOptimum {
    pub beta: f64,
    pub value: f64,
    pub evals: usize,
}

/// Grid search over `[lo, hi]` (endpoints included) followed by optional
/// golden-section refinement inside the bracket around the best grid point.
///
/// `eval` scores a batch of β values, higher is better. Ties go to the
/// smallest β. The returned value is never below the best grid value.
pub fn maximize_on_interval<F>(lo: f64, hi: f64, cfg: &LineGridConfig, mut eval: F) -> Result<IntervalOptimum, LineError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    let m = cfg.grid_points;
    let step = (hi - lo) / (m - 1) as f64;
    let betas: Vec<f64> = (0..m)
        .map(|k| if k == m - 1 { hi } else { lo + k as f64 * step })
        .collect();
    let values = eval(&betas);
    let mut k_best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[k_best] {
            k_best = k;
        }
    }
    let mut best = IntervalOptimum {
        beta: betas[k_best],
        value: values[k_best],
        evals: m,
    };
    if cfg.refine && m > 2 {
        let a = betas[k_best.saturating_sub(1)];
        let b = betas[(k_best + 1).min(m - 1)];
        let (beta, value, evals) = golden_max(a, b, cfg.refine_tol, MAX_REFINE_EVALS, |x| eval(&[x])[0]);
        best.evals += evals;
        if value > best.value {
            best.beta = beta;
            best.value = value;
        }
    }
    Ok(best)
}

/// Golden-section search for a maximum on `[a, b]`, at most `cap` evaluations.
/// Returns the best point seen, its value, and the evaluation count.
pub(crate) fn golden_max<F>(mut a: f64, mut b: f64, tol: f64, cap: usize, mut f: F) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    if cap < 2 || b - a <= 0.0 {
        return (a, f64::NEG_INFINITY, 0);
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    let mut best = if fd > fc { (d, fd) } else { (c, fc) };
    while b - a > tol && evals < cap {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc > best.1 || (fc == best.1 && c < best.0) {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd > best.1 {
                best = (d, fd);
            }
        }
        evals += 1;
    }
    (best.0, best.1, evals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineOptimum {
    pub beta: f64,
    pub point: Vec<f64>,
    pub utility: f64,
    pub evals: usize,
    /// The segment had (numerically) zero width; `point` is the anchor.
    pub degenerate: bool,
}

/// Maximizes the acquisition utility along `segment`.
pub fn optimize_on_line(
    model: &GpModel,
    segment: &LineSegment,
    acq: &AcqContext,
    cfg: &LineGridConfig,
) -> Result<LineOptimum, LineError> {
    cfg.validate()?;
    let mut failure = None;
    let mut score = |betas: &[f64]| -> Vec<f64> {
        let pts: Vec<Vec<f64>> = betas.iter().map(|&b| segment.point_at(b)).collect();
        match model.predict_batch_std(&pts) {
            Ok(posts) => posts.into_iter().map(|p| acq.utility(p)).collect(),
            Err(e) => {
                failure = Some(e);
                vec![f64::NEG_INFINITY; betas.len()]
            }
        }
    };
    if segment.width() < 1e-12 {
        let utility = score(&[0.0])[0];
        if let Some(e) = failure {
            return Err(e.into());
        }
        return Ok(LineOptimum {
            beta: 0.0,
            point: segment.anchor().to_vec(),
            utility,
            evals: 1,
            degenerate: true,
        });
    }
    let opt = maximize_on_interval(segment.beta_lo(), segment.beta_hi(), cfg, &mut score)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(LineOptimum {
        beta: opt.beta,
        point: segment.point_at(opt.beta),
        utility: opt.value,
        evals: opt.evals,
        degenerate: false,
    })
}

/// A line-search proposal plus the bookkeeping the journal records.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: Vec<f64>,
    pub dim: usize,
    pub selection: Selection,
    pub beta: f64,
    pub utility: f64,
    pub acq_evals: usize,
    pub exploration: f64,
    pub degenerate: bool,
}

/// Chooses an axis through `x_star` and returns the best point on it.
///
/// `y_star` is the incumbent value on the raw target scale.
pub fn propose_next<R: Rng + ?Sized>(
    model: &GpModel,
    x_star: &[f64],
    y_star: f64,
    policy: &DimSelectPolicy,
    grid: &LineGridConfig,
    acq: &AcqSettings,
    rng: &mut R,
) -> Result<Proposal, LineError> {
    let choice = select_dimension(model, x_star, policy, rng)?;
    let segment = clip_line(x_star, &axis_direction(model.dim(), choice.index))?;
    let ctx = acq.context(model.scaling().apply(y_star), rng)?;
    let opt = optimize_on_line(model, &segment, &ctx, grid)?;
    Ok(Proposal {
        point: opt.point,
        dim: choice.index,
        selection: choice.via,
        beta: opt.beta,
        utility: opt.utility,
        acq_evals: opt.evals,
        exploration: ctx.beta,
        degenerate: opt.degenerate,
    })
}
