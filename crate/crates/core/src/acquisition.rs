//! Acquisition functions for minimization: expected improvement, lower
//! confidence bound, and LCB with a randomly drawn exploration weight.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::gp::Posterior;

const SIGMA_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcqError {
    #[error("exploration range [{lo}, {hi}] must satisfy 0 <= lo < hi")]
    BadRange { lo: f64, hi: f64 },
    #[error("exploration weight {0} must be finite and non-negative")]
    BadBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcqKind {
    Ei,
    Lcb,
    RandLcb,
}

impl AcqKind {
    pub fn name(self) -> &'static str {
        match self {
            AcqKind::Ei => "ei",
            AcqKind::Lcb => "lcb",
            AcqKind::RandLcb => "rand-lcb",
        }
    }
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `y_best`.
pub fn ei(post: Posterior, y_best: f64) -> f64 {
    let sigma = post.std_dev();
    let gap = y_best - post.mean;
    if sigma < SIGMA_EPS {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    (gap * norm_cdf(z) + sigma * norm_pdf(z)).max(0.0)
}

/// `μ − β·σ`; lower is better.
pub fn lcb(post: Posterior, beta: f64) -> f64 {
    post.mean - beta * post.std_dev()
}

/// Uniform draw of the exploration weight from `[lo, hi]`.
pub fn draw_exploration_beta<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64, AcqError> {
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
        return Err(AcqError::BadRange { lo, hi });
    }
    Ok(rng.random_range(lo..=hi))
}

/// Everything needed to score candidates during one maximization episode.
///
/// `beta` is fixed for the whole episode, so every candidate in one line or
/// full-space search sees the same exploration weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqContext {
    pub kind: AcqKind,
    /// Incumbent value on the model's standardized scale.
    pub y_best: f64,
    pub beta: f64,
}

impl AcqContext {
    pub fn new(kind: AcqKind, y_best: f64, beta: f64) -> Result<Self, AcqError> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(AcqError::BadBeta(beta));
        }
        Ok(Self { kind, y_best, beta })
    }

    /// Higher-is-better score: EI itself, or the negated LCB.
    pub fn utility(&self, post: Posterior) -> f64 {
        match self.kind {
            AcqKind::Ei => ei(post, self.y_best),
            AcqKind::Lcb | AcqKind::RandLcb => -lcb(post, self.beta),
        }
    }
}

/// How the exploration weight is chosen for LCB-family acquisitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqSettings {
    pub kind: AcqKind,
    /// Weight used by plain LCB.
    pub lcb_beta: f64,
    /// Range for the per-episode draw of randomized LCB.
    pub beta_range: (f64, f64),
}

impl Default for AcqSettings {
    fn default() -> Self {
        Self {
            kind: AcqKind::RandLcb,
            lcb_beta: 2.0,
            beta_range: (0.0, 3.0),
        }
    }
}

impl AcqSettings {
    pub fn with_kind(kind: AcqKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AcqError> {
        if !(self.lcb_beta.is_finite() && self.lcb_beta >= 0.0) {
            return Err(AcqError::BadBeta(self.lcb_beta));
        }
        let (lo, hi) = self.beta_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
            return Err(AcqError::BadRange { lo, hi });
        }
        Ok(())
    }

    /// Builds the context for one episode, drawing β when randomized.
    pub fn context<R: Rng + ?Sized>(&self, y_best: f64, rng: &mut R) -> Result<AcqContext, AcqError> {
        let beta = match self.kind {
            AcqKind::Ei => 0.0,
            AcqKind::Lcb => self.lcb_beta,
            AcqKind::RandLcb => draw_exploration_beta(rng, self.beta_range.0, self.beta_range.1)?,
        };
        AcqContext::new(self.kind, y_best, beta)
    }
}
