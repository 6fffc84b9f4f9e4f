//! Built-in synthetic test functions, all minimized.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::derive_seed;
use super::evaluator::{EvalError, Objective};
use crate::space::{DesignSpace, CLAMP_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error("unknown benchmark `{0}` (expected one of sphere, rosenbrock, ackley, levy, rotated-quadratic)")]
    Unknown(String),
    #[error("benchmark dimension must be at least {min}, got {got}")]
    BadDimension { min: usize, got: usize },
    #[error("effective dimension {effective} must lie in 1..={dim}")]
    BadEffectiveDim { effective: usize, dim: usize },
    #[error("condition number must be finite and >= 1, got {0}")]
    BadCondition(f64),
    #[error("noise level must be finite and non-negative, got {0}")]
    BadNoise(f64),
}

/// Configuration of a built-in objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    pub dim: usize,
    /// Rotated quadratic only: number of directions with non-zero curvature.
    #[serde(default)]
    pub effective_dim: Option<usize>,
    /// Rotated quadratic only: ratio of largest to smallest curvature.
    #[serde(default = "default_condition")]
    pub condition: f64,
    /// Seeds the rotation and shift of the rotated quadratic.
    #[serde(default)]
    pub instance_seed: u64,
    /// Standard deviation of additive Gaussian noise.
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

fn default_condition() -> f64 {
    100.0
}

impl BenchmarkSpec {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            effective_dim: None,
            condition: default_condition(),
            instance_seed: 0,
            noise_sd: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Sphere,
    Rosenbrock,
    Ackley,
    Levy,
    RotatedQuadratic {
        rotation: DMatrix<f64>,
        curvature: Vec<f64>,
        shift: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkFn {
    name: String,
    kind: Kind,
    space: DesignSpace,
    optimum_value: f64,
    optimum_point: Vec<f64>,
    noise_sd: f64,
    noise_seed: u64,
}

pub const BENCHMARK_NAMES: [&str; 5] = ["sphere", "rosenbrock", "ackley", "levy", "rotated-quadratic"];

fn cube(dim: usize, lo: f64, hi: f64) -> DesignSpace {
    DesignSpace::new(vec![lo; dim], vec![hi; dim]).expect("valid benchmark bounds")
}

fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-fix so the draw is Haar distributed
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl BenchmarkFn {
    pub fn from_spec(spec: &BenchmarkSpec) -> Result<Self, BenchmarkError> {
        let d = spec.dim;
        let min_dim = if spec.name == "rosenbrock" { 2 } else { 1 };
        if d < min_dim {
            return Err(BenchmarkError::BadDimension { min: min_dim, got: d });
        }
        if !(spec.noise_sd.is_finite() && spec.noise_sd >= 0.0) {
            return Err(BenchmarkError::BadNoise(spec.noise_sd));
        }
        let (kind, space, opt) = match spec.name.as_str() {
            "sphere" => (Kind::Sphere, cube(d, -5.12, 5.12), vec![0.0; d]),
            "rosenbrock" => (Kind::Rosenbrock, cube(d, -5.0, 10.0), vec![1.0; d]),
            "ackley" => (Kind::Ackley, cube(d, -32.768, 32.768), vec![0.0; d]),
            "levy" => (Kind::Levy, cube(d, -10.0, 10.0), vec![1.0; d]),
            "rotated-quadratic" => {
                let k = spec.effective_dim.unwrap_or(d);
                if k == 0 || k > d {
                    return Err(BenchmarkError::BadEffectiveDim { effective: k, dim: d });
                }
                if !(spec.condition.is_finite() && spec.condition >= 1.0) {
                    return Err(BenchmarkError::BadCondition(spec.condition));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.instance_seed, 0x0051_a7ed));
                let rotation = random_rotation(d, &mut rng);
                let u = Uniform::new(-2.5, 2.5).expect("valid range");
                let shift: Vec<f64> = (0..d).map(|_| u.sample(&mut rng)).collect();
                let curvature: Vec<f64> = (0..d)
                    .map(|i| {
                        if i >= k {
                            0.0
                        } else if k == 1 {
                            1.0
                        } else {
                            spec.condition.powf(-(i as f64) / (k - 1) as f64)
                        }
                    })
                    .collect();
                (
                    Kind::RotatedQuadratic {
                        rotation,
                        curvature,
                        shift: shift.clone(),
                    },
                    cube(d, -5.0, 5.0),
                    shift,
                )
            }
            other => return Err(BenchmarkError::Unknown(other.to_string())),
        };
        Ok(Self {
            name: spec.name.clone(),
            kind,
            space,
            optimum_value: 0.0,
            optimum_point: opt,
            noise_sd: spec.noise_sd,
            noise_seed: spec.noise_seed,
        })
    }

    /// Noise-free instance with default parameters.
    pub fn standard(name: &str, dim: usize) -> Result<Self, BenchmarkError> {
        Self::from_spec(&BenchmarkSpec::new(name, dim))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn optimum_value(&self) -> f64 {
        self.optimum_value
    }

    pub fn optimum_point(&self) -> &[f64] {
        &self.optimum_point
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// Noise-free value at a raw point.
    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        if x.len() != self.dim() {
            return Err(EvalError::OutOfBounds(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        for (i, ((&xi, lo), hi)) in x.iter().zip(self.space.lower()).zip(self.space.upper()).enumerate() {
            let slack = CLAMP_TOL * (hi - lo);
            if !(xi.is_finite() && xi >= lo - slack && xi <= hi + slack) {
                return Err(EvalError::OutOfBounds(format!("coordinate {i} = {xi} outside [{lo}, {hi}]")));
            }
        }
        Ok(match &self.kind {
            Kind::Sphere => x.iter().map(|v| v * v).sum(),
            Kind::Rosenbrock => x
                .windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum(),
            Kind::Ackley => {
                let n = x.len() as f64;
                let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
                let cs = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
                -20.0 * (-0.2 * sq.sqrt()).exp() - cs.exp() + 20.0 + E
            }
            Kind::Levy => {
                let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
                let last = w[w.len() - 1];
                let head = (PI * w[0]).sin().powi(2);
                let mid: f64 = w[..w.len() - 1]
                    .iter()
                    .map(|wi| (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2)))
                    .sum();
                let tail = (last - 1.0).powi(2) * (1.0 + (2.0 * PI * last).sin().powi(2));
                head + mid + tail
            }
            Kind::RotatedQuadratic {
                rotation,
                curvature,
                shift,
            } => {
                let d = x.len();
                let mut total = 0.0;
                for (i, &lam) in curvature.iter().enumerate() {
                    if lam == 0.0 {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..d {
                        z += rotation[(j, i)] * (x[j] - shift[j]);
                    }
                    total += lam * z * z;
                }
                total
            }
        })
    }

    /// Value plus the seeded noise draw for evaluation `id`.
    pub fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        let v = self.value(x)?;
        if self.noise_sd == 0.0 {
            return Ok(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.noise_seed, id as u64));
        let z: f64 = StandardNormal.sample(&mut rng);
        Ok(v + self.noise_sd * z)
    }
}

impl Objective for BenchmarkFn {
    fn evaluate(&self, x: &[f64], id: usize) -> Result<f64, EvalError> {
        BenchmarkFn::evaluate(self, x, id)
    }
}
