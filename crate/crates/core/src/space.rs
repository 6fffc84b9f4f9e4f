//! Box-constrained design spaces and line geometry in the unit cube.
//!
//! Everything inside the optimizer works on normalized coordinates in
//! `[0, 1]^d`. Raw units only show up at the evaluator boundary, through
//! [`DesignSpace::normalize`] and [`DesignSpace::denormalize`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinates this close to a face of the box (in normalized units) are
/// clamped onto it instead of being rejected.
pub const CLAMP_TOL: f64 = 1e-9;

/// Direction components at or below this magnitude do not constrain a line.
pub const DIRECTION_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coordinate {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("dimension {index} has empty or inverted bounds [{lower}, {upper}]")]
    DegenerateBounds { index: usize, lower: f64, upper: f64 },
    #[error("design space must have at least one dimension")]
    Empty,
    #[error("direction vector has (near) zero norm")]
    ZeroDirection,
}

/// An axis-aligned box `[lower_i, upper_i]` in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DesignSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SpaceError> {
        if lower.len() != upper.len() {
            return Err(SpaceError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(SpaceError::Empty);
        }
        for (index, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SpaceError::DegenerateBounds {
                    index,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self, SpaceError> {
        let (lower, upper) = bounds.iter().copied().unzip();
        Self::new(lower, upper)
    }

    /// The unit cube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Result<Self, SpaceError> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn bounds(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.lower.iter().copied().zip(self.upper.iter().copied())
    }

    /// Maps a raw point into the unit cube.
    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>, SpaceError> {
        self.check_dim(raw.len())?;
        raw.iter()
            .zip(self.bounds())
            .enumerate()
            .map(|(index, (&value, (lo, hi)))| {
                clamp_unit((value - lo) / (hi - lo)).ok_or(SpaceError::OutOfBounds {
                    index,
                    value,
                    lower: lo,
                    upper: hi,
                })
            })
            .collect()
    }

    /// Maps a unit-cube point back to raw units.
    pub fn denormalize(&self, unit: &[f64]) -> Result<Vec<f64>, SpaceError> {
        self.check_dim(unit.len())?;
        unit.iter()
            .zip(self.bounds())
            .enumerate()
            .map(|(index, (&value, (lo, hi)))| {
                let u = clamp_unit(value).ok_or(SpaceError::OutOfBounds {
                    index,
                    value,
                    lower: 0.0,
                    upper: 1.0,
                })?;
                // Pin the corners exactly so (0, 1) map to (lo, hi) without rounding.
                Ok(if u == 0.0 {
                    lo
                } else if u == 1.0 {
                    hi
                } else {
                    lo + u * (hi - lo)
                })
            })
            .collect()
    }

    pub fn contains_raw(&self, raw: &[f64]) -> bool {
        raw.len() == self.dim()
            && raw
                .iter()
                .zip(self.bounds())
                .all(|(&v, (lo, hi))| v >= lo && v <= hi)
    }

    fn check_dim(&self, got: usize) -> Result<(), SpaceError> {
        if got != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

fn clamp_unit(u: f64) -> Option<f64> {
    if !u.is_finite() || u < -CLAMP_TOL || u > 1.0 + CLAMP_TOL {
        None
    } else {
        Some(u.clamp(0.0, 1.0))
    }
}

/// True when every coordinate lies in `[-tol, 1 + tol]`.
pub fn in_unit_cube(point: &[f64], tol: f64) -> bool {
    point.iter().all(|&v| v >= -tol && v <= 1.0 + tol)
}

/// Validates a normalized point, clamping drift within [`CLAMP_TOL`].
pub fn clamp_to_cube(point: &[f64]) -> Result<Vec<f64>, SpaceError> {
    point
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            clamp_unit(value).ok_or(SpaceError::OutOfBounds {
                index,
                value,
                lower: 0.0,
                upper: 1.0,
            })
        })
        .collect()
}

/// The feasible part of the line `anchor + beta * direction` inside the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    anchor: Vec<f64>,
    direction: Vec<f64>,
    beta_lo: f64,
    beta_hi: f64,
}

impl LineSegment {
    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn beta_lo(&self) -> f64 {
        self.beta_lo
    }

    pub fn beta_hi(&self) -> f64 {
        self.beta_hi
    }

    pub fn width(&self) -> f64 {
        self.beta_hi - self.beta_lo
    }

    /// The point at parameter `beta`, clamped into the cube.
    ///
    /// `beta` itself is clamped into `[beta_lo, beta_hi]` first.
    pub fn point_at(&self, beta: f64) -> Vec<f64> {
        let beta = beta.clamp(self.beta_lo, self.beta_hi);
        self.anchor
            .iter()
            .zip(&self.direction)
            .map(|(&a, &d)| (a + beta * d).clamp(0.0, 1.0))
            .collect()
    }

    /// Index of the axis this segment runs along, if it is axis-aligned.
    pub fn axis(&self) -> Option<usize> {
        let mut axis = None;
        for (j, &d) in self.direction.iter().enumerate() {
            if d.abs() > DIRECTION_EPS {
                if axis.is_some() || (d.abs() - 1.0).abs() > 1e-12 {
                    return None;
                }
                axis = Some(j);
            }
        }
        axis
    }
}

/// Intersects the line through `anchor` along `direction` with the unit cube.
///
/// The direction is normalized to unit length. Components with magnitude at
/// most [`DIRECTION_EPS`] impose no constraint.
pub fn clip_line(anchor: &[f64], direction: &[f64]) -> Result<LineSegment, SpaceError> {
    if anchor.len() != direction.len() {
        return Err(SpaceError::DimensionMismatch {
            expected: anchor.len(),
            got: direction.len(),
        });
    }
    let anchor = clamp_to_cube(anchor)?;
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm >= DIRECTION_EPS) {
        return Err(SpaceError::ZeroDirection);
    }
    let direction: Vec<f64> = direction.iter().map(|d| d / norm).collect();

    let mut beta_lo = f64::NEG_INFINITY;
    let mut beta_hi = f64::INFINITY;
    for (&a, &d) in anchor.iter().zip(&direction) {
        if d.abs() <= DIRECTION_EPS {
            continue;
        }
        let (t0, t1) = ((0.0 - a) / d, (1.0 - a) / d);
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        beta_lo = beta_lo.max(lo);
        beta_hi = beta_hi.min(hi);
    }
    Ok(LineSegment {
        anchor,
        direction,
        beta_lo: beta_lo.min(0.0),
        beta_hi: beta_hi.max(0.0),
    })
}

/// Unit vector along axis `axis` in `dim` dimensions.
pub fn axis_direction(dim: usize, axis: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[axis] = 1.0;
    e
}
