//! Zero-mean Gaussian process regression with a squared-exponential ARD kernel.
//!
//! Targets are standardized to zero mean and unit variance before fitting, so
//! the zero prior mean is centred on the data. [`GpModel::predict`] and
//! friends report on the raw target scale; the `*_std` variants stay on the
//! standardized scale used by the acquisition functions.
//!
//! Hyperparameters are fitted by maximizing the log marginal likelihood over
//! log-parameters with analytic gradients and a few restarts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{minimize_bounded, LbfgsSettings};
use crate::space::in_unit_cube;

/// Largest query set accepted by joint prediction and sampling.
pub const MAX_JOINT_QUERIES: usize = 512;

pub const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 2.302_585_092_994_046);
pub const LOG_SIGNAL_VAR_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137);
pub const LOG_NOISE_VAR_BOUNDS: (f64, f64) = (-18.420_680_743_952_367, 0.0);

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
/// Posterior variances below this fraction of the signal variance are treated
/// as exactly zero when sampling.
const SAMPLE_VAR_FLOOR: f64 = 1e-9;
/// Query batches up to this width skip the general matrix product.
const NARROW_COLS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training point lies outside the unit cube")]
    PointOutOfCube,
    #[error("non-finite target value {0}")]
    NonFiniteTarget(f64),
    #[error("need at least {needed} observations to fit, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    SingularKernel { jitter: f64 },
    #[error("at most {max} joint queries are supported, got {got}")]
    TooManyQueries { max: usize, got: usize },
    #[error("query set is empty")]
    NoQueries,
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
}

/// Observed (point, target) pairs; points are in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    points: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            points: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn from_pairs(
        dim: usize,
        pairs: impl IntoIterator<Item = (Vec<f64>, f64)>,
    ) -> Result<Self, GpError> {
        let mut data = Self::new(dim);
        for (x, y) in pairs {
            data.push(x, y)?;
        }
        Ok(data)
    }

    pub fn push(&mut self, point: Vec<f64>, target: f64) -> Result<(), GpError> {
        if point.len() != self.dim {
            return Err(GpError::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        if !in_unit_cube(&point, 1e-12) {
            return Err(GpError::PointOutOfCube);
        }
        if !target.is_finite() {
            return Err(GpError::NonFiniteTarget(target));
        }
        self.points.push(point);
        self.targets.push(target);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Index and value of the smallest target.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.targets
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc, (i, y)| match acc {
                Some((_, b)) if b <= y => acc,
                _ => Some((i, y)),
            })
    }
}

/// Hyperparameters of the SE kernel plus Gaussian observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn new(signal_var: f64, lengthscales: Vec<f64>, noise_var: f64) -> Result<Self, GpError> {
        let p = Self {
            signal_var,
            lengthscales,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters used when the targets carry no information (all equal).
    pub fn fallback(dim: usize) -> Self {
        Self {
            signal_var: 1.0,
            lengthscales: vec![0.5; dim],
            noise_var: 1e-6,
        }
    }

    /// First start of every hyperparameter fit.
    pub fn default_start(dim: usize) -> Self {
        Self {
            signal_var: 1.0,
            lengthscales: vec![0.5; dim],
            noise_var: 1e-4,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self) -> Result<(), GpError> {
        let ok = self.signal_var.is_finite()
            && self.signal_var > 0.0
            && self.noise_var.is_finite()
            && self.noise_var >= 0.0
            && !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GpError::InvalidParams(format!("{self:?}")))
        }
    }

    /// `[log σ_f², log ℓ_1.., log σ_n²]`; a single lengthscale entry when isotropic.
    pub fn to_log(&self, isotropic: bool) -> Vec<f64> {
        let mut v = vec![self.signal_var.ln()];
        if isotropic {
            let mean_log =
                self.lengthscales.iter().map(|l| l.ln()).sum::<f64>() / self.dim() as f64;
            v.push(mean_log);
        } else {
            v.extend(self.lengthscales.iter().map(|l| l.ln()));
        }
        v.push(self.noise_var.max(1e-300).ln());
        v
    }

    pub fn from_log(theta: &[f64], dim: usize, isotropic: bool) -> Self {
        let lengthscales = if isotropic {
            vec![theta[1].exp(); dim]
        } else {
            theta[1..=dim].iter().map(|t| t.exp()).collect()
        };
        Self {
            signal_var: theta[0].exp(),
            lengthscales,
            noise_var: theta[theta.len() - 1].exp(),
        }
    }

    /// Box bounds on the log-parameter vector.
    pub fn log_bounds(dim: usize, isotropic: bool) -> (Vec<f64>, Vec<f64>) {
        let n_ls = if isotropic { 1 } else { dim };
        let mut lo = vec![LOG_SIGNAL_VAR_BOUNDS.0];
        let mut hi = vec![LOG_SIGNAL_VAR_BOUNDS.1];
        lo.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS.0, n_ls));
        hi.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS.1, n_ls));
        lo.push(LOG_NOISE_VAR_BOUNDS.0);
        hi.push(LOG_NOISE_VAR_BOUNDS.1);
        (lo, hi)
    }
}

/// `σ_f² · exp(−½ Σ_j (a_j − b_j)² / ℓ_j²)`.
pub fn kernel_eval(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<f64, GpError> {
    for len in [a.len(), b.len()] {
        if len != params.dim() {
            return Err(GpError::DimensionMismatch {
                expected: params.dim(),
                got: len,
            });
        }
    }
    Ok(se(params, a, b))
}

#[inline]
fn se(params: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(&params.lengthscales)
        .map(|((x, y), l)| {
            let r = (x - y) / l;
            r * r
        })
        .sum();
    params.signal_var * (-0.5 * s).exp()
}

/// Mean and variance of a univariate Gaussian posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub var: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of optimizer starts, including the fixed default start.
    pub restarts: usize,
    /// Iteration cap for each start.
    pub max_iters: usize,
    /// Share one lengthscale across all dimensions.
    pub isotropic: bool,
    /// Start from a previous fit's parameters when available. The hint then
    /// takes the first of the `restarts` slots, ahead of the default start.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 100,
            isotropic: false,
            warm_start: false,
        }
    }
}

/// Standardization applied to the targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub scale: f64,
}

impl TargetScaling {
    /// Population mean/std of the targets; `None` when they are all equal.
    pub fn from_targets(targets: &[f64]) -> (Self, bool) {
        if targets.is_empty() {
            return (Self { mean: 0.0, scale: 1.0 }, true);
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt();
        if !(scale > 1e-12 * mean.abs().max(1.0)) {
            (Self { mean, scale: 1.0 }, true)
        } else {
            (Self { mean, scale }, false)
        }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        self.mean + self.scale * z
    }
}

/// A GP conditioned on a dataset with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    data: Dataset,
    params: KernelParams,
    scaling: TargetScaling,
    /// Row-major `n × d` training inputs divided by the lengthscales.
    z: Vec<f64>,
    chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    degenerate: bool,
}

impl GpModel {
    /// Conditions on `data` with the given hyperparameters (no fitting).
    pub fn new(data: Dataset, params: KernelParams) -> Result<Self, GpError> {
        params.validate()?;
        if params.dim() != data.dim() {
            return Err(GpError::DimensionMismatch {
                expected: data.dim(),
                got: params.dim(),
            });
        }
        let (scaling, degenerate) = TargetScaling::from_targets(data.targets());
        let n = data.len();
        let d = data.dim();
        let x: Vec<f64> = data.points().iter().flatten().copied().collect();
        let y = DVector::from_iterator(n, data.targets().iter().map(|&t| scaling.apply(t)));

        let z = scale_rows(&x, d, &params.lengthscales);
        let k = kernel_matrix(&z, n, d, params.signal_var);
        let (chol, jitter) = factorize(&k, params.noise_var, params.signal_var)?;
        let alpha = chol.solve(&y);
        let l = chol.unpack();
        let chol_inv = lower_tri_inverse(&l);
        Ok(Self {
            data,
            params,
            scaling,
            z,
            chol: l,
            chol_inv,
            alpha,
            jitter,
            degenerate,
        })
    }

    /// The prior: no data, zero mean, variance `σ_f²`.
    pub fn prior(params: KernelParams) -> Result<Self, GpError> {
        let dim = params.dim();
        Self::new(Dataset::new(dim), params)
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn scaling(&self) -> TargetScaling {
        self.scaling
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// True when all targets were equal and fallback parameters apply.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn check_query(&self, q: &[f64]) -> Result<(), GpError> {
        if q.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Cross-covariance `k(X, q)` for each query, as an `n × m` matrix.
    fn cross_cov(&self, queries: &[&[f64]]) -> DMatrix<f64> {
        let n = self.len();
        let d = self.dim();
        let sv = self.params.signal_var;
        let mut kx = DMatrix::zeros(n, queries.len());
        let mut qs = vec![0.0; d];
        for (q, col) in queries.iter().zip(kx.as_mut_slice().chunks_exact_mut(n.max(1))) {
            for ((o, v), l) in qs.iter_mut().zip(q.iter()).zip(&self.params.lengthscales) {
                *o = v / l;
            }
            for (out, row) in col.iter_mut().zip(self.z.chunks_exact(d.max(1))) {
                *out = sv * (-0.5 * sq_dist(row, &qs)).exp();
            }
        }
        kx
    }

    /// `L⁻¹ kx`, exploiting the triangle for narrow `kx`.
    fn whiten(&self, kx: &DMatrix<f64>) -> DMatrix<f64> {
        if kx.ncols() > NARROW_COLS {
            return &self.chol_inv * kx;
        }
        let n = kx.nrows();
        let m = kx.ncols();
        let mut v = DMatrix::zeros(n, m);
        let li = self.chol_inv.as_slice();
        let ks = kx.as_slice();
        let vs = v.as_mut_slice();
        for k in 0..n {
            let lcol = &li[k * n + k..(k + 1) * n];
            for c in 0..m {
                let s = ks[c * n + k];
                for (o, a) in vs[c * n + k..(c + 1) * n].iter_mut().zip(lcol) {
                    *o += a * s;
                }
            }
        }
        v
    }

    /// Posterior at `query` on the standardized target scale.
    pub fn predict_std(&self, query: &[f64]) -> Result<Posterior, GpError> {
        self.check_query(query)?;
        Ok(self.predict_batch_std(&[query])?[0])
    }

    /// Posteriors for many queries at once, standardized scale.
    pub fn predict_batch_std<Q: AsRef<[f64]>>(&self, queries: &[Q]) -> Result<Vec<Posterior>, GpError> {
        let refs: Vec<&[f64]> = queries.iter().map(|q| q.as_ref()).collect();
        for q in &refs {
            self.check_query(q)?;
        }
        if self.is_empty() {
            return Ok(vec![
                Posterior {
                    mean: 0.0,
                    var: self.params.signal_var,
                };
                refs.len()
            ]);
        }
        let kx = self.cross_cov(&refs);
        let means = kx.tr_mul(&self.alpha);
        let v = self.whiten(&kx);
        Ok((0..refs.len())
            .map(|c| {
                let reduction = v.column(c).norm_squared();
                Posterior {
                    mean: means[c],
                    var: (self.params.signal_var - reduction).max(0.0),
                }
            })
            .collect())
    }

    /// Posterior at `query` on the raw target scale.
    pub fn predict(&self, query: &[f64]) -> Result<Posterior, GpError> {
        let p = self.predict_std(query)?;
        Ok(self.unstandardize(p))
    }

    pub fn predict_batch<Q: AsRef<[f64]>>(&self, queries: &[Q]) -> Result<Vec<Posterior>, GpError> {
        Ok(self
            .predict_batch_std(queries)?
            .into_iter()
            .map(|p| self.unstandardize(p))
            .collect())
    }

    fn unstandardize(&self, p: Posterior) -> Posterior {
        Posterior {
            mean: self.scaling.invert(p.mean),
            var: p.var * self.scaling.scale * self.scaling.scale,
        }
    }

    /// Joint posterior over a finite query set, standardized scale.
    pub fn predict_joint_std<Q: AsRef<[f64]>>(
        &self,
        queries: &[Q],
    ) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
        if queries.is_empty() {
            return Err(GpError::NoQueries);
        }
        if queries.len() > MAX_JOINT_QUERIES {
            return Err(GpError::TooManyQueries {
                max: MAX_JOINT_QUERIES,
                got: queries.len(),
            });
        }
        let refs: Vec<&[f64]> = queries.iter().map(|q| q.as_ref()).collect();
        for q in &refs {
            self.check_query(q)?;
        }
        let m = refs.len();
        let mut cov = DMatrix::from_fn(m, m, |a, b| se(&self.params, refs[a], refs[b]));
        if self.is_empty() {
            return Ok((DVector::zeros(m), cov));
        }
        let kx = self.cross_cov(&refs);
        let mean = kx.tr_mul(&self.alpha);
        let v = self.whiten(&kx);
        cov -= v.tr_mul(&v);
        // symmetrize and clamp the diagonal
        for a in 0..m {
            cov[(a, a)] = cov[(a, a)].max(0.0);
            for b in 0..a {
                let s = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                cov[(a, b)] = s;
                cov[(b, a)] = s;
            }
        }
        Ok((mean, cov))
    }

    /// Joint posterior on the raw target scale.
    pub fn predict_joint<Q: AsRef<[f64]>>(
        &self,
        queries: &[Q],
    ) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
        let (mean, cov) = self.predict_joint_std(queries)?;
        let s = self.scaling.scale;
        Ok((mean.map(|m| self.scaling.invert(m)), cov * (s * s)))
    }

    /// One joint posterior draw (raw scale) at `queries`.
    ///
    /// Queries whose posterior variance is negligible relative to the signal
    /// variance return their posterior mean exactly.
    pub fn sample_joint<Q: AsRef<[f64]>, R: Rng + ?Sized>(
        &self,
        queries: &[Q],
        rng: &mut R,
    ) -> Result<Vec<f64>, GpError> {
        let (mean, cov) = self.predict_joint_std(queries)?;
        let floor = SAMPLE_VAR_FLOOR * self.params.signal_var;
        let active: Vec<usize> = (0..mean.len()).filter(|&i| cov[(i, i)] > floor).collect();
        let mut draw: Vec<f64> = mean.iter().copied().collect();
        if !active.is_empty() {
            let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| cov[(active[a], active[b])]);
            let trace_mean = sub.trace() / active.len() as f64;
            let l = factorize(&sub, 0.0, trace_mean)?.0.unpack();
            let z = DVector::from_iterator(
                active.len(),
                (0..active.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let offset = l * z;
            for (k, &i) in active.iter().enumerate() {
                draw[i] += offset[k];
            }
        }
        Ok(draw.into_iter().map(|v| self.scaling.invert(v)).collect())
    }

    /// Log marginal likelihood of the standardized targets at this model's parameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let y = DVector::from_iterator(n, self.data.targets().iter().map(|&t| self.scaling.apply(t)));
        let log_det: f64 = (0..n).map(|i| self.chol[(i, i)].ln()).sum();
        -0.5 * y.dot(&self.alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Squared Euclidean distance with independent partial sums.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        for j in 0..4 {
            let r = p[j] - q[j];
            acc[j] += r * r;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (p, q) in ra.iter().zip(rb) {
        s += (p - q) * (p - q);
    }
    s
}

fn scale_rows(x: &[f64], d: usize, lengthscales: &[f64]) -> Vec<f64> {
    x.chunks_exact(d.max(1))
        .flat_map(|row| row.iter().zip(lengthscales).map(|(v, l)| v / l))
        .collect()
}

fn kernel_matrix(z: &[f64], n: usize, d: usize, signal_var: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        let za = &z[a * d..(a + 1) * d];
        let mut col = k.column_mut(a);
        for b in 0..a {
            let zb = &z[b * d..(b + 1) * d];
            col[b] = signal_var * (-0.5 * sq_dist(za, zb)).exp();
        }
        col[a] = signal_var;
    }
    k.fill_lower_triangle_with_upper_triangle();
    k
}

/// Inverse of a lower-triangular matrix by recursive 2×2 blocking, so the
/// bulk of the work runs through matrix products.
fn lower_tri_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 48 {
        let mut inv = DMatrix::zeros(n, n);
        for c in 0..n {
            inv[(c, c)] = 1.0 / l[(c, c)];
            for r in c + 1..n {
                let mut s = 0.0;
                for k in c..r {
                    s += l[(r, k)] * inv[(k, c)];
                }
                inv[(r, c)] = -s / l[(r, r)];
            }
        }
        return inv;
    }
    let h = n / 2;
    let a_inv = lower_tri_inverse(&l.view((0, 0), (h, h)).into_owned());
    let c_inv = lower_tri_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h)).into_owned();
    let lower = -(&c_inv * (b * &a_inv));
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    inv.view_mut((h, 0), (n - h, h)).copy_from(&lower);
    inv
}

/// Cholesky of `k + noise·I`, escalating a diagonal jitter from
/// `1e-10 · scale` by factors of ten up to `1e-4 · scale`.
fn factorize(
    k: &DMatrix<f64>,
    noise: f64,
    scale: f64,
) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let n = k.nrows();
    let mut jitter = JITTER_START * scale.max(f64::MIN_POSITIVE);
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::<f64, Dyn>::new(m) {
            return Ok((c, jitter));
        }
        if jitter >= JITTER_MAX * scale * (1.0 - 1e-9) {
            return Err(GpError::SingularKernel { jitter });
        }
        jitter *= 10.0;
    }
}

/// Log marginal likelihood of standardized targets `y` and its gradient with
/// respect to the log-parameters (`[log σ_f², log ℓ.., log σ_n²]`, or a single
/// lengthscale entry when `isotropic`).
pub fn lml_and_grad(
    data: &Dataset,
    y: &[f64],
    params: &KernelParams,
    isotropic: bool,
) -> Result<(f64, Vec<f64>), GpError> {
    let n = data.len();
    let d = data.dim();
    if y.len() != n {
        return Err(GpError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let x: Vec<f64> = data.points().iter().flatten().copied().collect();
    let k = kernel_matrix(&scale_rows(&x, d, &params.lengthscales), n, d, params.signal_var);
    let (chol, _) = factorize(&k, params.noise_var, params.signal_var)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let l = chol.unpack();
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let lml = -0.5 * yv.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = αα^T − K_y^{-1}; dL/dθ = ½ Σ W ∘ ∂K_y/∂θ
    let l_inv = lower_tri_inverse(&l);
    let mut w = -(l_inv.transpose() * &l_inv);
    w.ger(1.0, &alpha, &alpha, 1.0);

    // With M = W ∘ K: ½ Σ M_ab (z_a - z_b)² = Σ_a r_a z_a² - zᵀ M z, r = M 1,
    // per dimension on centered scaled inputs.
    let m = w.component_mul(&k);
    let g_signal = 0.5 * m.sum();
    let r = m.column_sum();
    let mut z = DMatrix::from_fn(n, d, |a, j| x[a * d + j] / params.lengthscales[j]);
    for mut col in z.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let mz = &m * &z;
    let g_ls: Vec<f64> = (0..d)
        .map(|j| {
            z.column(j)
                .iter()
                .zip(mz.column(j).iter())
                .zip(r.iter())
                .map(|((zj, mzj), ra)| zj * (ra * zj - mzj))
                .sum()
        })
        .collect();
    let g_noise = 0.5 * params.noise_var * w.trace();

    let mut grad = vec![g_signal];
    if isotropic {
        grad.push(g_ls.iter().sum());
    } else {
        grad.extend(g_ls);
    }
    grad.push(g_noise);
    Ok((lml, grad))
}

/// Fits hyperparameters to `data` by multi-start marginal-likelihood ascent.
pub fn fit<R: Rng + ?Sized>(data: &Dataset, config: &FitConfig, rng: &mut R) -> Result<GpModel, GpError> {
    fit_with_hint(data, config, None, rng)
}

/// As [`fit`], optionally starting from `hint` (a previous optimum).
pub fn fit_with_hint<R: Rng + ?Sized>(
    data: &Dataset,
    config: &FitConfig,
    hint: Option<&KernelParams>,
    rng: &mut R,
) -> Result<GpModel, GpError> {
    if data.len() < 2 {
        return Err(GpError::InsufficientData {
            needed: 2,
            have: data.len(),
        });
    }
    let dim = data.dim();
    let (scaling, degenerate) = TargetScaling::from_targets(data.targets());
    if degenerate {
        return GpModel::new(data.clone(), KernelParams::fallback(dim));
    }
    let y: Vec<f64> = data.targets().iter().map(|&t| scaling.apply(t)).collect();
    let iso = config.isotropic;
    let (lo, hi) = KernelParams::log_bounds(dim, iso);

    let mut starts = Vec::new();
    if config.warm_start {
        if let Some(h) = hint.filter(|h| h.dim() == dim) {
            starts.push(h.to_log(iso));
        }
    }
    starts.push(KernelParams::default_start(dim).to_log(iso));
    starts.truncate(config.restarts.max(1));
    while starts.len() < config.restarts.max(1) {
        starts.push(lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect());
    }

    let settings = LbfgsSettings {
        max_iters: config.max_iters,
        ..Default::default()
    };
    let objective = |theta: &[f64]| {
        let p = KernelParams::from_log(theta, dim, iso);
        match lml_and_grad(data, &y, &p, iso) {
            Ok((v, g)) if v.is_finite() => (-v, g.into_iter().map(|x| -x).collect()),
            _ => (f64::INFINITY, vec![0.0; theta.len()]),
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        let m = minimize_bounded(objective, start, &lo, &hi, settings);
        if m.f.is_finite() && best.as_ref().is_none_or(|(f, _)| m.f < *f) {
            best = Some((m.f, m.x));
        }
    }
    let params = match best {
        Some((_, theta)) => KernelParams::from_log(&theta, dim, iso),
        None => KernelParams::default_start(dim),
    };
    GpModel::new(data.clone(), params)
}
