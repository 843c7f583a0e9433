//! LDDMM landmark manifold with a Gaussian kernel.
//!
//! A shape of `n` planar landmarks is a point of R^{2n}, flattened as
//! `(x1, y1, x2, y2, …)`. The co-metric at `q` is the kernel matrix `K_q` with
//! 2×2 blocks `k(q_i, q_j) I₂`, `k(a, b) = β exp(−‖a − b‖²/(2σ²))`, and the
//! metric is `K_q⁻¹`. Geodesics are integrated in Hamiltonian form
//!
//! ```text
//! H(q, p) = ½ pᵀ K_q p,   q̇ = K_q p,   ṗ = −∂H/∂q
//! ```
//!
//! with a fixed-step RK4 scheme; the logarithm is found by shooting.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Manifold, ManifoldId, MetricTensor};

/// Relative Hamiltonian drift tolerated along a shot geodesic, on top of
/// the rounding error of evaluating the Hamiltonian itself.
pub const MAX_ENERGY_DRIFT: f64 = 1e-6;

/// Multiple of machine epsilon times `½ Σ |p_i·p_j| k_ij` taken as the
/// rounding error of one Hamiltonian evaluation. With a wide kernel the
/// co-metric is badly conditioned, momenta are large with cancelling
/// terms, and this bound can exceed `1e-6 H`.
const ENERGY_ROUNDOFF: f64 = 64.0 * f64::EPSILON;

const DIRECT_ITER: usize = 10;
const CONTINUATION_TOL: f64 = 1e-6;
const MIN_CONTINUATION_STEP: f64 = 1.0 / 1024.0;
const FD_REL_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkShape {
    points: Vec<[f64; 2]>,
}

impl LandmarkShape {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("landmark shape has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "flattened landmark vector has odd length {}",
                coords.len()
            )));
        }
        Self::new(coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(self.points.len() * 2, self.points.iter().flatten().copied())
    }
}

/// Cotangent vector at a shape; velocity is `K_q p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum(pub DVector<f64>);

/// States sampled along an integrated geodesic, one entry per RK4 node
/// (`steps + 1` entries including both endpoints).
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub positions: Vec<DVector<f64>>,
    pub momenta: Vec<DVector<f64>>,
    pub energies: Vec<f64>,
    /// Rounding-error bound of each entry of `energies`.
    pub energy_roundoff: Vec<f64>,
}

impl GeodesicPath {
    pub fn endpoint(&self) -> &DVector<f64> {
        self.positions.last().expect("path has at least one node")
    }

    /// Largest `|H(t) − H(0)| / H(0)` along the path (0 for the trivial path).
    pub fn relative_drift(&self) -> f64 {
        let h0 = self.energies[0];
        if h0 <= 0.0 {
            return 0.0;
        }
        self.energies
            .iter()
            .map(|h| (h - h0).abs() / h0)
            .fold(0.0, f64::max)
    }

    /// Largest drift beyond the rounding error of the two energies compared,
    /// relative to `H(0)`.
    pub fn drift_beyond_roundoff(&self) -> f64 {
        let h0 = self.energies[0];
        if h0 <= 0.0 {
            return 0.0;
        }
        let r0 = self.energy_roundoff[0];
        self.energies
            .iter()
            .zip(&self.energy_roundoff)
            .map(|(h, r)| ((h - h0).abs() - r - r0).max(0.0) / h0)
            .fold(0.0, f64::max)
    }
}

/// Result of a shooting solve.
#[derive(Clone, Debug)]
pub struct LogSolution {
    pub velocity: DVector<f64>,
    pub momentum: Momentum,
    /// Euclidean norm of `exp(q0, velocity) − q1`.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkGeometry {
    n_landmarks: usize,
    sigma: f64,
    beta: f64,
    steps: usize,
    log_tol: f64,
    log_max_iter: usize,
    warm: WarmStarts,
}

/// Last converged momentum per target shape. Iterative estimators shoot to
/// the same leaves from a slowly moving base, so the previous solution is
/// usually a far better start than the flat guess. Keyed by the exact bits
/// of the target; clones start empty and the cache is ignored by equality.
#[derive(Default)]
struct WarmStarts(Mutex<HashMap<Vec<u64>, DVector<f64>>>);

const WARM_CAPACITY: usize = 4096;

impl WarmStarts {
    fn key(q: &DVector<f64>) -> Vec<u64> {
        q.iter().map(|c| c.to_bits()).collect()
    }

    fn get(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        self.0.lock().ok()?.get(&Self::key(q)).cloned()
    }

    fn put(&self, q: &DVector<f64>, m: &DVector<f64>) {
        if let Ok(mut map) = self.0.lock() {
            if map.len() >= WARM_CAPACITY {
                map.clear();
            }
            map.insert(Self::key(q), m.clone());
        }
    }
}

impl Clone for WarmStarts {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for WarmStarts {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for WarmStarts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.lock().map(|m| m.len()).unwrap_or(0);
        write!(f, "WarmStarts({n})")
    }
}

impl LandmarkGeometry {
    pub const DEFAULT_STEPS: usize = 100;
    pub const DEFAULT_LOG_TOL: f64 = 1e-6;
    pub const DEFAULT_LOG_MAX_ITER: usize = 50;

    pub fn new(n_landmarks: usize, sigma: f64, beta: f64) -> Result<Self> {
        if n_landmarks == 0 {
            return Err(Error::invalid("landmark geometry needs at least one landmark"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("kernel width sigma must be positive, got {sigma}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("kernel amplitude beta must be positive, got {beta}")));
        }
        Ok(Self {
            n_landmarks,
            sigma,
            beta,
            steps: Self::DEFAULT_STEPS,
            log_tol: Self::DEFAULT_LOG_TOL,
            log_max_iter: Self::DEFAULT_LOG_MAX_ITER,
            warm: WarmStarts::default(),
        })
    }

    /// Number of RK4 steps over unit time.
    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("geodesic integration needs at least one step"));
        }
        self.steps = steps;
        Ok(self)
    }

    /// Endpoint tolerance and iteration cap used by [`Manifold::log`].
    pub fn with_log_tolerance(mut self, tol: f64, max_iter: usize) -> Result<Self> {
        if !(tol > 0.0) || max_iter == 0 {
            return Err(Error::invalid("log tolerance must be positive with max_iter ≥ 1"));
        }
        self.log_tol = tol;
        self.log_max_iter = max_iter;
        Ok(self)
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn log_tol(&self) -> f64 {
        self.log_tol
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        self.beta * (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// n×n scalar kernel matrix.
    fn scalar_kernel(&self, q: &[f64]) -> DMatrix<f64> {
        let n = q.len() / 2;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.beta;
            for j in 0..i {
                let v = self.kernel(&q[2 * i..2 * i + 2], &q[2 * j..2 * j + 2]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn factor(&self, q: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        self.scalar_kernel(q).cholesky().ok_or_else(|| {
            Error::numeric(format!(
                "kernel matrix is numerically singular (sigma = {}); landmarks nearly coincide, \
                 reduce sigma or regularise the configuration",
                self.sigma
            ))
        })
    }

    /// Applies `(k ⊗ I₂)⁻¹` to a flattened 2n vector.
    fn solve_flat(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> DVector<f64> {
        let n = v.len() / 2;
        let rhs = DMatrix::from_fn(n, 2, |i, c| v[2 * i + c]);
        let x = chol.solve(&rhs);
        DVector::from_fn(2 * n, |r, _| x[(r / 2, r % 2)])
    }

    fn check_shape(&self, v: &DVector<f64>) -> Result<()> {
        self.check_dim(v)
    }

    /// Right-hand side of Hamilton's equations.
    fn vector_field(&self, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
        let n = q.len() / 2;
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        dq.fill(0.0);
        dp.fill(0.0);
        for i in 0..n {
            let (qi, pi) = (&q[2 * i..2 * i + 2], &p[2 * i..2 * i + 2]);
            dq[2 * i] += self.beta * pi[0];
            dq[2 * i + 1] += self.beta * pi[1];
            for j in 0..i {
                let (qj, pj) = (&q[2 * j..2 * j + 2], &p[2 * j..2 * j + 2]);
                let k = self.kernel(qi, qj);
                dq[2 * i] += k * pj[0];
                dq[2 * i + 1] += k * pj[1];
                dq[2 * j] += k * pi[0];
                dq[2 * j + 1] += k * pi[1];
                let c = (pi[0] * pj[0] + pi[1] * pj[1]) * k * inv_s2;
                let (dx, dy) = (qi[0] - qj[0], qi[1] - qj[1]);
                dp[2 * i] += c * dx;
                dp[2 * i + 1] += c * dy;
                dp[2 * j] -= c * dx;
                dp[2 * j + 1] -= c * dy;
            }
        }
    }

    /// Hamiltonian and its rounding-error bound.
    fn energy(&self, q: &[f64], p: &[f64]) -> (f64, f64) {
        let n = q.len() / 2;
        let (mut h, mut mag) = (0.0, 0.0);
        for i in 0..n {
            let pi = &p[2 * i..2 * i + 2];
            let d = 0.5 * self.beta * (pi[0] * pi[0] + pi[1] * pi[1]);
            h += d;
            mag += d;
            for j in 0..i {
                let pj = &p[2 * j..2 * j + 2];
                let t = self.kernel(&q[2 * i..2 * i + 2], &q[2 * j..2 * j + 2]) * (pi[0] * pj[0] + pi[1] * pj[1]);
                h += t;
                mag += t.abs();
            }
        }
        (h, ENERGY_ROUNDOFF * mag)
    }

    /// Fixed-step RK4 over unit time. Returns the final state and, when
    /// `record` is set, every intermediate state with its energy.
    fn integrate(
        &self,
        q0: &DVector<f64>,
        p0: &DVector<f64>,
        steps: usize,
        record: bool,
    ) -> (DVector<f64>, DVector<f64>, Option<GeodesicPath>) {
        let dim = q0.len();
        let h = 1.0 / steps as f64;
        let mut q = q0.as_slice().to_vec();
        let mut p = p0.as_slice().to_vec();
        let mut path = record.then(|| {
            let (e, r) = self.energy(&q, &p);
            GeodesicPath {
                positions: vec![q0.clone()],
                momenta: vec![p0.clone()],
                energies: vec![e],
                energy_roundoff: vec![r],
            }
        });

        // RK4 stage derivatives
        let mut kq = vec![vec![0.0; dim]; 4];
        let mut kp = vec![vec![0.0; dim]; 4];
        let mut tq = vec![0.0; dim];
        let mut tp = vec![0.0; dim];
        for _ in 0..steps {
            self.vector_field(&q, &p, &mut kq[0], &mut kp[0]);
            for (stage, frac) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
                for r in 0..dim {
                    tq[r] = q[r] + frac * h * kq[stage - 1][r];
                    tp[r] = p[r] + frac * h * kp[stage - 1][r];
                }
                let (dq, dp) = (&mut kq[stage], &mut kp[stage]);
                self.vector_field(&tq, &tp, dq, dp);
            }
            for r in 0..dim {
                q[r] += h / 6.0 * (kq[0][r] + 2.0 * kq[1][r] + 2.0 * kq[2][r] + kq[3][r]);
                p[r] += h / 6.0 * (kp[0][r] + 2.0 * kp[1][r] + 2.0 * kp[2][r] + kp[3][r]);
            }
            if let Some(path) = path.as_mut() {
                path.positions.push(DVector::from_column_slice(&q));
                path.momenta.push(DVector::from_column_slice(&p));
                let (e, r) = self.energy(&q, &p);
                path.energies.push(e);
                path.energy_roundoff.push(r);
            }
        }
        (DVector::from_vec(q), DVector::from_vec(p), path)
    }

    /// Integrates the geodesic from `q0` with initial momentum `p0`, checking
    /// energy conservation.
    pub fn geodesic(&self, q0: &DVector<f64>, p0: &Momentum, steps: usize) -> Result<GeodesicPath> {
        self.check_shape(q0)?;
        self.check_shape(&p0.0)?;
        if steps == 0 {
            return Err(Error::invalid("geodesic integration needs at least one step"));
        }
        let (_, _, path) = self.integrate(q0, &p0.0, steps, true);
        let path = path.expect("recorded");
        let drift = path.drift_beyond_roundoff();
        if !(drift < MAX_ENERGY_DRIFT) {
            return Err(Error::numeric(format!(
                "Hamiltonian drift {drift:e} exceeds {MAX_ENERGY_DRIFT:e} with {steps} steps; \
                 increase the number of integration steps"
            )));
        }
        Ok(path)
    }

    /// Momentum `K_q⁻¹ v` for a velocity `v` at `q`.
    pub fn momentum(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<Momentum> {
        self.check_shape(q)?;
        self.check_shape(v)?;
        let chol = self.factor(q.as_slice())?;
        Ok(Momentum(Self::solve_flat(&chol, v)))
    }

    /// Velocity `K_q p` for a momentum at `q`.
    pub fn velocity(&self, q: &DVector<f64>, p: &Momentum) -> Result<DVector<f64>> {
        self.check_shape(q)?;
        self.check_shape(&p.0)?;
        let k = self.scalar_kernel(q.as_slice());
        let n = q.len() / 2;
        let pm = DMatrix::from_fn(n, 2, |i, c| p.0[2 * i + c]);
        let vm = k * pm;
        Ok(DVector::from_fn(2 * n, |r, _| vm[(r / 2, r % 2)]))
    }

    /// Exponential map with an explicit step count.
    pub fn exp_with_steps(&self, q0: &DVector<f64>, v: &DVector<f64>, steps: usize) -> Result<DVector<f64>> {
        self.check_shape(q0)?;
        self.check_shape(v)?;
        if steps == 0 {
            return Err(Error::invalid("geodesic integration needs at least one step"));
        }
        if v.iter().all(|&c| c == 0.0) {
            return Ok(q0.clone());
        }
        let m = self.momentum(q0, v)?;
        let path = self.geodesic(q0, &m, steps)?;
        Ok(path.endpoint().clone())
    }

    /// Logarithm by geodesic shooting.
    ///
    /// Solves `exp(q0, K m) = q1` for the initial momentum `m` with a
    /// Levenberg–Marquardt iteration on the endpoint residual, starting from
    /// the flat-space guess `m = K_{q0}⁻¹ (q1 − q0)`. If that stalls, the
    /// target is approached by continuation along `q0 + s (q1 − q0)`, each
    /// stage warm-started from the previous one; `max_iter` bounds every
    /// stage and `iterations` reports the total.
    ///
    /// The Jacobian is formed by forward differences in momentum with
    /// relative step 1e-6. Differencing in velocity instead would perturb
    /// the momentum by `K⁻¹ e_j h`, which is large for rough directions when
    /// K is ill-conditioned and makes the quotient meaningless.
    pub fn shoot(&self, q0: &DVector<f64>, q1: &DVector<f64>, tol: f64, max_iter: usize) -> Result<LogSolution> {
        self.check_shape(q0)?;
        self.check_shape(q1)?;
        if q1.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("target shape has non-finite coordinates"));
        }
        let chol = self.factor(q0.as_slice())?;
        let d = q1 - q0;
        let flat = Self::solve_flat(&chol, &d);

        let start = match self.warm.get(q1) {
            Some(prev) => {
                let miss = |m: &DVector<f64>| (self.integrate(q0, m, self.steps, false).0 - q1).norm();
                if miss(&prev) < miss(&flat) { prev } else { flat.clone() }
            }
            None => flat.clone(),
        };
        let direct = self.solve_momentum(q0, q1, start, tol, max_iter.min(DIRECT_ITER));
        let mut iterations = direct.iterations;
        let (m, cost) = if direct.cost < tol {
            (direct.m, direct.cost)
        } else {
            log::debug!("direct shooting stalled at residual {:e}; using continuation", direct.cost);
            let stage_tol = (CONTINUATION_TOL * d.norm()).max(tol);
            let (mut s, mut ds) = (0.0_f64, 0.25_f64);
            let mut m = DVector::zeros(q0.len());
            let mut last = (m.clone(), f64::INFINITY);
            while s < 1.0 {
                let next = (s + ds).min(1.0);
                let target = q0 + &d * next;
                let start = if s == 0.0 { &flat * next } else { &m * (next / s) };
                let goal = if next == 1.0 { tol } else { stage_tol };
                let stage = self.solve_momentum(q0, &target, start, goal, max_iter);
                iterations += stage.iterations;
                if stage.cost < goal {
                    s = next;
                    m = stage.m;
                    ds = (ds * 1.5).min(0.5);
                } else {
                    last = (stage.m, stage.cost);
                    ds /= 2.0;
                    if ds < MIN_CONTINUATION_STEP {
                        break;
                    }
                }
            }
            if s < 1.0 {
                return Err(Error::NoConvergence {
                    what: "geodesic shooting",
                    iterations,
                    residual: last.1,
                    last: last.0.iter().copied().collect(),
                });
            }
            let cost = (self.integrate(q0, &m, self.steps, false).0 - q1).norm();
            (m, cost)
        };
        if !(cost < tol) {
            return Err(Error::NoConvergence {
                what: "geodesic shooting",
                iterations,
                residual: cost,
                last: m.iter().copied().collect(),
            });
        }

        self.warm.put(q1, &m);
        let momentum = Momentum(m);
        let path = self.geodesic(q0, &momentum, self.steps)?;
        let residual = (path.endpoint() - q1).norm();
        Ok(LogSolution {
            velocity: self.velocity(q0, &momentum)?,
            momentum,
            residual,
            iterations,
        })
    }

    fn solve_momentum(&self, q0: &DVector<f64>, q1: &DVector<f64>, mut m: DVector<f64>, tol: f64, max_iter: usize) -> LmOutcome {
        let dim = q0.len();
        let endpoint = |m: &DVector<f64>| -> DVector<f64> { self.integrate(q0, m, self.steps, false).0 };
        let residual_of = |m: &DVector<f64>| -> (DVector<f64>, f64) {
            let r = endpoint(m) - q1;
            let norm = r.norm();
            (r, if norm.is_finite() { norm } else { f64::INFINITY })
        };
        let jacobian = |m: &DVector<f64>, r: &DVector<f64>| -> DMatrix<f64> {
            let base = r + q1;
            let h = FD_REL_STEP * m.amax().max(1e-3);
            let columns: Vec<DVector<f64>> = (0..dim)
                .into_par_iter()
                .map(|j| {
                    let mut mj = m.clone();
                    mj[j] += h;
                    (endpoint(&mj) - &base) / h
                })
                .collect();
            DMatrix::from_columns(&columns)
        };
        let (mut r, mut cost) = residual_of(&m);
        if cost < tol || max_iter == 0 {
            return LmOutcome { m, cost, iterations: 0 };
        }
        // Broyden updates keep the finite-difference Jacobian current between
        // refreshes; a fresh one is formed whenever the updated model fails
        // to produce a descent step.
        let mut jac = jacobian(&m, &r);
        let mut fresh = true;
        let mut lambda = 0.0;
        let mut iterations = 0;
        while cost >= tol && iterations < max_iter {
            iterations += 1;
            let mut accepted = false;
            let mut rejected = 0;
            while !accepted {
                let jtj = jac.tr_mul(&jac);
                let jtr = jac.tr_mul(&r);
                let scale = jtj.diagonal().amax().max(f64::MIN_POSITIVE);
                let step = if lambda == 0.0 {
                    jac.clone().lu().solve(&(-&r))
                } else {
                    let damped = &jtj + DMatrix::identity(dim, dim) * (lambda * scale);
                    damped.cholesky().map(|c| c.solve(&(-&jtr)))
                };
                if let Some(step) = step.filter(|s| s.iter().all(|c| c.is_finite())) {
                    let trial = &m + &step;
                    let (r_trial, cost_trial) = residual_of(&trial);
                    if cost_trial < cost {
                        let predicted = &jac * &step;
                        jac += (&r_trial - &r - predicted) * step.transpose() / step.norm_squared();
                        fresh = false;
                        m = trial;
                        r = r_trial;
                        cost = cost_trial;
                        lambda = if lambda < 1e-10 { 0.0 } else { lambda / 10.0 };
                        accepted = true;
                        continue;
                    }
                }
                rejected += 1;
                if !fresh && rejected >= 2 {
                    jac = jacobian(&m, &r);
                    fresh = true;
                    lambda = 0.0;
                    rejected = 0;
                } else if rejected > 40 {
                    break;
                } else {
                    lambda = if lambda == 0.0 { 1e-8 } else { lambda * 10.0 };
                }
            }
            log::trace!("shooting iteration {iterations}: residual {cost:e}, damping {lambda:e}");
            if !accepted {
                break;
            }
        }
        LmOutcome { m, cost, iterations }
    }
}

struct LmOutcome {
    m: DVector<f64>,
    cost: f64,
    iterations: usize,
}

/// Co-metric `K_q` (2n×2n) with blocks `k(q_i, q_j) I₂`.
pub fn kernel_cometric(shape: &LandmarkShape, geometry: &LandmarkGeometry) -> Result<MetricTensor> {
    if shape.len() != geometry.n_landmarks {
        return Err(Error::DimensionMismatch {
            expected: geometry.n_landmarks,
            found: shape.len(),
        });
    }
    let q = shape.to_flat();
    geometry.factor(q.as_slice())?;
    let k = geometry.scalar_kernel(q.as_slice());
    let n = shape.len();
    let full = DMatrix::from_fn(2 * n, 2 * n, |r, c| if r % 2 == c % 2 { k[(r / 2, c / 2)] } else { 0.0 });
    Ok(MetricTensor::new_unchecked(full))
}

/// `H(q, p) = ½ pᵀ K_q p`.
pub fn hamiltonian(shape: &LandmarkShape, momentum: &Momentum, geometry: &LandmarkGeometry) -> Result<f64> {
    let q = shape.to_flat();
    geometry.check_shape(&q)?;
    geometry.check_shape(&momentum.0)?;
    Ok(geometry.energy(q.as_slice(), momentum.0.as_slice()).0)
}

impl Manifold for LandmarkGeometry {
    fn id(&self) -> ManifoldId {
        ManifoldId::Landmarks
    }

    fn embedding_dim(&self) -> usize {
        2 * self.n_landmarks
    }

    fn intrinsic_dim(&self) -> usize {
        2 * self.n_landmarks
    }

    fn injectivity_bound(&self) -> Option<f64> {
        None
    }

    fn membership_error(&self, _coords: &DVector<f64>) -> f64 {
        0.0
    }

    fn tangent_error(&self, _base: &DVector<f64>, _v: &DVector<f64>) -> f64 {
        0.0
    }

    fn metric(&self, p: &DVector<f64>) -> Result<MetricTensor> {
        self.check_shape(p)?;
        let chol = self.factor(p.as_slice())?;
        let n = self.n_landmarks;
        let inv = chol.inverse();
        let inv = (&inv + inv.transpose()) * 0.5;
        Ok(MetricTensor::new_unchecked(DMatrix::from_fn(2 * n, 2 * n, |r, c| {
            if r % 2 == c % 2 {
                inv[(r / 2, c / 2)]
            } else {
                0.0
            }
        })))
    }

    fn cometric(&self, p: &DVector<f64>) -> Result<MetricTensor> {
        self.check_shape(p)?;
        kernel_cometric(&LandmarkShape::from_flat(p.as_slice())?, self)
    }

    /// `uᵀ K_p⁻¹ v` via a Cholesky solve.
    fn inner(&self, p: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_shape(p)?;
        self.check_shape(u)?;
        self.check_shape(v)?;
        let chol = self.factor(p.as_slice())?;
        Ok(u.dot(&Self::solve_flat(&chol, v)))
    }

    fn exp(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.exp_with_steps(p, v, self.steps)
    }

    fn log(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        if p == q {
            self.check_shape(p)?;
            return Ok(DVector::zeros(p.len()));
        }
        Ok(self.shoot(p, q, self.log_tol, self.log_max_iter)?.velocity)
    }
}
