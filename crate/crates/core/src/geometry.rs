//! Manifold interface and manifold-generic statistics.
//!
//! Every geometry stores points in embedding coordinates. Tangent vectors at a
//! point live in the same coordinate space (for the sphere they are vectors in
//! R^3 orthogonal to the base point). Intrinsic charts, when a geometry needs
//! them, are private to that geometry; the only intrinsic object exposed is an
//! [`OrthonormalBasis`], which maps between tangent vectors and their
//! coordinates in a metric-orthonormal frame.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Tolerance for manifold membership and tangency checks.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ManifoldId {
    Euclidean,
    Sphere,
    Landmarks,
}

impl std::fmt::Display for ManifoldId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ManifoldId::Euclidean => "euclidean",
            ManifoldId::Sphere => "sphere",
            ManifoldId::Landmarks => "landmarks",
        };
        f.write_str(name)
    }
}

/// A point on a manifold in embedding coordinates.
///
/// Construct through [`Manifold::point`], which validates membership.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldPoint {
    coords: DVector<f64>,
    manifold: ManifoldId,
}

impl ManifoldPoint {
    pub(crate) fn new_unchecked(coords: DVector<f64>, manifold: ManifoldId) -> Self {
        Self { coords, manifold }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn manifold(&self) -> ManifoldId {
        self.manifold
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }
}

/// A vector in the tangent space at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    base: ManifoldPoint,
    vec: DVector<f64>,
}

impl TangentVector {
    pub fn base(&self) -> &ManifoldPoint {
        &self.base
    }

    pub fn vec(&self) -> &DVector<f64> {
        &self.vec
    }

    pub fn into_vec(self) -> DVector<f64> {
        self.vec
    }
}

/// Symmetric positive definite matrix representing a metric or co-metric in
/// embedding coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTensor {
    g: DMatrix<f64>,
}

impl MetricTensor {
    /// Validates symmetry (1e-12, relative to the largest entry) and positive
    /// definiteness.
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if !g.is_square() {
            return Err(Error::invalid(format!(
                "metric must be square, got {}x{}",
                g.nrows(),
                g.ncols()
            )));
        }
        let scale = g.amax().max(1.0);
        let asym = (&g - g.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::numeric(format!("metric not symmetric (max asymmetry {asym:e})")));
        }
        if g.clone().cholesky().is_none() {
            return Err(Error::numeric("metric is not positive definite"));
        }
        Ok(Self { g })
    }

    pub(crate) fn new_unchecked(g: DMatrix<f64>) -> Self {
        Self { g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }
}

/// A metric-orthonormal frame of a tangent space.
///
/// `frame` is D×d: its columns are tangent vectors in embedding coordinates,
/// orthonormal with respect to the metric at the base point. When built from a
/// co-metric `K = L Lᵀ` the frame is `L` itself, and coordinates of a tangent
/// vector `v` are `L⁻¹ v`, computed by triangular solve. An optional rotation
/// `Q` replaces the frame by `L Q`.
#[derive(Clone, Debug)]
pub struct OrthonormalBasis {
    frame: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
    rotation: Option<DMatrix<f64>>,
}

impl OrthonormalBasis {
    /// Basis from the co-metric `g⁻¹ = L Lᵀ`; the columns of `L` are
    /// g-orthonormal.
    pub fn from_cometric(cometric: &MetricTensor) -> Result<Self> {
        let chol = cometric.matrix().clone().cholesky().ok_or_else(|| {
            Error::numeric("co-metric is not positive definite; Cholesky factorisation failed")
        })?;
        let l = chol.l();
        Ok(Self {
            frame: l.clone(),
            factor: Some(l),
            rotation: None,
        })
    }

    /// Basis from a frame whose columns are orthonormal in the Euclidean inner
    /// product of the embedding space (valid for induced metrics such as the
    /// round sphere).
    pub fn from_embedded_frame(frame: DMatrix<f64>) -> Self {
        Self {
            frame,
            factor: None,
            rotation: None,
        }
    }

    /// Replace the frame `E` by `E Q`. `Q` must be orthogonal (d×d).
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self> {
        let d = self.dim();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: q.nrows(),
            });
        }
        let defect = (q.transpose() * q - DMatrix::identity(d, d)).amax();
        if defect > 1e-10 {
            return Err(Error::invalid(format!("rotation is not orthogonal (defect {defect:e})")));
        }
        let rotation = match &self.rotation {
            Some(r) => r * q,
            None => q.clone(),
        };
        Ok(Self {
            frame: &self.frame * q,
            factor: self.factor.clone(),
            rotation: Some(rotation),
        })
    }

    /// D×d matrix of frame vectors.
    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    /// Intrinsic dimension d.
    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.frame.nrows()
    }

    /// Coordinates of the tangent vector `v` in this frame.
    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Some(l) => {
                let c = l
                    .solve_lower_triangular(v)
                    .expect("Cholesky factor has a positive diagonal");
                match &self.rotation {
                    Some(q) => q.tr_mul(&c),
                    None => c,
                }
            }
            None => self.frame.tr_mul(v),
        }
    }

    /// Coordinates of every row of `x` (N×D), returned as an N×d matrix. This
    /// is `X (L⁻¹)ᵀ` for a Cholesky frame.
    pub fn coordinates_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), self.dim());
        for (i, row) in x.row_iter().enumerate() {
            let c = self.coordinates(&row.transpose());
            out.row_mut(i).copy_from(&c.transpose());
        }
        out
    }

    /// Tangent vector with coordinates `c`.
    pub fn vector(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.frame * c
    }
}

/// A Riemannian manifold with points in embedding coordinates.
///
/// The required methods work on raw coordinate vectors; the provided methods
/// wrap them with validated [`ManifoldPoint`] / [`TangentVector`] types.
pub trait Manifold: Send + Sync {
    fn id(&self) -> ManifoldId;

    /// Length of coordinate vectors.
    fn embedding_dim(&self) -> usize;

    fn intrinsic_dim(&self) -> usize;

    /// Conservative radius within which tangent vectors are guaranteed to be
    /// inside the tangential cut locus. `None` when unknown.
    fn injectivity_bound(&self) -> Option<f64>;

    /// Distance of `coords` from the manifold (0 for flat spaces).
    fn membership_error(&self, coords: &DVector<f64>) -> f64;

    /// Size of the normal component of `v` at `base`.
    fn tangent_error(&self, base: &DVector<f64>, v: &DVector<f64>) -> f64;

    /// Metric g_p in embedding coordinates.
    fn metric(&self, p: &DVector<f64>) -> Result<MetricTensor>;

    /// Co-metric g_p⁻¹ in embedding coordinates (restricted to the tangent
    /// space for embedded geometries).
    fn cometric(&self, p: &DVector<f64>) -> Result<MetricTensor>;

    fn inner(&self, p: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64>;

    fn exp(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    fn log(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>>;

    /// Nearest point of the manifold to ambient coordinates `x`. The default
    /// is the identity, which suits manifolds that fill their embedding.
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(x.clone())
    }

    /// g-orthonormal frame of T_pM. The default factors the co-metric.
    fn basis(&self, p: &DVector<f64>) -> Result<OrthonormalBasis> {
        OrthonormalBasis::from_cometric(&self.cometric(p)?)
    }

    fn norm(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        Ok(self.inner(p, v, v)?.max(0.0).sqrt())
    }

    fn distance(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<f64> {
        let v = self.log(p, q)?;
        self.norm(p, &v)
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.embedding_dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Validate `coords` and wrap them as a point of this manifold.
    fn point(&self, coords: DVector<f64>) -> Result<ManifoldPoint> {
        self.check_dim(&coords)?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        let err = self.membership_error(&coords);
        if err > MEMBERSHIP_TOL {
            return Err(Error::invalid(format!(
                "point is not on the {} manifold (error {err:e})",
                self.id()
            )));
        }
        Ok(ManifoldPoint::new_unchecked(coords, self.id()))
    }

    fn tangent(&self, base: &ManifoldPoint, vec: DVector<f64>) -> Result<TangentVector> {
        self.owns(base)?;
        self.check_dim(&vec)?;
        let err = self.tangent_error(base.coords(), &vec);
        if err > MEMBERSHIP_TOL * vec.amax().max(1.0) {
            return Err(Error::invalid(format!(
                "vector is not tangent at the base point (normal component {err:e})"
            )));
        }
        Ok(TangentVector {
            base: base.clone(),
            vec,
        })
    }

    fn owns(&self, p: &ManifoldPoint) -> Result<()> {
        if p.manifold() != self.id() {
            return Err(Error::invalid(format!(
                "point belongs to the {} manifold, not {}",
                p.manifold(),
                self.id()
            )));
        }
        self.check_dim(p.coords())
    }

    fn metric_inner(&self, u: &TangentVector, v: &TangentVector) -> Result<f64> {
        self.owns(u.base())?;
        if u.base() != v.base() {
            return Err(Error::invalid("tangent vectors have different base points"));
        }
        self.inner(u.base().coords(), u.vec(), v.vec())
    }

    fn exp_map(&self, v: &TangentVector) -> Result<ManifoldPoint> {
        self.owns(v.base())?;
        let q = self.exp(v.base().coords(), v.vec())?;
        Ok(ManifoldPoint::new_unchecked(q, self.id()))
    }

    fn log_map(&self, p: &ManifoldPoint, q: &ManifoldPoint) -> Result<TangentVector> {
        self.owns(p)?;
        self.owns(q)?;
        let vec = self.log(p.coords(), q.coords())?;
        Ok(TangentVector {
            base: p.clone(),
            vec,
        })
    }

    fn geodesic_distance(&self, p: &ManifoldPoint, q: &ManifoldPoint) -> Result<f64> {
        self.owns(p)?;
        self.owns(q)?;
        self.distance(p.coords(), q.coords())
    }

    fn orthonormal_basis(&self, p: &ManifoldPoint) -> Result<OrthonormalBasis> {
        self.owns(p)?;
        self.basis(p.coords())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FrechetOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FrechetOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Fréchet mean by gradient descent: `μ ← exp_μ(α · mean_i log_μ(x_i))`,
/// started at the projected arithmetic mean (or the first point when that is
/// not on the manifold). The step `α` starts at 1 and is halved whenever
/// neither the objective `Σ d(μ, x_i)² / 2n` nor the gradient norm would
/// decrease, which stops the period-two oscillation of the plain iteration on
/// strongly curved geometries, and doubled again (up to 1) after each
/// accepted step. Stops when the g-norm of the mean log drops below `tol`.
pub fn frechet_mean<M: Manifold + ?Sized>(
    manifold: &M,
    points: &[ManifoldPoint],
    opts: FrechetOptions,
) -> Result<ManifoldPoint> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("Fréchet mean of an empty set"))?;
    for p in points {
        manifold.owns(p)?;
    }
    let n = points.len() as f64;
    let start = points.iter().fold(DVector::zeros(first.coords().len()), |acc, p| acc + p.coords()) / n;
    let mut mu = match manifold.project(&start).and_then(|p| manifold.point(p)) {
        Ok(p) => p.into_coords(),
        Err(_) => first.coords().clone(),
    };
    // Mean log at `at` and the objective there.
    let gradient = |at: &DVector<f64>| -> Result<(DVector<f64>, f64)> {
        let logs = points
            .par_iter()
            .enumerate()
            .map(|(i, x)| manifold.log(at, x.coords()).map_err(|e| e.at_leaf(format!("#{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut mean = DVector::zeros(at.len());
        let mut objective = 0.0;
        for v in &logs {
            mean += v;
            objective += manifold.inner(at, v, v)?;
        }
        Ok((mean / n, objective / (2.0 * n)))
    };
    let (mut mean, mut objective) = gradient(&mu)?;
    let mut alpha = 1.0_f64;
    let mut norm = f64::INFINITY;
    for _ in 0..opts.max_iter {
        norm = manifold.norm(&mu, &mean)?;
        log::debug!("Fréchet mean iteration: gradient norm {norm:e}, objective {objective:e}, step {alpha}");
        if norm < opts.tol {
            return Ok(ManifoldPoint::new_unchecked(mu, manifold.id()));
        }
        loop {
            let trial = manifold.exp(&mu, &(&mean * alpha))?;
            let (trial_mean, trial_objective) = gradient(&trial)?;
            // Near the optimum inexact logs (shooting) make the objective
            // noisier than its true decrease; a shrinking gradient still
            // shows progress there.
            let descends = trial_objective <= objective * (1.0 + 1e-9)
                || manifold.norm(&trial, &trial_mean)? < norm;
            if descends || alpha < 1e-6 {
                mu = trial;
                mean = trial_mean;
                objective = trial_objective;
                alpha = (alpha * 2.0).min(1.0);
                break;
            }
            alpha /= 2.0;
        }
    }
    Err(Error::NoConvergence {
        what: "Fréchet mean",
        iterations: opts.max_iter,
        residual: norm,
        last: mu.iter().copied().collect(),
    })
}
