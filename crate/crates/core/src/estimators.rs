//! Phylogenetic GLS root and covariance estimates, Euclidean p-PCA, the
//! iterative manifold root estimate and tangent p-PCA.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Manifold, ManifoldPoint, OrthonormalBasis};
use crate::manifolds::Euclidean;
use crate::phylo::{evolutionary_covariance, EvolCovariance, LeafOrder, PTree};

/// Condition number of C above which a warning is logged.
pub const COND_WARN: f64 = 1e12;

/// Leaf observations as rows, in a fixed leaf order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix {
    x: DMatrix<f64>,
    order: LeafOrder,
}

impl ObservationMatrix {
    pub fn new(x: DMatrix<f64>, order: LeafOrder) -> Result<Self> {
        if x.nrows() != order.len() {
            return Err(Error::DimensionMismatch {
                expected: order.len(),
                found: x.nrows(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation matrix has non-finite entries"));
        }
        Ok(Self { x, order })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn order(&self) -> &LeafOrder {
        &self.order
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

/// Cholesky factor of `C + λI`, reused across GLS solves.
#[derive(Clone, Debug)]
pub struct GlsWeights {
    chol: Cholesky<f64, Dyn>,
    order: LeafOrder,
    /// `C⁻¹1`
    w: DVector<f64>,
    /// `1ᵀC⁻¹1`
    total: f64,
    condition: f64,
}

impl GlsWeights {
    pub fn new(c: &EvolCovariance, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(format!("ridge must be nonnegative, got {ridge}")));
        }
        let n = c.len();
        if n == 0 {
            return Err(Error::invalid("empty evolutionary covariance"));
        }
        let m = c.matrix() + DMatrix::identity(n, n) * ridge;
        let eig = m.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        if !(min > max * f64::EPSILON * n as f64) {
            return Err(Error::numeric(format!(
                "evolutionary covariance is singular (eigenvalues in [{min:e}, {max:e}]); set a positive ridge"
            )));
        }
        let condition = max / min;
        if condition > COND_WARN {
            log::warn!("evolutionary covariance is ill-conditioned (condition number {condition:e})");
        }
        let chol = Cholesky::new(m).ok_or_else(|| Error::numeric("Cholesky factorisation of C failed"))?;
        let w = chol.solve(&DVector::from_element(n, 1.0));
        let total = w.sum();
        Ok(Self {
            chol,
            order: c.order().clone(),
            w,
            total,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.order.len() {
            return Err(Error::DimensionMismatch {
                expected: self.order.len(),
                found: x.nrows(),
            });
        }
        Ok(())
    }

    /// `(1ᵀC⁻¹1)⁻¹ 1ᵀC⁻¹X`
    pub fn root(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        Ok(x.tr_mul(&self.w) / self.total)
    }

    /// `(N−1)⁻¹ X_cᵀ C⁻¹ X_c`, symmetrised.
    pub fn covariance(&self, xc: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(xc)?;
        let n = xc.nrows();
        if n < 2 {
            return Err(Error::invalid("need at least two observations for a covariance"));
        }
        let r = xc.tr_mul(&self.chol.solve(xc)) / (n - 1) as f64;
        Ok((&r + r.transpose()) * 0.5)
    }
}

fn check_order(a: &LeafOrder, b: &LeafOrder) -> Result<()> {
    if a != b {
        return Err(Error::invalid("observation rows and covariance use different leaf orders"));
    }
    Ok(())
}

pub fn gls_root_estimate(x: &ObservationMatrix, c: &EvolCovariance, ridge: f64) -> Result<DVector<f64>> {
    check_order(x.order(), c.order())?;
    GlsWeights::new(c, ridge)?.root(x.matrix())
}

/// C-weighted covariance of centred observations, in the coordinates of the
/// input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PhyloCovariance {
    matrix: DMatrix<f64>,
}

impl PhyloCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

pub fn phylo_covariance(xc: &ObservationMatrix, c: &EvolCovariance, ridge: f64) -> Result<PhyloCovariance> {
    check_order(xc.order(), c.order())?;
    if xc.nrows() < 2 {
        return Err(Error::invalid("need at least two observations for a covariance"));
    }
    Ok(PhyloCovariance {
        matrix: GlsWeights::new(c, ridge)?.covariance(xc.matrix())?,
    })
}

/// Eigenpairs sorted by descending eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigen {
    pub values: DVector<f64>,
    /// Columns are unit eigenvectors; each has its largest-magnitude entry
    /// positive.
    pub vectors: DMatrix<f64>,
    /// Indices `i` (0-based) with `λ_i ≈ λ_{i+1}`.
    pub ties: Vec<usize>,
}

pub fn sorted_eigen(r: &DMatrix<f64>) -> Eigen {
    let sym = (r + r.transpose()) * 0.5;
    let d = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut idx: Vec<usize> = (0..d).collect();
    // stable sort keeps input order among equal eigenvalues
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(d, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (col, &i) in idx.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let big = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v = -v;
        }
        vectors.set_column(col, &v);
    }
    let scale = values.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let ties: Vec<usize> = (0..d.saturating_sub(1))
        .filter(|&i| (values[i] - values[i + 1]).abs() <= 1e-10 * scale)
        .collect();
    // A null space is expected when there are fewer observations than
    // dimensions; only ties above it deserve a warning.
    let signal: Vec<usize> = ties.iter().copied().filter(|&i| values[i].abs() > 1e-10 * scale).collect();
    if !signal.is_empty() && scale > f64::MIN_POSITIVE {
        log::warn!("covariance has tied eigenvalues at positions {signal:?}; eigenvectors there are not unique");
    } else if !ties.is_empty() {
        log::debug!("covariance has a null space of tied eigenvalues at positions {ties:?}");
    }
    Eigen { values, vectors, ties }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RootEstimate {
    pub point: ManifoldPoint,
    pub iterations: usize,
    pub final_update_norm: f64,
    pub converged: bool,
    /// g-norm of the GLS update at each iteration.
    pub trace: Vec<f64>,
}

impl RootEstimate {
    /// A root supplied directly rather than estimated.
    pub fn given(point: ManifoldPoint) -> Self {
        Self {
            point,
            iterations: 0,
            final_update_norm: 0.0,
            converged: true,
            trace: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_iter: 100,
            ridge: 0.0,
        }
    }
}

fn logs<M: Manifold + ?Sized>(m: &M, base: &DVector<f64>, leaves: &[ManifoldPoint], order: &LeafOrder) -> Result<DMatrix<f64>> {
    let rows = leaves
        .par_iter()
        .zip(order.names().par_iter())
        .map(|(x, name)| m.log(base, x.coords()).map_err(|e| e.at_leaf(name.clone())))
        .collect::<Result<Vec<_>>>()?;
    let dim = m.embedding_dim();
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
}

fn check_leaves<M: Manifold + ?Sized>(m: &M, leaves: &[ManifoldPoint], order: &LeafOrder) -> Result<()> {
    if leaves.len() != order.len() {
        return Err(Error::DimensionMismatch {
            expected: order.len(),
            found: leaves.len(),
        });
    }
    for (x, name) in leaves.iter().zip(order.names()) {
        m.owns(x).map_err(|e| e.at_leaf(name.clone()))?;
    }
    Ok(())
}

/// Root of the tree on a manifold: repeat `r ← exp_r(GLS(log_r x_i))` until
/// the update's g-norm is at most `epsilon`. Running out of iterations is
/// not an error; the result then has `converged == false`.
pub fn estimate_root<M: Manifold + ?Sized>(
    m: &M,
    tree: &PTree,
    leaves: &[ManifoldPoint],
    order: &LeafOrder,
    r0: &ManifoldPoint,
    opts: &RootOptions,
) -> Result<RootEstimate> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    check_leaves(m, leaves, order)?;
    m.owns(r0)?;
    let gls = GlsWeights::new(&evolutionary_covariance(tree, order)?, opts.ridge)?;
    let mut r = r0.coords().clone();
    let mut trace = Vec::new();
    for it in 0..=opts.max_iter {
        let x = logs(m, &r, leaves, order)?;
        let update = gls.root(&x)?;
        let norm = m.norm(&r, &update)?;
        trace.push(norm);
        log::debug!("root iteration {it}: update norm {norm:e}");
        if norm <= opts.epsilon || it == opts.max_iter {
            let converged = norm <= opts.epsilon;
            if !converged {
                log::warn!("root estimate did not converge in {} iterations (last update {norm:e})", opts.max_iter);
            }
            return Ok(RootEstimate {
                point: m.point(r)?,
                iterations: it,
                final_update_norm: norm,
                converged,
                trace,
            });
        }
        r = m.exp(&r, &update)?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Root initialisers.
#[derive(Clone, Debug, PartialEq)]
pub enum Initializer {
    FrechetMean,
    /// GLS root of the raw embedding coordinates, projected onto the manifold.
    EuclideanGls,
    Given(ManifoldPoint),
}

pub fn initial_root<M: Manifold + ?Sized>(
    m: &M,
    tree: &PTree,
    leaves: &[ManifoldPoint],
    order: &LeafOrder,
    init: &Initializer,
    ridge: f64,
) -> Result<ManifoldPoint> {
    check_leaves(m, leaves, order)?;
    match init {
        Initializer::FrechetMean => crate::geometry::frechet_mean(m, leaves, Default::default()),
        Initializer::EuclideanGls => {
            let dim = m.embedding_dim();
            let x = DMatrix::from_fn(leaves.len(), dim, |i, j| leaves[i].coords()[j]);
            let c = evolutionary_covariance(tree, order)?;
            let r = GlsWeights::new(&c, ridge)?.root(&x)?;
            m.point(m.project(&r)?)
        }
        Initializer::Given(p) => {
            m.owns(p)?;
            Ok(p.clone())
        }
    }
}

#[derive(Clone, Debug)]
pub struct PpcaResult {
    pub root: RootEstimate,
    pub k: usize,
    pub order: LeafOrder,
    pub basis: OrthonormalBasis,
    /// Descending eigenvalues of R̂.
    pub eigenvalues: DVector<f64>,
    /// d×d, columns in orthonormal-basis coordinates.
    pub eigenvectors: DMatrix<f64>,
    pub ties: Vec<usize>,
    /// N×d tangent coordinates in the orthonormal basis.
    pub tangent_coords: DMatrix<f64>,
    /// N×k coordinates in the top-k eigenbasis.
    pub scores: DMatrix<f64>,
    /// N×d projections of `tangent_coords` onto the top-k span.
    pub projected: DMatrix<f64>,
    /// N×D projected tangent vectors in embedding coordinates.
    pub projected_vectors: DMatrix<f64>,
    pub reduced_points: Vec<ManifoldPoint>,
}

impl PpcaResult {
    pub fn covariance_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Orthogonal projection of coordinate rows onto the top-k eigen-span.
    pub fn project(&self, coords: &DMatrix<f64>) -> DMatrix<f64> {
        let vk = self.eigenvectors.columns(0, self.k);
        coords * vk * vk.transpose()
    }

    /// Sum of squared g-norms of `tangent_coords − projected`.
    pub fn residual(&self) -> f64 {
        (&self.tangent_coords - &self.projected).norm_squared()
    }

    pub fn write_eigenvalues_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "eigenvalue", "cumulative_fraction"])?;
        for s in scree(self) {
            w.write_record([s.index.to_string(), s.eigenvalue.to_string(), s.cumulative.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["leaf".to_string()];
        header.extend((1..=self.k).map(|i| format!("pc{i}")));
        w.write_record(&header)?;
        for (i, name) in self.order.names().iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.scores.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_reduced_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.root.point.coords().len();
        let mut header = vec!["leaf".to_string()];
        header.extend((1..=dim).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for (name, p) in self.order.names().iter().zip(&self.reduced_points) {
            let mut row = vec![name.clone()];
            row.extend(p.coords().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k < 1 || k > d {
        return Err(Error::invalid(format!("k must lie in 1..={d}, got {k}")));
    }
    Ok(())
}

/// p-PCA of Euclidean rows: GLS root, C-weighted covariance of the centred
/// rows, projection onto the top-k eigenvectors.
pub fn euclidean_ppca(tree: &PTree, x: &ObservationMatrix, k: usize, ridge: f64) -> Result<PpcaResult> {
    let d = x.ncols();
    check_k(k, d)?;
    let c = evolutionary_covariance(tree, x.order())?;
    let gls = GlsWeights::new(&c, ridge)?;
    let r = gls.root(x.matrix())?;
    let mut xc = x.matrix().clone();
    for mut row in xc.row_iter_mut() {
        row -= r.transpose();
    }
    let eig = sorted_eigen(&gls.covariance(&xc)?);
    let vk = eig.vectors.columns(0, k).into_owned();
    let scores = &xc * &vk;
    let projected = &scores * vk.transpose();
    let e = Euclidean::new(d);
    let reduced_points = projected
        .row_iter()
        .map(|row| e.point(&r + row.transpose()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PpcaResult {
        root: RootEstimate::given(e.point(r)?),
        k,
        order: x.order().clone(),
        basis: e.basis(&DVector::zeros(d))?,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        ties: eig.ties,
        tangent_coords: xc,
        scores,
        projected_vectors: projected.clone(),
        projected,
        reduced_points,
    })
}

/// Tangent p-PCA at `root` using the manifold's own orthonormal basis.
pub fn tangent_ppca<M: Manifold + ?Sized>(
    m: &M,
    tree: &PTree,
    leaves: &[ManifoldPoint],
    order: &LeafOrder,
    root: &RootEstimate,
    k: usize,
    ridge: f64,
) -> Result<PpcaResult> {
    let basis = m.orthonormal_basis(&root.point)?;
    tangent_ppca_with_basis(m, tree, leaves, order, root, k, ridge, basis)
}

/// Tangent p-PCA with an explicit g-orthonormal basis of `T_rM`.
#[allow(clippy::too_many_arguments)]
pub fn tangent_ppca_with_basis<M: Manifold + ?Sized>(
    m: &M,
    tree: &PTree,
    leaves: &[ManifoldPoint],
    order: &LeafOrder,
    root: &RootEstimate,
    k: usize,
    ridge: f64,
    basis: OrthonormalBasis,
) -> Result<PpcaResult> {
    check_leaves(m, leaves, order)?;
    m.owns(&root.point)?;
    if basis.embedding_dim() != m.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.embedding_dim(),
            found: basis.embedding_dim(),
        });
    }
    let d = basis.dim();
    check_k(k, d)?;
    let r = root.point.coords();
    let x = logs(m, r, leaves, order)?;
    let x_ortho = basis.coordinates_rows(&x);
    let gls = GlsWeights::new(&evolutionary_covariance(tree, order)?, ridge)?;
    let eig = sorted_eigen(&gls.covariance(&x_ortho)?);
    let vk = eig.vectors.columns(0, k).into_owned();
    let scores = &x_ortho * &vk;
    let projected = &scores * vk.transpose();
    let projected_vectors = &projected * basis.frame().transpose();
    let reduced_points = (0..leaves.len())
        .into_par_iter()
        .map(|i| {
            let v = projected_vectors.row(i).transpose();
            m.exp(r, &v)
                .and_then(|q| m.point(q))
                .map_err(|e| e.at_leaf(order.names()[i].clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PpcaResult {
        root: root.clone(),
        k,
        order: order.clone(),
        basis,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        ties: eig.ties,
        tangent_coords: x_ortho,
        scores,
        projected,
        projected_vectors,
        reduced_points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreeEntry {
    /// 1-based component index.
    pub index: usize,
    pub eigenvalue: f64,
    pub cumulative: f64,
}

/// Eigenvalues with cumulative variance fractions. Negative roundoff
/// eigenvalues count as zero in the fractions.
pub fn scree(result: &PpcaResult) -> Vec<ScreeEntry> {
    let total: f64 = result.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut acc = 0.0;
    result
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v.max(0.0);
            ScreeEntry {
                index: i + 1,
                eigenvalue: v,
                cumulative: if total > 0.0 { (acc / total).min(1.0) } else { 0.0 },
            }
        })
        .collect()
}
