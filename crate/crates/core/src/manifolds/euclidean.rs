use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::geometry::{Manifold, ManifoldId, MetricTensor, OrthonormalBasis};

/// R^d with the standard inner product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Euclidean {
    dim: usize,
}

impl Euclidean {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Manifold for Euclidean {
    fn id(&self) -> ManifoldId {
        ManifoldId::Euclidean
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn intrinsic_dim(&self) -> usize {
        self.dim
    }

    fn injectivity_bound(&self) -> Option<f64> {
        Some(f64::INFINITY)
    }

    fn membership_error(&self, _coords: &DVector<f64>) -> f64 {
        0.0
    }

    fn tangent_error(&self, _base: &DVector<f64>, _v: &DVector<f64>) -> f64 {
        0.0
    }

    fn metric(&self, p: &DVector<f64>) -> Result<MetricTensor> {
        self.check_dim(p)?;
        Ok(MetricTensor::new_unchecked(DMatrix::identity(self.dim, self.dim)))
    }

    fn cometric(&self, p: &DVector<f64>) -> Result<MetricTensor> {
        self.metric(p)
    }

    fn inner(&self, p: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(p)?;
        self.check_dim(u)?;
        self.check_dim(v)?;
        Ok(u.dot(v))
    }

    fn exp(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(p)?;
        self.check_dim(v)?;
        Ok(p + v)
    }

    fn log(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(p)?;
        self.check_dim(q)?;
        Ok(q - p)
    }

    fn basis(&self, p: &DVector<f64>) -> Result<OrthonormalBasis> {
        self.check_dim(p)?;
        Ok(OrthonormalBasis::from_embedded_frame(DMatrix::identity(self.dim, self.dim)))
    }
}
