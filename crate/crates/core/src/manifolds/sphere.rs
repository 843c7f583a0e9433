use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Manifold, ManifoldId, MetricTensor, OrthonormalBasis};

/// Angular distance from π within which a target counts as antipodal.
const ANTIPODAL_TOL: f64 = 1e-7;

/// The unit sphere S² ⊂ R³ with the round (induced) metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Sphere;

impl Sphere {
    pub fn new() -> Self {
        Sphere
    }

    pub fn north_pole() -> DVector<f64> {
        DVector::from_column_slice(&[0.0, 0.0, 1.0])
    }

    pub fn south_pole() -> DVector<f64> {
        DVector::from_column_slice(&[0.0, 0.0, -1.0])
    }

    fn tangent_frame(p: &DVector<f64>) -> DMatrix<f64> {
        let p3 = Vector3::new(p[0], p[1], p[2]);
        // seed with the coordinate axis least aligned with p
        let k = (0..3)
            .min_by(|&a, &b| p3[a].abs().total_cmp(&p3[b].abs()))
            .unwrap_or(0);
        let mut axis = Vector3::zeros();
        axis[k] = 1.0;
        let e1 = (axis - p3 * p3[k]).normalize();
        let e2 = p3.cross(&e1).normalize();
        DMatrix::from_column_slice(3, 2, &[e1.x, e1.y, e1.z, e2.x, e2.y, e2.z])
    }
}

impl Manifold for Sphere {
    fn id(&self) -> ManifoldId {
        ManifoldId::Sphere
    }

    fn embedding_dim(&self) -> usize {
        3
    }

    fn intrinsic_dim(&self) -> usize {
        2
    }

    fn injectivity_bound(&self) -> Option<f64> {
        Some(PI)
    }

    fn membership_error(&self, coords: &DVector<f64>) -> f64 {
        (coords.norm() - 1.0).abs()
    }

    fn tangent_error(&self, base: &DVector<f64>, v: &DVector<f64>) -> f64 {
        base.dot(v).abs()
    }

    /// The ambient identity; it restricts to the round metric on T_pS².
    fn metric(&self, p: &DVector<f64>) -> Result<MetricTensor> {
        self.check_dim(p)?;
        Ok(MetricTensor::new_unchecked(DMatrix::identity(3, 3)))
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

    /// `cos‖v‖ p + sin‖v‖ v/‖v‖`, renormalised to absorb roundoff.
    fn exp(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(p)?;
        self.check_dim(v)?;
        let theta = v.norm();
        if theta == 0.0 {
            return Ok(p.clone());
        }
        let q = p * theta.cos() + v * (theta.sin() / theta);
        Ok(q.normalize())
    }

    /// `θ (q − cos θ p)/‖q − cos θ p‖`. The angle is taken as
    /// `atan2(‖q − (p·q)p‖, p·q)`, which equals `arccos(clamp(p·q))` but keeps
    /// full precision near 0 and π.
    fn log(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(p)?;
        self.check_dim(q)?;
        let c = p.dot(q).clamp(-1.0, 1.0);
        let w = q - p * c;
        let s = w.norm();
        let theta = s.atan2(c);
        if PI - theta < ANTIPODAL_TOL {
            return Err(Error::CutLocus(format!(
                "target is antipodal to the base point (angle {theta})"
            )));
        }
        if s == 0.0 {
            return Ok(DVector::zeros(3));
        }
        Ok(w * (theta / s))
    }

    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let n = x.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot project the origin onto the sphere"));
        }
        Ok(x / n)
    }

    fn basis(&self, p: &DVector<f64>) -> Result<OrthonormalBasis> {
        self.check_dim(p)?;
        Ok(OrthonormalBasis::from_embedded_frame(Self::tangent_frame(p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{frechet_mean, FrechetOptions};
    use std::f64::consts::FRAC_PI_2;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    /// Integrates the embedded geodesic equation ẍ = −|ẋ|² x with RK4.
    fn geodesic_ode(p: &DVector<f64>, vel: &DVector<f64>, steps: usize) -> DVector<f64> {
        let h = 1.0 / steps as f64;
        let f = |x: &DVector<f64>, u: &DVector<f64>| (u.clone(), -x * u.norm_squared());
        let (mut x, mut u) = (p.clone(), vel.clone());
        for _ in 0..steps {
            let (k1x, k1u) = f(&x, &u);
            let (k2x, k2u) = f(&(&x + &k1x * (h / 2.0)), &(&u + &k1u * (h / 2.0)));
            let (k3x, k3u) = f(&(&x + &k2x * (h / 2.0)), &(&u + &k2u * (h / 2.0)));
            let (k4x, k4u) = f(&(&x + &k3x * h), &(&u + &k3u * h));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            u += (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0);
        }
        x
    }

    #[test]
    fn exp_matches_geodesic_ode() {
        let s = Sphere;
        let north = Sphere::north_pole();
        let q = s.exp(&north, &v(&[FRAC_PI_2, 0.0, 0.0])).unwrap();
        let oracle = geodesic_ode(&north, &v(&[FRAC_PI_2, 0.0, 0.0]), 10_000);
        assert!((&q - &oracle).amax() < 1e-10);
        assert!((q - v(&[1.0, 0.0, 0.0])).amax() < 1e-15);

        let q = s.exp(&north, &v(&[PI, 0.0, 0.0])).unwrap();
        let oracle = geodesic_ode(&north, &v(&[PI, 0.0, 0.0]), 10_000);
        assert!((&q - &oracle).amax() < 1e-10);
        assert!((q - v(&[0.0, 0.0, -1.0])).amax() < 1e-15);
    }

    #[test]
    fn exp_edge_cases() {
        let s = Sphere;
        let p = v(&[1.0, 0.0, 0.0]);
        assert_eq!(s.exp(&p, &DVector::zeros(3)).unwrap(), p);
        let q = s.exp(&p, &v(&[0.0, 2.0 * PI, 0.0])).unwrap();
        assert!((q - &p).amax() < 1e-9);
        let q = s.exp(&p, &v(&[0.0, 0.3, -1.7])).unwrap();
        assert!((q.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_examples() {
        let s = Sphere;
        let north = Sphere::north_pole();
        let l = s.log(&north, &v(&[1.0, 0.0, 0.0])).unwrap();
        assert!((l - v(&[FRAC_PI_2, 0.0, 0.0])).amax() < 1e-15);
        assert_eq!(s.log(&north, &north).unwrap(), DVector::zeros(3));
        assert!(matches!(s.log(&north, &Sphere::south_pole()), Err(Error::CutLocus(_))));
    }

    #[test]
    fn north_pole_to_equator() {
        let s = Sphere;
        let n = s.point(Sphere::north_pole()).unwrap();
        let e = s.point(v(&[0.0, 1.0, 0.0])).unwrap();
        assert!((s.geodesic_distance(&n, &e).unwrap() - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn frame_is_orthonormal_and_tangent() {
        let s = Sphere;
        for p in [v(&[0.0, 0.0, 1.0]), v(&[0.6, 0.0, 0.8]), v(&[1.0, 0.0, 0.0])] {
            let b = s.basis(&p).unwrap();
            let gram = b.frame().transpose() * b.frame();
            assert!((gram - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
            assert!((b.frame().tr_mul(&p)).amax() < 1e-15);
        }
    }

    #[test]
    fn rejects_off_sphere_points() {
        let s = Sphere;
        assert!(s.point(v(&[1.0, 1.0, 0.0])).is_err());
        let p = s.point(Sphere::north_pole()).unwrap();
        assert!(s.tangent(&p, v(&[0.0, 0.0, 1.0])).is_err());
    }

    /// Midpoint of two points found by dense search along the connecting
    /// geodesic, minimising the summed squared distances.
    #[test]
    fn frechet_mean_of_two_points_is_midpoint() {
        let s = Sphere;
        let a = s.point(v(&[0.0, 0.0, 1.0])).unwrap();
        let b = s.point(v(&[0.0, 0.8, 0.6])).unwrap();
        let dir = s.log(a.coords(), b.coords()).unwrap();
        let cost = |t: f64| {
            let m = s.exp(a.coords(), &(&dir * t)).unwrap();
            s.distance(&m, a.coords()).unwrap().powi(2) + s.distance(&m, b.coords()).unwrap().powi(2)
        };
        let best = (0..=100_000)
            .map(|i| i as f64 / 100_000.0)
            .min_by(|x, y| cost(*x).total_cmp(&cost(*y)))
            .unwrap();
        let oracle = s.exp(a.coords(), &(&dir * best)).unwrap();
        let mu = frechet_mean(&s, &[a, b], FrechetOptions::default()).unwrap();
        assert!((mu.coords() - oracle).amax() < 1e-5);
    }
}
