use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use tppca::geometry::{frechet_mean, FrechetOptions, Manifold};
use tppca::manifolds::{hamiltonian, kernel_cometric, Euclidean, LandmarkGeometry, LandmarkShape, Momentum, Sphere};
use tppca::pipeline::template_shape;
use tppca::Error;

fn unit(v: [f64; 3]) -> Option<DVector<f64>> {
    let v = DVector::from_column_slice(&v);
    let n = v.norm();
    (n > 1e-3).then(|| v / n)
}

/// Tangent vector at `p` along the tangential part of `dir`, with norm `len`.
fn tangent_at(p: &DVector<f64>, dir: [f64; 3], len: f64) -> Option<DVector<f64>> {
    let d = DVector::from_column_slice(&dir);
    let t = &d - p * p.dot(&d);
    let n = t.norm();
    (n > 1e-3).then(|| t * (len / n))
}

fn triple() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sphere_round_trip(p in triple(), dir in triple(), frac in 0.0f64..0.9) {
        let s = Sphere;
        let (Some(p), Some(v)) = (unit(p), unit(p).and_then(|p| tangent_at(&p, dir, frac * PI))) else {
            return Ok(());
        };
        let q = s.exp(&p, &v).unwrap();
        prop_assert!((q.norm() - 1.0).abs() < 1e-12);
        let back = s.log(&p, &q).unwrap();
        prop_assert!((&back - &v).norm() < 1e-8, "round trip error {}", (&back - &v).norm());
        prop_assert!((s.distance(&p, &q).unwrap() - frac * PI).abs() < 1e-8);
    }

    #[test]
    fn sphere_distance_is_a_metric(a in triple(), b in triple(), c in triple()) {
        let s = Sphere;
        let (Some(a), Some(b), Some(c)) = (unit(a), unit(b), unit(c)) else { return Ok(()) };
        if (&a + &b).norm() < 1e-3 || (&b + &c).norm() < 1e-3 || (&a + &c).norm() < 1e-3 {
            return Ok(());
        }
        let dab = s.distance(&a, &b).unwrap();
        let dba = s.distance(&b, &a).unwrap();
        prop_assert!((dab - dba).abs() < 1e-12);
        prop_assert!(s.distance(&a, &c).unwrap() <= dab + s.distance(&b, &c).unwrap() + 1e-12);
        prop_assert!((dab - a.dot(&b).clamp(-1.0, 1.0).acos()).abs() < 1e-7);
    }

    #[test]
    fn sphere_basis_is_orthonormal_and_tangent(p in triple()) {
        let s = Sphere;
        let Some(p) = unit(p) else { return Ok(()) };
        let b = s.basis(&p).unwrap();
        let f = b.frame();
        prop_assert_eq!(f.ncols(), 2);
        prop_assert!((f.transpose() * f - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        prop_assert!((f.transpose() * &p).amax() < 1e-12);
        let c = DVector::from_column_slice(&[0.3, -0.7]);
        prop_assert!((b.coordinates(&b.vector(&c)) - c).amax() < 1e-12);
    }

    #[test]
    fn euclidean_exp_log_are_translations(x in prop::collection::vec(-5.0f64..5.0, 4), y in prop::collection::vec(-5.0f64..5.0, 4)) {
        let e = Euclidean::new(4);
        let (x, y) = (DVector::from_vec(x), DVector::from_vec(y));
        prop_assert_eq!(e.log(&x, &y).unwrap(), &y - &x);
        prop_assert!((e.exp(&x, &(&y - &x)).unwrap() - y).amax() < 1e-14);
    }
}

#[test]
fn sphere_reference_distance() {
    let s = Sphere;
    let d = s.distance(&Sphere::north_pole(), &DVector::from_column_slice(&[1.0, 0.0, 0.0])).unwrap();
    assert!((d - PI / 2.0).abs() < 1e-12);
    assert!((d - 1.57).abs() < 0.01);
}

#[test]
fn sphere_cut_locus_is_an_error() {
    let s = Sphere;
    assert!(matches!(s.log(&Sphere::north_pole(), &Sphere::south_pole()), Err(Error::CutLocus(_))));
}

#[test]
fn sphere_rejects_off_manifold_points() {
    let s = Sphere;
    assert!(s.point(DVector::from_column_slice(&[1.0, 1.0, 0.0])).is_err());
    assert!(s.project(&DVector::zeros(3)).is_err());
    let p = s.project(&DVector::from_column_slice(&[3.0, 0.0, 4.0])).unwrap();
    assert!((p - DVector::from_column_slice(&[0.6, 0.0, 0.8])).norm() < 1e-15);
}

#[test]
fn sphere_frechet_mean_of_symmetric_points_is_the_pole() {
    let s = Sphere;
    let z = 0.8f64;
    let r = (1.0 - z * z).sqrt();
    let pts: Vec<_> = (0..4)
        .map(|i| {
            let a = i as f64 * PI / 2.0;
            s.point(DVector::from_column_slice(&[r * a.cos(), r * a.sin(), z])).unwrap()
        })
        .collect();
    let m = frechet_mean(&s, &pts, FrechetOptions::default()).unwrap();
    assert!((m.coords() - Sphere::north_pole()).norm() < 1e-8);
}

// ---------------------------------------------------------------------------
// LDDMM landmarks

/// Template shape with a deterministic jitter, kept well separated.
fn jittered(n: usize, seed: u64, amp: f64) -> DVector<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    DVector::from_iterator(2 * n, template_shape(n).into_iter().map(|c| c + amp * next()))
}

/// Tangent vector with orthonormal coordinates along `dir`, g-norm `len`.
fn lddmm_tangent(g: &LandmarkGeometry, q: &DVector<f64>, dir: &[f64], len: f64) -> DVector<f64> {
    let c = DVector::from_column_slice(dir);
    let c = c.normalize() * len;
    g.basis(q).unwrap().vector(&c)
}

fn direction(d: usize, seed: u64) -> Vec<f64> {
    jittered(d / 2, seed ^ 0xABCD, 1.0).iter().zip(template_shape(d / 2)).map(|(a, b)| a - b).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lddmm_energy_is_conserved(seed in any::<u64>(), sigma in 0.15f64..0.6, len in 0.05f64..0.5) {
        let g = LandmarkGeometry::new(14, sigma, 1.0).unwrap();
        let q = jittered(14, seed, 0.01);
        let v = lddmm_tangent(&g, &q, &direction(28, seed), len);
        let m = g.momentum(&q, &v).unwrap();
        let path = g.geodesic(&q, &m, 100).unwrap();
        prop_assert!(path.relative_drift() < 1e-6);
        // constant speed: ½‖q̇‖²_g = H at every node
        let h0 = path.energies[0];
        prop_assert!((h0 - 0.5 * len * len).abs() < 1e-6 * h0);
        for (x, p) in path.positions.iter().zip(&path.momenta).step_by(20) {
            let vel = g.velocity(x, &Momentum(p.clone())).unwrap();
            let speed2 = g.inner(x, &vel, &vel).unwrap();
            prop_assert!((speed2 - 2.0 * h0).abs() < 1e-6 * 2.0 * h0);
        }
    }

    #[test]
    fn lddmm_log_inverts_exp(seed in any::<u64>(), sigma in 0.2f64..0.5, len in 0.01f64..0.15) {
        let g = LandmarkGeometry::new(14, sigma, 1.0).unwrap().with_log_tolerance(1e-10, 50).unwrap();
        let q = jittered(14, seed, 0.01);
        let v = lddmm_tangent(&g, &q, &direction(28, seed), len);
        let q1 = g.exp(&q, &v).unwrap();
        let back = g.log(&q, &q1).unwrap();
        prop_assert!((&back - &v).amax() < 1e-4, "error {}", (&back - &v).amax());
    }

    #[test]
    fn lddmm_is_translation_and_rotation_equivariant(seed in any::<u64>(), tx in -1.0f64..1.0, ty in -1.0f64..1.0, theta in -PI..PI) {
        let g = LandmarkGeometry::new(14, 0.3, 1.0).unwrap();
        let q = jittered(14, seed, 0.01);
        let v = lddmm_tangent(&g, &q, &direction(28, seed), 0.3);
        // compared through the momentum flow: exp's K⁻¹ solve would amplify
        // input roundoff by the kernel's condition number
        let m = g.momentum(&q, &v).unwrap();
        let end = g.geodesic(&q, &m, 100).unwrap().endpoint().clone();
        let shift = DVector::from_fn(28, |r, _| if r % 2 == 0 { tx } else { ty });
        let shifted = g.geodesic(&(&q + &shift), &m, 100).unwrap().endpoint().clone();
        prop_assert!((shifted - (&end + &shift)).amax() < 1e-10);
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |x: &DVector<f64>| DVector::from_fn(28, |r, _| {
            let (a, b) = (x[r - r % 2], x[r - r % 2 + 1]);
            if r % 2 == 0 { c * a - s * b } else { s * a + c * b }
        });
        let rotated = g.geodesic(&rot(&q), &Momentum(rot(&m.0)), 100).unwrap().endpoint().clone();
        prop_assert!((rotated - rot(&end)).amax() < 1e-10);
    }

    #[test]
    fn lddmm_basis_is_g_orthonormal(seed in any::<u64>(), sigma in 0.1f64..0.6) {
        let g = LandmarkGeometry::new(14, sigma, 1.0).unwrap();
        let q = jittered(14, seed, 0.01);
        let l = g.basis(&q).unwrap().frame().clone();
        let k = g.cometric(&q).unwrap().matrix().clone();
        // Lᵀ K⁻¹ L = I
        let gram = l.transpose() * k.clone().cholesky().unwrap().solve(&l);
        prop_assert!((gram - DMatrix::<f64>::identity(28, 28)).amax() < 1e-8);
        prop_assert!((&l * l.transpose() - &k).amax() < 1e-12);
    }
}

#[test]
fn single_landmark_geodesics_are_straight_lines() {
    for (sigma, beta) in [(0.1, 1.0), (1.0, 2.5), (5.0, 0.3)] {
        let g = LandmarkGeometry::new(1, sigma, beta).unwrap();
        let q = DVector::from_column_slice(&[0.3, -0.2]);
        let v = DVector::from_column_slice(&[1.7, 0.4]);
        let q1 = g.exp(&q, &v).unwrap();
        assert!((&q1 - (&q + &v)).amax() < 1e-8);
        let back = g.log(&q, &q1).unwrap();
        assert!((back - v).amax() < 1e-8);
    }
}

#[test]
fn kernel_cometric_matches_velocity_and_hamiltonian() {
    let g = LandmarkGeometry::new(3, 0.4, 1.3).unwrap();
    let s = LandmarkShape::new(vec![[0.0, 0.0], [0.3, 0.1], [-0.2, 0.4]]).unwrap();
    let k = kernel_cometric(&s, &g).unwrap();
    let p = DVector::from_column_slice(&[0.2, -0.1, 0.5, 0.3, -0.4, 0.1]);
    let v = g.velocity(&s.to_flat(), &Momentum(p.clone())).unwrap();
    assert!((k.matrix() * &p - &v).amax() < 1e-15);
    let h = hamiltonian(&s, &Momentum(p.clone()), &g).unwrap();
    assert!((h - 0.5 * p.dot(&v)).abs() < 1e-15);
    let m = g.momentum(&s.to_flat(), &v).unwrap();
    assert!((m.0 - p).amax() < 1e-12);
}

#[test]
fn shooting_reaches_a_curved_target() {
    // Strongly curved: σ comparable to the landmark spacing and a long shot.
    let g = LandmarkGeometry::new(14, 0.1, 1.0).unwrap();
    let q = jittered(14, 3, 0.005);
    let v = lddmm_tangent(&g, &q, &direction(28, 3), 0.3);
    let q1 = g.exp(&q, &v).unwrap();
    let sol = g.shoot(&q, &q1, 1e-10, 50).unwrap();
    assert!(sol.residual < 1e-10);
    let d = g.norm(&q, &sol.velocity).unwrap();
    assert!(d <= 0.3 + 1e-6, "shot a longer geodesic ({d})");
}

#[test]
fn coincident_landmarks_are_reported() {
    let g = LandmarkGeometry::new(2, 0.5, 1.0).unwrap();
    let q = DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(g.exp(&q, &DVector::from_element(4, 0.1)), Err(Error::Numeric(_))));
}
