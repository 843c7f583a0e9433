use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tppca::estimators::{
    estimate_root, euclidean_ppca, gls_root_estimate, initial_root, phylo_covariance, scree, sorted_eigen,
    tangent_ppca, tangent_ppca_with_basis, GlsWeights, Initializer, ObservationMatrix, RootEstimate, RootOptions,
};
use tppca::geometry::{Manifold, ManifoldPoint};
use tppca::manifolds::{Euclidean, Sphere};
use tppca::phylo::{evolutionary_covariance, parse_newick, LeafOrder, PTree};
use tppca::sim::{simulate_tree, BmConfig};

fn random_setup(seed: u64, leaves: usize, d: usize) -> (PTree, LeafOrder, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = PTree::random(leaves, (0.05, 1.0), &mut rng).unwrap();
    let order = LeafOrder::of(&tree);
    let x = DMatrix::from_fn(leaves, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0);
    (tree, order, x)
}

/// Closed forms through an explicit inverse: (1ᵀC⁻¹1)⁻¹ 1ᵀC⁻¹X and
/// (X − 1r̂ᵀ)ᵀ C⁻¹ (X − 1r̂ᵀ) / (N − 1).
fn oracle(c: &DMatrix<f64>, x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = c.nrows();
    let ci = c.clone().try_inverse().unwrap();
    let one = DVector::from_element(n, 1.0);
    let w = &ci * &one;
    let root = x.transpose() * &w / one.dot(&w);
    let xc = x - &one * root.transpose();
    let r = xc.transpose() * &ci * &xc / (n as f64 - 1.0);
    (root, r)
}

fn points<M: Manifold>(m: &M, x: &DMatrix<f64>) -> Vec<ManifoldPoint> {
    x.row_iter().map(|r| m.point(r.transpose()).unwrap()).collect()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn euclidean_root_and_covariance_match_closed_forms(seed in any::<u64>(), leaves in 4usize..32, d in 1usize..6) {
        let (tree, order, x) = random_setup(seed, leaves, d);
        let c = evolutionary_covariance(&tree, &order).unwrap();
        let (root, r) = oracle(c.matrix(), &x);
        let obs = ObservationMatrix::new(x.clone(), order.clone()).unwrap();
        let gls = gls_root_estimate(&obs, &c, 0.0).unwrap();
        prop_assert!((&gls - &root).amax() < 1e-9 * root.amax().max(1.0));

        let e = Euclidean::new(d);
        let leaves_pts = points(&e, &x);
        let r0 = e.point(DVector::zeros(d)).unwrap();
        let est = estimate_root(&e, &tree, &leaves_pts, &order, &r0, &RootOptions::default()).unwrap();
        prop_assert!(est.converged);
        prop_assert!(est.iterations <= 1);
        prop_assert!((est.point.coords() - &root).amax() < 1e-9 * root.amax().max(1.0));

        let xc = DMatrix::from_fn(leaves, d, |i, j| x[(i, j)] - root[j]);
        let cov = phylo_covariance(&ObservationMatrix::new(xc, order.clone()).unwrap(), &c, 0.0).unwrap();
        prop_assert!(close(cov.matrix(), &r, 1e-9));
    }

    #[test]
    fn tangent_ppca_on_euclidean_reduces_to_ppca(seed in any::<u64>(), leaves in 4usize..20, d in 2usize..6, k in 1usize..6) {
        let k = k.min(d);
        let (tree, order, x) = random_setup(seed, leaves, d);
        let e = Euclidean::new(d);
        let pts = points(&e, &x);
        let r0 = initial_root(&e, &tree, &pts, &order, &Initializer::EuclideanGls, 0.0).unwrap();
        let root = estimate_root(&e, &tree, &pts, &order, &r0, &RootOptions::default()).unwrap();
        let t = tangent_ppca(&e, &tree, &pts, &order, &root, k, 0.0).unwrap();
        let p = euclidean_ppca(&tree, &ObservationMatrix::new(x.clone(), order.clone()).unwrap(), k, 0.0).unwrap();

        let c = evolutionary_covariance(&tree, &order).unwrap();
        let (_, r) = oracle(c.matrix(), &x);
        let mut oracle_eig: Vec<f64> = r.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle_eig.sort_by(|a, b| b.total_cmp(a));
        for (i, &l) in oracle_eig.iter().enumerate() {
            prop_assert!((t.eigenvalues[i] - l).abs() < 1e-9 * oracle_eig[0].max(1.0));
            prop_assert!((p.eigenvalues[i] - l).abs() < 1e-9 * oracle_eig[0].max(1.0));
        }
        prop_assert!(close(&t.scores, &p.scores, 1e-9) || !t.ties.is_empty());
        for (a, b) in t.reduced_points.iter().zip(&p.reduced_points) {
            prop_assert!((a.coords() - b.coords()).amax() < 1e-9 * b.coords().amax().max(1.0));
        }
    }

    #[test]
    fn k_equal_d_reproduces_the_leaves(seed in any::<u64>(), leaves in 4usize..16) {
        let (tree, order, x) = random_setup(seed, leaves, 3);
        let s = Sphere;
        let pts: Vec<_> = x.row_iter().map(|r| {
            let v = r.transpose();
            // keep the cloud in one hemisphere
            let v = DVector::from_column_slice(&[0.3 * v[0], 0.3 * v[1], 3.0 + v[2].abs()]);
            s.point(v.normalize()).unwrap()
        }).collect();
        let r0 = initial_root(&s, &tree, &pts, &order, &Initializer::FrechetMean, 0.0).unwrap();
        let root = estimate_root(&s, &tree, &pts, &order, &r0, &RootOptions::default()).unwrap();
        let res = tangent_ppca(&s, &tree, &pts, &order, &root, 2, 0.0).unwrap();
        for (a, b) in res.reduced_points.iter().zip(&pts) {
            prop_assert!((a.coords() - b.coords()).amax() < 1e-8);
        }
        prop_assert!(res.residual() < 1e-20 + 1e-12 * res.tangent_coords.norm_squared());
    }

    #[test]
    fn residual_is_nonincreasing_in_k(seed in any::<u64>(), leaves in 6usize..20) {
        let (tree, order, x) = random_setup(seed, leaves, 5);
        let obs = ObservationMatrix::new(x, order).unwrap();
        let residuals: Vec<f64> = (1..=5).map(|k| euclidean_ppca(&tree, &obs, k, 0.0).unwrap().residual()).collect();
        for w in residuals.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10 * w[0].max(1.0));
        }
        prop_assert!(residuals[4] < 1e-18 + 1e-12 * residuals[0]);
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), k in 1usize..4) {
        let (tree, order, x) = random_setup(seed, 10, 4);
        let res = euclidean_ppca(&tree, &ObservationMatrix::new(x, order).unwrap(), k, 0.0).unwrap();
        let once = res.project(&res.tangent_coords);
        prop_assert!(close(&res.project(&once), &once, 1e-12));
        prop_assert!(close(&once, &res.projected, 1e-12));
    }

    #[test]
    fn eigen_outputs_are_basis_invariant(seed in any::<u64>(), angle in -3.0f64..3.0) {
        let (tree, order, x) = random_setup(seed, 12, 3);
        let s = Sphere;
        let pts: Vec<_> = x.row_iter().map(|r| {
            let v = DVector::from_column_slice(&[0.3 * r[0], 0.3 * r[1], 3.0 + r[2].abs()]);
            s.point(v.normalize()).unwrap()
        }).collect();
        let r0 = initial_root(&s, &tree, &pts, &order, &Initializer::FrechetMean, 0.0).unwrap();
        let root = estimate_root(&s, &tree, &pts, &order, &r0, &RootOptions::default()).unwrap();
        let base = s.orthonormal_basis(&root.point).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let rotated = base.rotated(&q).unwrap();
        let a = tangent_ppca_with_basis(&s, &tree, &pts, &order, &root, 1, 0.0, base).unwrap();
        let b = tangent_ppca_with_basis(&s, &tree, &pts, &order, &root, 1, 0.0, rotated).unwrap();
        prop_assert!((&a.eigenvalues - &b.eigenvalues).amax() < 1e-8);
        prop_assert!(close(&a.projected_vectors, &b.projected_vectors, 1e-8));
        for (p, q) in a.reduced_points.iter().zip(&b.reduced_points) {
            prop_assert!((p.coords() - q.coords()).amax() < 1e-8);
        }
        // scores agree up to the sign of each component
        for j in 0..a.k {
            let sign = if a.scores.column(j).dot(&b.scores.column(j)) < 0.0 { -1.0 } else { 1.0 };
            prop_assert!((a.scores.column(j) - b.scores.column(j) * sign).amax() < 1e-8);
        }
    }

    #[test]
    fn scaling_the_tree_keeps_the_root_and_scales_the_covariance(seed in any::<u64>(), s in 0.1f64..10.0) {
        let (tree, order, x) = random_setup(seed, 9, 3);
        let scaled = tree.scaled(s).unwrap();
        let obs = ObservationMatrix::new(x, order).unwrap();
        let a = euclidean_ppca(&tree, &obs, 2, 0.0).unwrap();
        let b = euclidean_ppca(&scaled, &ObservationMatrix::new(obs.matrix().clone(), LeafOrder::of(&scaled)).unwrap(), 2, 0.0).unwrap();
        prop_assert!((a.root.point.coords() - b.root.point.coords()).amax() < 1e-9);
        prop_assert!((&a.eigenvalues / s - &b.eigenvalues).amax() < 1e-9 * a.eigenvalues.amax().max(1.0));
    }
}

#[test]
fn gls_weights_sum_to_one_and_favour_isolated_leaves() {
    let tree = parse_newick("((A:1,B:1):1,C:2);").unwrap();
    let order = LeafOrder::from_names(&tree, &["A", "B", "C"]).unwrap();
    let c = evolutionary_covariance(&tree, &order).unwrap();
    let gls = GlsWeights::new(&c, 0.0).unwrap();
    let w = gls.root(&DMatrix::identity(3, 3)).unwrap();
    assert!((w.sum() - 1.0).abs() < 1e-14);
    // C⁻¹1 = (1/3, 1/3, 1/2): A and B share history, so each counts less than C
    let expected = [2.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0];
    for (a, b) in w.iter().zip(expected) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn identical_observations_give_that_root() {
    let tree = parse_newick("(((A:1,B:2):0.5,C:1):1,D:3);").unwrap();
    let order = LeafOrder::of(&tree);
    let row = [0.4, -1.2, 7.0];
    let x = DMatrix::from_fn(4, 3, |_, j| row[j]);
    let c = evolutionary_covariance(&tree, &order).unwrap();
    let r = gls_root_estimate(&ObservationMatrix::new(x, order).unwrap(), &c, 0.0).unwrap();
    assert!((r - DVector::from_column_slice(&row)).amax() < 1e-14);
}

#[test]
fn singular_covariance_is_rejected_unless_ridged() {
    // two leaves with zero-length pendant edges under the same parent
    let tree = parse_newick("((A:0,B:0):1,C:1);").unwrap();
    let c = evolutionary_covariance(&tree, &LeafOrder::of(&tree)).unwrap();
    assert!(GlsWeights::new(&c, 0.0).is_err());
    assert!(GlsWeights::new(&c, 1e-6).is_ok());
}

#[test]
fn sorted_eigen_conventions() {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 2.0]);
    let e = sorted_eigen(&m);
    assert_eq!(e.values.as_slice(), &[5.0, 2.0, 2.0]);
    assert_eq!(e.ties, vec![1]);
    for j in 0..3 {
        let col = e.vectors.column(j);
        let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        assert!(big > 0.0);
    }
}

#[test]
fn sphere_root_from_simulated_leaves() {
    let tree = parse_newick("((A:0.1,B:0.1):0.1,(C:0.1,D:0.1):0.1);").unwrap();
    let s = Sphere;
    let truth = s.point(Sphere::north_pole()).unwrap();
    let order = LeafOrder::of(&tree);
    let real = simulate_tree(&s, &tree, &truth, &BmConfig::default()).unwrap();
    let leaves = real.leaves(&order);
    let south = s.point(Sphere::south_pole()).unwrap();
    let from_south = estimate_root(&s, &tree, &leaves, &order, &south, &RootOptions::default()).unwrap();
    let r0 = initial_root(&s, &tree, &leaves, &order, &Initializer::FrechetMean, 0.0).unwrap();
    let from_mean = estimate_root(&s, &tree, &leaves, &order, &r0, &RootOptions::default()).unwrap();
    assert!(from_south.converged && from_mean.converged);
    assert!(s.distance(from_south.point.coords(), from_mean.point.coords()).unwrap() < 1e-4);
    assert!(from_south.trace.len() == from_south.iterations + 1);
}

#[test]
fn given_root_is_taken_as_is() {
    let s = Sphere;
    let p = s.point(Sphere::north_pole()).unwrap();
    let r = RootEstimate::given(p.clone());
    assert!(r.converged && r.iterations == 0 && r.point == p);
}

#[test]
fn scree_fractions_end_at_one() {
    let (tree, order, x) = random_setup(3, 12, 4);
    let res = euclidean_ppca(&tree, &ObservationMatrix::new(x, order).unwrap(), 2, 0.0).unwrap();
    let s = scree(&res);
    assert_eq!(s.len(), 4);
    assert!((s[3].cumulative - 1.0).abs() < 1e-12);
    assert!(s.windows(2).all(|w| w[0].cumulative <= w[1].cumulative && w[0].eigenvalue >= w[1].eigenvalue));
}

#[test]
fn bad_k_is_rejected() {
    let (tree, order, x) = random_setup(4, 6, 3);
    let obs = ObservationMatrix::new(x, order).unwrap();
    assert!(euclidean_ppca(&tree, &obs, 0, 0.0).is_err());
    assert!(euclidean_ppca(&tree, &obs, 4, 0.0).is_err());
}
