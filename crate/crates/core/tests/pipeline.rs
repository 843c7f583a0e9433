use std::f64::consts::PI;

use proptest::prelude::*;

use tppca::phylo::parse_newick;
use tppca::pipeline::{
    run_ppca, run_synthetic, run_tppca, template_shape, AnalysisConfig, InitChoice, ManifoldChoice, PointTable, SigmaChoice,
};
use tppca::shapes::{align_to, centroid_size, procrustes_align, sigma_rule, species_mean, GpaOptions, LandmarkDataset, LandmarkRecord};

fn similarity(c: &[f64], scale: f64, theta: f64, tx: f64, ty: f64) -> Vec<f64> {
    let (s, co) = theta.sin_cos();
    c.chunks_exact(2)
        .flat_map(|p| [scale * (co * p[0] - s * p[1]) + tx, scale * (s * p[0] + co * p[1]) + ty])
        .collect()
}

fn wobble(c: &[f64], seed: u64, amp: f64) -> Vec<f64> {
    c.iter()
        .enumerate()
        .map(|(i, v)| v + amp * ((i as f64 + 1.0) * (seed as f64 * 0.7 + 1.3)).sin())
        .collect()
}

fn record(species: &str, specimen: &str, coords: Vec<f64>) -> LandmarkRecord {
    LandmarkRecord {
        species: species.into(),
        specimen: specimen.into(),
        coords,
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gpa_objective_is_nonincreasing(seed in 0u64..1000, n in 3usize..12) {
        let base = template_shape(n);
        let recs: Vec<_> = (0..6)
            .map(|i| {
                let s = wobble(&base, seed + i, 0.05);
                record(&format!("s{i}"), "1", similarity(&s, 1.0 + i as f64 * 0.3, i as f64, i as f64 - 2.0, 0.5))
            })
            .collect();
        let ds = LandmarkDataset::new(recs).unwrap();
        let g = procrustes_align(&ds, &GpaOptions::default()).unwrap();
        prop_assert!(g.converged);
        for w in g.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        for r in g.dataset.records() {
            prop_assert!((centroid_size(&r.coords) - 1.0).abs() < 1e-12);
            let (mx, my) = r.coords.chunks_exact(2).fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
            prop_assert!(mx.abs() < 1e-12 && my.abs() < 1e-12);
        }
    }

    #[test]
    fn gpa_removes_similarity_transforms(seed in 0u64..1000, scale in 0.2f64..5.0, theta in -PI..PI, tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
        let base = template_shape(8);
        let shapes: Vec<_> = (0..4).map(|i| wobble(&base, seed + i, 0.04)).collect();
        let plain = LandmarkDataset::new(shapes.iter().enumerate().map(|(i, s)| record(&format!("s{i}"), "1", s.clone())).collect()).unwrap();
        let moved = LandmarkDataset::new(
            shapes.iter().enumerate().map(|(i, s)| record(&format!("s{i}"), "1", similarity(s, scale, theta, tx, ty))).collect(),
        ).unwrap();
        let a = procrustes_align(&plain, &GpaOptions::default()).unwrap().dataset;
        let b = procrustes_align(&moved, &GpaOptions::default()).unwrap().dataset;
        // Procrustes distances between aligned shapes do not depend on the pose
        for i in 0..4 {
            for j in 0..i {
                let da = sq(&a.records()[i].coords, &a.records()[j].coords);
                let db = sq(&b.records()[i].coords, &b.records()[j].coords);
                prop_assert!((da - db).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn align_to_finds_the_best_rotation(seed in 0u64..1000, theta in -PI..PI) {
        let target = template_shape(7);
        let shape = similarity(&wobble(&target, seed, 0.1), 1.0, theta, 0.3, -0.2);
        let aligned = align_to(&shape, &target, false).unwrap();
        let best = sq(&aligned, &target);
        // brute-force scan over rotations of the centred shape
        let centred = align_to(&shape, &shape, false).unwrap();
        for k in 0..720 {
            let t = k as f64 * PI / 360.0;
            prop_assert!(best <= sq(&similarity(&centred, 1.0, t, 0.0, 0.0), &target) + 1e-12);
        }
    }

    #[test]
    fn sigma_rule_matches_brute_force(seed in 0u64..1000, n in 2usize..10) {
        let shapes: Vec<Vec<f64>> = (0..3).map(|i| wobble(&template_shape(n), seed + i, 0.2)).collect();
        let ds = LandmarkDataset::new(shapes.iter().enumerate().map(|(i, s)| record(&format!("s{i}"), "1", s.clone())).collect()).unwrap();
        let mut total = 0.0;
        for s in &shapes {
            let mut dists = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        dists.push(((s[2 * i] - s[2 * j]).powi(2) + (s[2 * i + 1] - s[2 * j + 1]).powi(2)).sqrt());
                    }
                }
            }
            total += dists.iter().sum::<f64>() / dists.len() as f64;
        }
        let expected = 1.5 * total / 3.0;
        prop_assert!((sigma_rule(&ds).unwrap() - expected).abs() < 1e-12 * expected);
    }
}

#[test]
fn species_means_average_specimens() {
    let ds = LandmarkDataset::new(vec![
        record("a", "1", vec![0.0, 0.0, 1.0, 0.0]),
        record("a", "2", vec![0.0, 2.0, 1.0, 2.0]),
        record("b", "1", vec![5.0, 5.0, 6.0, 5.0]),
    ])
    .unwrap();
    let m = species_mean(&ds).unwrap();
    assert_eq!(m.len(), 2);
    let a = m.records().iter().find(|r| r.species == "a").unwrap();
    assert_eq!(a.coords, vec![0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn landmark_csv_round_trip() {
    let ds = LandmarkDataset::new(vec![
        record("Homo sapiens", "1", vec![0.1, 0.2, 0.3, 0.4]),
        record("Pan", "x", vec![-1.0, 2.5, 1e-17, 3.0]),
    ])
    .unwrap();
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let back = LandmarkDataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.records(), ds.records());
}

#[test]
fn point_table_round_trip() {
    let t = PointTable {
        names: vec!["A".into(), "B".into()],
        coords: vec![nalgebra::DVector::from_column_slice(&[0.0, 0.6, 0.8]), nalgebra::DVector::from_column_slice(&[1.0, 0.0, 0.0])],
    };
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let back = PointTable::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.names, t.names);
    assert_eq!(back.coords, t.coords);
}

#[test]
fn config_rejects_bad_values() {
    let mut cfg = AnalysisConfig::default();
    assert!(cfg.set("sigma", "-1").is_err() || cfg.validate().is_err());
    let mut cfg = AnalysisConfig::default();
    assert!(cfg.set("scheme", "euler").is_err());
    assert!(cfg.set("no_such_key", "1").is_err());
    assert!(AnalysisConfig::parse("epsilon 1e-5\n").is_err());
    let cfg = AnalysisConfig::parse("# comment\nepsilon = 1e-4\nk = 3\n\n").unwrap();
    assert_eq!(cfg.epsilon, 1e-4);
    assert_eq!(cfg.k, Some(3));
}

fn small_config(dir: &std::path::Path) -> AnalysisConfig {
    AnalysisConfig {
        sigma: SigmaChoice::Value(0.5),
        leaves: 6,
        landmarks: 5,
        edge_min: 1e-3,
        edge_max: 3e-3,
        step: 1e-4,
        seed: 7,
        out: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, da) = run_synthetic(&small_config(a.path()), None, a.path()).unwrap();
    let (tb, db) = run_synthetic(&small_config(b.path()), None, b.path()).unwrap();
    assert_eq!(ta.to_newick(), tb.to_newick());
    assert_eq!(da.records(), db.records());
    for f in ["landmarks.csv", "tree.nwk", "realization.csv", "sigma.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn small_landmark_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (tree, ds) = run_synthetic(&cfg, None, dir.path()).unwrap();
    let out = dir.path().join("tppca");
    let rep = run_tppca(&cfg, &ds, &tree, Some(&out)).unwrap();
    assert!(rep.result.root.converged);
    assert_eq!(rep.result.k, 6);
    assert_eq!(rep.scree.len(), 10);
    assert_eq!(rep.result.reduced_points.len(), 6);
    for f in ["scree.csv", "scores.csv", "reduced.csv", "root.csv", "root_trace.csv", "aligned.csv", "overlay.svg", "scree.svg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn euclidean_tppca_equals_ppca() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path());
    let (tree, ds) = run_synthetic(&base, None, dir.path()).unwrap();
    let cfg = AnalysisConfig {
        manifold: ManifoldChoice::Euclidean,
        initializer: InitChoice::EuclideanGls,
        k: Some(3),
        ..base
    };
    let t = run_tppca(&cfg, &ds, &tree, None).unwrap().result;
    let p = run_ppca(&cfg, &ds, &tree, None).unwrap();
    assert!((t.root.point.coords() - p.root.point.coords()).amax() < 1e-12);
    assert!((&t.eigenvalues - &p.eigenvalues).amax() < 1e-12 * p.eigenvalues.amax());
    for (a, b) in t.reduced_points.iter().zip(&p.reduced_points) {
        assert!((a.coords() - b.coords()).amax() < 1e-10);
    }
}

#[test]
fn missing_species_are_reported_by_stage() {
    let tree = parse_newick("((A:1,B:1):1,C:1);").unwrap();
    let ds = LandmarkDataset::new(vec![
        record("A", "1", template_shape(4)),
        record("B", "1", wobble(&template_shape(4), 1, 0.05)),
        record("Z", "1", wobble(&template_shape(4), 2, 0.05)),
    ])
    .unwrap();
    let err = run_tppca(&AnalysisConfig::default(), &ds, &tree, None).unwrap_err().to_string();
    assert!(err.starts_with("[reconcile]"), "{err}");
    assert!(err.contains('Z') && err.contains('C'), "{err}");
}
