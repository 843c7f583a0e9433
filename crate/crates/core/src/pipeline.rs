//! End-to-end analyses: configuration, the spherical root-estimation study,
//! synthetic landmark data and the landmark p-PCA pipeline.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::estimators::{
    estimate_root, euclidean_ppca, initial_root, scree, tangent_ppca, Initializer, ObservationMatrix, PpcaResult,
    RootEstimate, RootOptions, ScreeEntry,
};
use crate::geometry::{Manifold, ManifoldPoint};
use crate::manifolds::{Euclidean, LandmarkGeometry, Sphere};
use crate::phylo::{evolutionary_covariance, parse_newick, LeafOrder, PTree};
use crate::plot;
use crate::shapes::{align_to, procrustes_align, sigma_rule, species_mean, GpaOptions, LandmarkDataset, LandmarkRecord};
use crate::sim::{replicate_seed, simulate_tree, BmConfig, BmScheme, TreeRealization};

/// Four leaves on two cherries; the default tree of the simulation study.
pub const DEFAULT_STUDY_TREE: &str = "((A:0.1,B:0.1):0.1,(C:0.1,D:0.1):0.1);";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifoldChoice {
    Euclidean,
    Sphere,
    Landmarks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaChoice {
    /// 1.5 × mean pairwise landmark distance of the aligned species means.
    Rule,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitChoice {
    FrechetMean,
    EuclideanGls,
    SouthPole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub manifold: ManifoldChoice,
    pub sigma: SigmaChoice,
    pub beta: f64,
    pub lddmm_steps: usize,
    pub log_tol: f64,
    pub log_max_iter: usize,
    pub scheme: BmScheme,
    pub step: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub initializer: InitChoice,
    /// Reduced dimension; `None` means `min(6, d)`.
    pub k: Option<usize>,
    pub ridge: f64,
    pub align: bool,
    pub keep_scale: bool,
    pub out: PathBuf,
    pub replicates: usize,
    pub bins: usize,
    pub leaves: usize,
    pub landmarks: usize,
    pub edge_min: f64,
    pub edge_max: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            manifold: ManifoldChoice::Landmarks,
            sigma: SigmaChoice::Rule,
            beta: 1.0,
            lddmm_steps: LandmarkGeometry::DEFAULT_STEPS,
            log_tol: 1e-8,
            log_max_iter: 50,
            scheme: BmScheme::GaussianIncrement,
            step: 1e-3,
            seed: 0,
            epsilon: 1e-5,
            max_iter: 100,
            initializer: InitChoice::FrechetMean,
            k: None,
            ridge: 0.0,
            align: true,
            keep_scale: false,
            out: PathBuf::from("out"),
            replicates: 200,
            bins: 20,
            leaves: 16,
            landmarks: 14,
            edge_min: 2e-4,
            edge_max: 8e-4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl AnalysisConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifold" => {
                self.manifold = match value {
                    "euclidean" => ManifoldChoice::Euclidean,
                    "sphere" => ManifoldChoice::Sphere,
                    "landmarks" | "lddmm" => ManifoldChoice::Landmarks,
                    _ => return Err(Error::Config(format!("unknown manifold {value:?}"))),
                }
            }
            "sigma" => {
                self.sigma = if value == "rule" {
                    SigmaChoice::Rule
                } else {
                    SigmaChoice::Value(parse_num(key, value)?)
                }
            }
            "beta" => self.beta = parse_num(key, value)?,
            "lddmm_steps" => self.lddmm_steps = parse_num(key, value)?,
            "log_tol" => self.log_tol = parse_num(key, value)?,
            "log_max_iter" => self.log_max_iter = parse_num(key, value)?,
            "scheme" => self.scheme = value.parse()?,
            "step" => self.step = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "max_iter" => self.max_iter = parse_num(key, value)?,
            "initializer" => {
                self.initializer = match value {
                    "frechet" | "frechet-mean" => InitChoice::FrechetMean,
                    "euclidean" | "euclidean-gls" => InitChoice::EuclideanGls,
                    "south-pole" => InitChoice::SouthPole,
                    _ => return Err(Error::Config(format!("unknown initializer {value:?}"))),
                }
            }
            "k" => self.k = if value == "auto" { None } else { Some(parse_num(key, value)?) },
            "ridge" => self.ridge = parse_num(key, value)?,
            "align" => self.align = parse_bool(key, value)?,
            "keep_scale" => self.keep_scale = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "replicates" => self.replicates = parse_num(key, value)?,
            "bins" => self.bins = parse_num(key, value)?,
            "leaves" => self.leaves = parse_num(key, value)?,
            "landmarks" => self.landmarks = parse_num(key, value)?,
            "edge_min" => self.edge_min = parse_num(key, value)?,
            "edge_max" => self.edge_max = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if let SigmaChoice::Value(s) = self.sigma {
            positive("sigma", s)?;
        }
        positive("beta", self.beta)?;
        positive("log_tol", self.log_tol)?;
        positive("step", self.step)?;
        positive("epsilon", self.epsilon)?;
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if !(self.edge_min >= 0.0 && self.edge_max >= self.edge_min && self.edge_max.is_finite()) {
            return Err(Error::Config("edge_min/edge_max must satisfy 0 ≤ edge_min ≤ edge_max".into()));
        }
        for (name, v) in [
            ("lddmm_steps", self.lddmm_steps),
            ("log_max_iter", self.log_max_iter),
            ("replicates", self.replicates),
            ("bins", self.bins),
            ("landmarks", self.landmarks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.leaves < 2 {
            return Err(Error::Config("leaves must be at least 2".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bm(&self) -> Result<BmConfig> {
        BmConfig::new(self.step, self.scheme, self.seed)
    }

    pub fn root_options(&self) -> RootOptions {
        RootOptions {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            ridge: self.ridge,
        }
    }

    pub fn landmark_geometry(&self, n_landmarks: usize, sigma: f64) -> Result<LandmarkGeometry> {
        LandmarkGeometry::new(n_landmarks, sigma, self.beta)?
            .with_steps(self.lddmm_steps)?
            .with_log_tolerance(self.log_tol, self.log_max_iter)
    }

    fn resolve_k(&self, d: usize) -> Result<usize> {
        match self.k {
            Some(k) if k > d => Err(Error::Config(format!("k = {k} exceeds the dimension {d}"))),
            Some(k) => Ok(k),
            None => Ok(d.min(6)),
        }
    }
}

pub fn read_tree(path: &Path) -> Result<PTree> {
    parse_newick(&fs::read_to_string(path)?)
}

fn write_output(dir: &Path, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
    f(&mut file)?;
    file.flush()?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_output(dir, name, |w| Ok(w.write_all(text.as_bytes())?))
}

/// Named points, one per row: `leaf,c1,…,cD`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTable {
    pub names: Vec<String>,
    pub coords: Vec<DVector<f64>>,
}

impl PointTable {
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("leaf") || header.len() < 2 {
            return Err(Error::invalid("point CSV header must be leaf,c1,…,cD"));
        }
        let (mut names, mut coords) = (Vec::new(), Vec::new());
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let v = row
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::invalid(format!("data row {}: cannot parse {s:?}", line + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            names.push(row[0].to_string());
            coords.push(DVector::from_vec(v));
        }
        Ok(Self { names, coords })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.coords.first().map_or(0, |c| c.len());
        let mut header = vec!["leaf".to_string()];
        header.extend((1..=dim).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for (n, c) in self.names.iter().zip(&self.coords) {
            let mut row = vec![n.clone()];
            row.extend(c.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Points in leaf order of `tree`.
    pub fn reconcile<M: Manifold + ?Sized>(&self, m: &M, tree: &PTree) -> Result<(LeafOrder, Vec<ManifoldPoint>)> {
        // fails with a reconciliation error unless names match the leaves
        LeafOrder::from_names(tree, &self.names)?;
        let order = LeafOrder::of(tree);
        let points = order
            .names()
            .iter()
            .map(|n| {
                let i = self.names.iter().position(|x| x == n).expect("checked by from_names");
                m.point(self.coords[i].clone()).map_err(|e| e.at_leaf(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((order, points))
    }
}

// ---------------------------------------------------------------------------
// Spherical root-estimation study

#[derive(Clone, Debug, PartialEq)]
pub struct RootRun {
    pub error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<String>,
}

impl RootRun {
    fn from_result(r: Result<RootEstimate>, truth: &ManifoldPoint, m: &Sphere) -> Self {
        match r.and_then(|est| Ok((m.geodesic_distance(&est.point, truth)?, est))) {
            Ok((error, est)) => Self {
                error,
                iterations: est.iterations,
                converged: est.converged,
                failure: None,
            },
            Err(e) => Self {
                error: f64::NAN,
                iterations: 0,
                converged: false,
                failure: Some(e.to_string()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub replicate: usize,
    pub seed: u64,
    pub frechet: RootRun,
    pub south_pole: RootRun,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub skewness: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                median: f64::NAN,
                p95: f64::NAN,
                max: f64::NAN,
                skewness: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        Self {
            n,
            mean,
            median: quantile(&v, 0.5),
            p95: quantile(&v, 0.95),
            max: v[n - 1],
            skewness: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub frechet: Summary,
    pub south_pole: Summary,
    pub frechet_nonconverged: usize,
    pub south_pole_nonconverged: usize,
    pub frechet_median_iterations: f64,
    pub south_pole_median_iterations: f64,
}

fn median_usize(v: impl Iterator<Item = usize>) -> f64 {
    let mut v: Vec<f64> = v.map(|x| x as f64).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Simulates `cfg.replicates` trees of spherical Brownian motion from the
/// north pole and estimates the root from the leaves, started once at the
/// Fréchet mean of the leaves and once at the south pole.
pub fn run_simulation_study(cfg: &AnalysisConfig, tree: &PTree, out: Option<&Path>) -> Result<StudyReport> {
    cfg.validate()?;
    let s = Sphere;
    let truth = s.point(Sphere::north_pole())?;
    let south = s.point(Sphere::south_pole())?;
    let order = LeafOrder::of(tree);
    let opts = cfg.root_options();
    let base = cfg.bm()?;
    let rows = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| {
            let seed = replicate_seed(cfg.seed, i as u64);
            let real = simulate_tree(&s, tree, &truth, &BmConfig { seed, ..base })?;
            let leaves = real.leaves(&order);
            let frechet = initial_root(&s, tree, &leaves, &order, &Initializer::FrechetMean, cfg.ridge)
                .and_then(|r0| estimate_root(&s, tree, &leaves, &order, &r0, &opts));
            let antipodal = estimate_root(&s, tree, &leaves, &order, &south, &opts);
            Ok(StudyRow {
                replicate: i,
                seed,
                frechet: RootRun::from_result(frechet, &truth, &s),
                south_pole: RootRun::from_result(antipodal, &truth, &s),
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage("simulate")?;

    let errs = |f: fn(&StudyRow) -> &RootRun| rows.iter().map(|r| f(r).error).collect::<Vec<_>>();
    let fails = |f: fn(&StudyRow) -> &RootRun| rows.iter().filter(|r| !f(r).converged).count();
    let iters = |f: fn(&StudyRow) -> &RootRun| {
        median_usize(rows.iter().filter(|r| f(r).converged).map(|r| f(r).iterations))
    };
    let report = StudyReport {
        frechet: Summary::of(&errs(|r| &r.frechet)),
        south_pole: Summary::of(&errs(|r| &r.south_pole)),
        frechet_nonconverged: fails(|r| &r.frechet),
        south_pole_nonconverged: fails(|r| &r.south_pole),
        frechet_median_iterations: iters(|r| &r.frechet),
        south_pole_median_iterations: iters(|r| &r.south_pole),
        rows,
    };
    if let Some(dir) = out {
        write_study(dir, &report, cfg).stage("write")?;
    }
    Ok(report)
}

fn write_study(dir: &Path, report: &StudyReport, cfg: &AnalysisConfig) -> Result<()> {
    write_output(dir, "study.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "replicate",
            "seed",
            "frechet_error",
            "frechet_iterations",
            "frechet_converged",
            "south_pole_error",
            "south_pole_iterations",
            "south_pole_converged",
        ])?;
        for r in &report.rows {
            w.write_record([
                r.replicate.to_string(),
                r.seed.to_string(),
                r.frechet.error.to_string(),
                r.frechet.iterations.to_string(),
                r.frechet.converged.to_string(),
                r.south_pole.error.to_string(),
                r.south_pole.iterations.to_string(),
                r.south_pole.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    write_output(dir, "summary.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "initializer",
            "n",
            "mean_error",
            "median_error",
            "p95_error",
            "max_error",
            "skewness",
            "nonconverged",
            "median_iterations",
        ])?;
        for (name, s, nc, it) in [
            ("frechet", &report.frechet, report.frechet_nonconverged, report.frechet_median_iterations),
            (
                "south-pole",
                &report.south_pole,
                report.south_pole_nonconverged,
                report.south_pole_median_iterations,
            ),
        ] {
            w.write_record([
                name.to_string(),
                s.n.to_string(),
                s.mean.to_string(),
                s.median.to_string(),
                s.p95.to_string(),
                s.max.to_string(),
                s.skewness.to_string(),
                nc.to_string(),
                it.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let errors: Vec<f64> = report.rows.iter().map(|r| r.frechet.error).filter(|e| e.is_finite()).collect();
    write_text(
        dir,
        "errors.svg",
        &plot::histogram(&errors, cfg.bins, "Root estimate error (Fréchet-mean start)", "geodesic distance to true root"),
    )?;
    for (name, f) in [
        ("iterations_frechet.svg", (|r: &StudyRow| r.frechet.clone()) as fn(&StudyRow) -> RootRun),
        ("iterations_south_pole.svg", |r: &StudyRow| r.south_pole.clone()),
    ] {
        let it: Vec<f64> = report.rows.iter().map(f).filter(|r| r.converged).map(|r| r.iterations as f64).collect();
        write_text(dir, name, &plot::histogram(&it, cfg.bins, "Iterations to convergence", "iterations"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic landmark data

/// Jaw-like open curve of `n` landmarks, centred with unit centroid size.
pub fn template_shape(n: usize) -> Vec<f64> {
    let mut c: Vec<f64> = (0..n)
        .flat_map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let x = 2.0 * t - 1.0;
            let y = 0.35 * (std::f64::consts::PI * t).sin() + 0.08 * (3.0 * std::f64::consts::PI * t).sin()
                - 0.25 * t * t;
            [x, y]
        })
        .collect();
    if n < 2 {
        return vec![0.0; 2 * n];
    }
    let aligned = align_to(&c, &c, false).expect("same length");
    let size = crate::shapes::centroid_size(&aligned);
    c = aligned.iter().map(|v| v / size).collect();
    c
}

/// Brownian motion of landmark configurations down `tree` from `root`. The
/// leaves become one specimen per species, named after the tree's leaves.
pub fn synthetic_landmarks(
    geometry: &LandmarkGeometry,
    tree: &PTree,
    root: &[f64],
    bm: &BmConfig,
) -> Result<(LandmarkDataset, TreeRealization)> {
    let r = geometry.point(DVector::from_column_slice(root))?;
    let real = simulate_tree(geometry, tree, &r, bm)?;
    let order = LeafOrder::of(tree);
    let records = order
        .ids()
        .iter()
        .zip(order.names())
        .map(|(&id, name)| LandmarkRecord {
            species: name.clone(),
            specimen: "1".into(),
            coords: real.value(id).coords().as_slice().to_vec(),
        })
        .collect();
    Ok((LandmarkDataset::new(records)?, real))
}

// ---------------------------------------------------------------------------
// Landmark analyses

/// Aligned, averaged and reconciled landmark data.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub aligned: LandmarkDataset,
    pub means: LandmarkDataset,
    pub order: LeafOrder,
    pub rows: Vec<LandmarkRecord>,
    pub procrustes_objective: Vec<f64>,
}

impl Prepared {
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.rows[0].coords.len();
        DMatrix::from_fn(self.rows.len(), d, |i, j| self.rows[i].coords[j])
    }

    pub fn sigma(&self, cfg: &AnalysisConfig) -> Result<f64> {
        match cfg.sigma {
            SigmaChoice::Value(s) => Ok(s),
            SigmaChoice::Rule => sigma_rule(&self.means),
        }
    }
}

pub fn prepare(cfg: &AnalysisConfig, data: &LandmarkDataset, tree: &PTree) -> Result<Prepared> {
    let (aligned, objective) = if cfg.align {
        let g = procrustes_align(
            data,
            &GpaOptions {
                keep_scale: cfg.keep_scale,
                ..Default::default()
            },
        )
        .stage("align")?;
        (g.dataset, g.objective)
    } else {
        (data.clone(), Vec::new())
    };
    let means = species_mean(&aligned).stage("species-mean")?;
    let (order, rows) = means.reconcile(tree).stage("reconcile")?;
    Ok(Prepared {
        aligned,
        means,
        order,
        rows,
        procrustes_objective: objective,
    })
}

#[derive(Clone, Debug)]
pub struct TppcaReport {
    pub prepared: Prepared,
    pub sigma: Option<f64>,
    pub result: PpcaResult,
    pub scree: Vec<ScreeEntry>,
}

fn to_points<M: Manifold + ?Sized>(m: &M, prepared: &Prepared) -> Result<Vec<ManifoldPoint>> {
    prepared
        .rows
        .iter()
        .map(|r| m.point(r.to_vector()).map_err(|e| e.at_leaf(r.species.clone())))
        .collect()
}

fn initializer<M: Manifold + ?Sized>(m: &M, cfg: &AnalysisConfig) -> Result<Initializer> {
    Ok(match cfg.initializer {
        InitChoice::FrechetMean => Initializer::FrechetMean,
        InitChoice::EuclideanGls => Initializer::EuclideanGls,
        InitChoice::SouthPole => {
            if m.embedding_dim() != 3 || m.id() != crate::geometry::ManifoldId::Sphere {
                return Err(Error::Config("the south-pole initializer applies only to the sphere".into()));
            }
            Initializer::Given(m.point(Sphere::south_pole())?)
        }
    })
}

fn root_and_ppca<M: Manifold + ?Sized>(
    m: &M,
    cfg: &AnalysisConfig,
    tree: &PTree,
    leaves: &[ManifoldPoint],
    order: &LeafOrder,
    k: Option<usize>,
) -> Result<(RootEstimate, Option<PpcaResult>)> {
    let init = initializer(m, cfg)?;
    let r0 = initial_root(m, tree, leaves, order, &init, cfg.ridge).stage("initialize")?;
    let root = estimate_root(m, tree, leaves, order, &r0, &cfg.root_options()).stage("estimate-root")?;
    log::info!(
        "root estimate: {} iterations, final update {:e}, converged {}",
        root.iterations,
        root.final_update_norm,
        root.converged
    );
    let ppca = match k {
        Some(k) => Some(tangent_ppca(m, tree, leaves, order, &root, k, cfg.ridge).stage("tangent-ppca")?),
        None => None,
    };
    Ok((root, ppca))
}

fn write_root(dir: &Path, root: &RootEstimate) -> Result<()> {
    write_output(dir, "root.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        let dim = root.point.coords().len();
        let mut header = vec!["iterations".to_string(), "final_update_norm".into(), "converged".into()];
        header.extend((1..=dim).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        let mut row = vec![
            root.iterations.to_string(),
            root.final_update_norm.to_string(),
            root.converged.to_string(),
        ];
        row.extend(root.point.coords().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    })?;
    write_output(dir, "root_trace.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["iteration", "update_norm"])?;
        for (i, v) in root.trace.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn write_ppca(dir: &Path, result: &PpcaResult, originals: &[Vec<f64>], planar: bool) -> Result<()> {
    write_output(dir, "scree.csv", |w| result.write_eigenvalues_csv(w))?;
    write_output(dir, "scores.csv", |w| result.write_scores_csv(w))?;
    write_output(dir, "reduced.csv", |w| result.write_reduced_csv(w))?;
    let s = scree(result);
    let eig: Vec<f64> = s.iter().map(|e| e.eigenvalue).collect();
    let cum: Vec<f64> = s.iter().map(|e| e.cumulative).collect();
    write_text(dir, "scree.svg", &plot::scree(&eig, &cum, "Scree"))?;
    if planar {
        let reduced: Vec<Vec<f64>> = result.reduced_points.iter().map(|p| p.coords().as_slice().to_vec()).collect();
        write_text(
            dir,
            "overlay.svg",
            &plot::shape_overlay(originals, &reduced, result.root.point.coords().as_slice(), "Original, reduced and root shapes"),
        )?;
    }
    Ok(())
}

fn write_prepared(dir: &Path, prepared: &Prepared, tree: &PTree) -> Result<()> {
    write_output(dir, "aligned.csv", |w| prepared.aligned.write_csv(w))?;
    write_output(dir, "species_means.csv", |w| prepared.means.write_csv(w))?;
    let c = evolutionary_covariance(tree, &prepared.order)?;
    write_output(dir, "evolutionary_covariance.csv", |w| c.write_csv(w))
}

/// Landmark pipeline: align, average per species, estimate the root on the
/// configured geometry and run tangent p-PCA.
pub fn run_tppca(cfg: &AnalysisConfig, data: &LandmarkDataset, tree: &PTree, out: Option<&Path>) -> Result<TppcaReport> {
    cfg.validate()?;
    let prepared = prepare(cfg, data, tree)?;
    let d = 2 * data.n_landmarks();
    let k = cfg.resolve_k(d)?;
    let (sigma, result) = match cfg.manifold {
        ManifoldChoice::Landmarks => {
            let sigma = prepared.sigma(cfg).stage("geometry")?;
            let g = cfg.landmark_geometry(data.n_landmarks(), sigma).stage("geometry")?;
            let leaves = to_points(&g, &prepared).stage("geometry")?;
            let (_, res) = root_and_ppca(&g, cfg, tree, &leaves, &prepared.order, Some(k))?;
            (Some(sigma), res.expect("k given"))
        }
        ManifoldChoice::Euclidean => {
            let e = Euclidean::new(d);
            let leaves = to_points(&e, &prepared)?;
            let (_, res) = root_and_ppca(&e, cfg, tree, &leaves, &prepared.order, Some(k))?;
            (None, res.expect("k given"))
        }
        ManifoldChoice::Sphere => {
            return Err(Error::Config("tppca on landmark data needs manifold = landmarks or euclidean".into()))
        }
    };
    let scree = scree(&result);
    if let Some(dir) = out {
        let originals: Vec<Vec<f64>> = prepared.rows.iter().map(|r| r.coords.clone()).collect();
        write_prepared(dir, &prepared, tree)
            .and_then(|_| write_root(dir, &result.root))
            .and_then(|_| write_ppca(dir, &result, &originals, true))
            .and_then(|_| {
                if let Some(s) = sigma {
                    write_text(dir, "sigma.txt", &format!("{s}\n"))?;
                }
                Ok(())
            })
            .stage("write")?;
    }
    Ok(TppcaReport {
        prepared,
        sigma,
        result,
        scree,
    })
}

/// Euclidean p-PCA of the aligned species means.
pub fn run_ppca(cfg: &AnalysisConfig, data: &LandmarkDataset, tree: &PTree, out: Option<&Path>) -> Result<PpcaResult> {
    cfg.validate()?;
    let prepared = prepare(cfg, data, tree)?;
    let k = cfg.resolve_k(2 * data.n_landmarks())?;
    let x = ObservationMatrix::new(prepared.matrix(), prepared.order.clone())?;
    let result = euclidean_ppca(tree, &x, k, cfg.ridge).stage("ppca")?;
    if let Some(dir) = out {
        let originals: Vec<Vec<f64>> = prepared.rows.iter().map(|r| r.coords.clone()).collect();
        write_prepared(dir, &prepared, tree)
            .and_then(|_| write_root(dir, &result.root))
            .and_then(|_| write_ppca(dir, &result, &originals, true))
            .stage("write")?;
    }
    Ok(result)
}

/// Input to root estimation: landmark specimens or named points.
#[derive(Clone, Debug)]
pub enum LeafData {
    Landmarks(LandmarkDataset),
    Points(PointTable),
}

impl LeafData {
    /// Chooses the format from the header (`species,specimen,…` or `leaf,…`).
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or("");
        if first.trim_start().starts_with("species") {
            Ok(LeafData::Landmarks(LandmarkDataset::read_csv(text.as_bytes())?))
        } else {
            Ok(LeafData::Points(PointTable::read_csv(text.as_bytes())?))
        }
    }
}

/// Root estimation only.
pub fn run_estimate_root(cfg: &AnalysisConfig, data: &LeafData, tree: &PTree, out: Option<&Path>) -> Result<RootEstimate> {
    cfg.validate()?;
    let root = match (data, cfg.manifold) {
        (LeafData::Landmarks(ds), ManifoldChoice::Landmarks) => {
            let prepared = prepare(cfg, ds, tree)?;
            let sigma = prepared.sigma(cfg).stage("geometry")?;
            let g = cfg.landmark_geometry(ds.n_landmarks(), sigma).stage("geometry")?;
            let leaves = to_points(&g, &prepared).stage("geometry")?;
            root_and_ppca(&g, cfg, tree, &leaves, &prepared.order, None)?.0
        }
        (LeafData::Landmarks(ds), ManifoldChoice::Euclidean) => {
            let prepared = prepare(cfg, ds, tree)?;
            let e = Euclidean::new(2 * ds.n_landmarks());
            let leaves = to_points(&e, &prepared)?;
            root_and_ppca(&e, cfg, tree, &leaves, &prepared.order, None)?.0
        }
        (LeafData::Points(p), ManifoldChoice::Sphere) => {
            let (order, leaves) = p.reconcile(&Sphere, tree).stage("reconcile")?;
            root_and_ppca(&Sphere, cfg, tree, &leaves, &order, None)?.0
        }
        (LeafData::Points(p), ManifoldChoice::Euclidean) => {
            let dim = p.coords.first().map_or(0, |c| c.len());
            let e = Euclidean::new(dim);
            let (order, leaves) = p.reconcile(&e, tree).stage("reconcile")?;
            root_and_ppca(&e, cfg, tree, &leaves, &order, None)?.0
        }
        (LeafData::Points(_), ManifoldChoice::Landmarks) => {
            return Err(Error::Config("landmark geometry needs species,specimen,x1,y1,… input".into()))
        }
        (LeafData::Landmarks(_), ManifoldChoice::Sphere) => {
            return Err(Error::Config("sphere geometry needs leaf,c1,c2,c3 input".into()))
        }
    };
    if let Some(dir) = out {
        write_root(dir, &root).stage("write")?;
    }
    Ok(root)
}

/// Writes a synthetic landmark dataset (and its tree) for `cfg`: a random
/// tree with `cfg.leaves` leaves unless `tree` is given, rooted at the
/// template shape.
pub fn run_synthetic(cfg: &AnalysisConfig, tree: Option<PTree>, out: &Path) -> Result<(PTree, LandmarkDataset)> {
    cfg.validate()?;
    use rand::SeedableRng;
    let tree = match tree {
        Some(t) => t,
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            PTree::random(cfg.leaves, (cfg.edge_min, cfg.edge_max), &mut rng)?
        }
    };
    let root = template_shape(cfg.landmarks);
    let sigma = match cfg.sigma {
        SigmaChoice::Value(s) => s,
        SigmaChoice::Rule => {
            let ds = LandmarkDataset::new(vec![LandmarkRecord {
                species: "root".into(),
                specimen: "1".into(),
                coords: root.clone(),
            }])?;
            sigma_rule(&ds)?
        }
    };
    let g = cfg.landmark_geometry(cfg.landmarks, sigma)?;
    let (ds, real) = synthetic_landmarks(&g, &tree, &root, &cfg.bm()?).stage("simulate")?;
    (|| {
        write_output(out, "landmarks.csv", |w| ds.write_csv(w))?;
        write_text(out, "tree.nwk", &format!("{}\n", tree.to_newick()))?;
        write_output(out, "realization.csv", |w| real.write_csv(&tree, w))?;
        write_text(out, "sigma.txt", &format!("{sigma}\n"))
    })()
    .stage("write")?;
    Ok((tree, ds))
}

/// Simulated spherical leaf values as a point table, for `estimate-root`.
pub fn run_sphere_realization(cfg: &AnalysisConfig, tree: &PTree, out: &Path) -> Result<PointTable> {
    let s = Sphere;
    let root = s.point(Sphere::north_pole())?;
    let real = simulate_tree(&s, tree, &root, &cfg.bm()?).stage("simulate")?;
    let order = LeafOrder::of(tree);
    let table = PointTable {
        names: order.names().to_vec(),
        coords: real.leaves(&order).into_iter().map(|p| p.into_coords()).collect(),
    };
    write_output(out, "leaves.csv", |w| table.write_csv(w))
        .and_then(|_| write_output(out, "realization.csv", |w| real.write_csv(tree, w)))
        .stage("write")?;
    Ok(table)
}
