//! Approximate Riemannian Brownian motion by repeated exponential steps in a
//! random g-orthonormal direction, and its tree-structured extension.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Manifold, ManifoldPoint};
use crate::phylo::{LeafOrder, NodeId, PTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BmScheme {
    /// `exp_p(Δ v/‖v‖_g)`: fixed step length Δ, one step per Δ of time.
    FixedStep,
    /// `exp_p(√(dΔ) v/‖v‖_g)`: fixed step length with Δ read as the time
    /// step, so the mean squared step matches Brownian motion.
    FixedStepDiffusive,
    /// `exp_p(√Δ v)`.
    #[default]
    GaussianIncrement,
}

impl fmt::Display for BmScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BmScheme::FixedStep => "fixed-step",
            BmScheme::FixedStepDiffusive => "fixed-step-diffusive",
            BmScheme::GaussianIncrement => "gaussian-increment",
        })
    }
}

impl FromStr for BmScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-step" => Ok(BmScheme::FixedStep),
            "fixed-step-diffusive" => Ok(BmScheme::FixedStepDiffusive),
            "gaussian-increment" => Ok(BmScheme::GaussianIncrement),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?} (expected fixed-step, fixed-step-diffusive or gaussian-increment)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BmConfig {
    pub step: f64,
    pub scheme: BmScheme,
    pub seed: u64,
}

impl Default for BmConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            scheme: BmScheme::default(),
            seed: 0,
        }
    }
}

impl BmConfig {
    pub fn new(step: f64, scheme: BmScheme, seed: u64) -> Result<Self> {
        let cfg = Self { step, scheme, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid(format!("step must be positive, got {}", self.step)));
        }
        Ok(())
    }

    /// Number of uniform substeps covering time `t`.
    pub fn substeps(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        // tolerate roundoff in t/Δ so that 0.1/1e-3 gives 100, not 101
        let ratio = t / self.step;
        (ratio * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

/// splitmix64 finaliser; turns consecutive replicate indices into
/// well-separated seeds.
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn step_coords<M, R>(m: &M, p: &DVector<f64>, scheme: BmScheme, dt: f64, rng: &mut R) -> Result<DVector<f64>>
where
    M: Manifold + ?Sized,
    R: Rng + ?Sized,
{
    let basis = m.basis(p)?;
    let d = basis.dim();
    let c = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = match scheme {
        BmScheme::GaussianIncrement => dt.sqrt(),
        // ‖v‖_g = ‖c‖ because the frame is g-orthonormal
        BmScheme::FixedStep => dt / c.norm(),
        BmScheme::FixedStepDiffusive => (d as f64 * dt).sqrt() / c.norm(),
    };
    let v = basis.vector(&(c * scale));
    m.exp(p, &v)
}

/// One step of length/time `cfg.step` from `p`.
pub fn bm_step<M, R>(m: &M, p: &ManifoldPoint, cfg: &BmConfig, rng: &mut R) -> Result<ManifoldPoint>
where
    M: Manifold + ?Sized,
    R: Rng + ?Sized,
{
    m.owns(p)?;
    cfg.validate()?;
    let q = step_coords(m, p.coords(), cfg.scheme, cfg.step, rng)?;
    m.point(q)
}

fn walk<M, R>(m: &M, p0: &DVector<f64>, t: f64, cfg: &BmConfig, rng: &mut R) -> Result<DVector<f64>>
where
    M: Manifold + ?Sized,
    R: Rng + ?Sized,
{
    let n = cfg.substeps(t);
    let dt = if n > 0 { t / n as f64 } else { 0.0 };
    let mut p = p0.clone();
    for _ in 0..n {
        p = step_coords(m, &p, cfg.scheme, dt, rng)?;
    }
    Ok(p)
}

/// Brownian path of duration `t`, taken as `⌈t/Δ⌉` equal substeps.
pub fn simulate_bm<M, R>(m: &M, p0: &ManifoldPoint, t: f64, cfg: &BmConfig, rng: &mut R) -> Result<ManifoldPoint>
where
    M: Manifold + ?Sized,
    R: Rng + ?Sized,
{
    m.owns(p0)?;
    cfg.validate()?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("duration must be nonnegative, got {t}")));
    }
    let q = walk(m, p0.coords(), t, cfg, rng)?;
    m.point(q)
}

/// Values at every node of a tree, indexed by node id.
#[derive(Clone, Debug)]
pub struct TreeRealization {
    values: Vec<ManifoldPoint>,
}

impl TreeRealization {
    pub fn value(&self, id: NodeId) -> &ManifoldPoint {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[ManifoldPoint] {
        &self.values
    }

    /// Leaf values in the given order.
    pub fn leaves(&self, order: &LeafOrder) -> Vec<ManifoldPoint> {
        order.ids().iter().map(|id| self.values[id.0].clone()).collect()
    }

    /// Leaf coordinates as rows of an N×D matrix.
    pub fn leaf_matrix(&self, order: &LeafOrder) -> DMatrix<f64> {
        let dim = self.values[0].coords().len();
        DMatrix::from_fn(order.len(), dim, |i, j| self.values[order.ids()[i].0].coords()[j])
    }

    /// CSV with columns `node,name,c1,…,cD`.
    pub fn write_csv<W: Write>(&self, tree: &PTree, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.values[0].coords().len();
        let mut header = vec!["node".to_string(), "name".to_string()];
        header.extend((1..=dim).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for id in tree.nodes() {
            let mut row = vec![id.0.to_string(), tree.name(id).unwrap_or("").to_string()];
            row.extend(self.values[id.0].coords().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random stream for the edge into `child`; independent of evaluation order.
pub fn edge_rng(seed: u64, child: NodeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(child.0 as u64);
    rng
}

/// Brownian motion down every edge of `tree`, starting from `root` at the
/// root. Edges at the same depth are simulated in parallel.
pub fn simulate_tree<M>(m: &M, tree: &PTree, root: &ManifoldPoint, cfg: &BmConfig) -> Result<TreeRealization>
where
    M: Manifold + ?Sized,
{
    m.owns(root)?;
    cfg.validate()?;
    let mut values: Vec<Option<DVector<f64>>> = vec![None; tree.len()];
    values[tree.root().0] = Some(root.coords().clone());
    let mut frontier = vec![tree.root()];
    while !frontier.is_empty() {
        let jobs: Vec<(NodeId, NodeId)> = frontier
            .iter()
            .flat_map(|&p| tree.children(p).iter().map(move |&c| (p, c)))
            .collect();
        let results = jobs
            .par_iter()
            .map(|&(parent, child)| {
                let start = values[parent.0].as_ref().expect("parent simulated first");
                let mut rng = edge_rng(cfg.seed, child);
                walk(m, start, tree.edge_length(child), cfg, &mut rng)
                    .map_err(|e| e.at_leaf(tree.label(child)))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&(_, child), v) in jobs.iter().zip(results) {
            values[child.0] = Some(v);
        }
        frontier = jobs.into_iter().map(|(_, c)| c).collect();
    }
    let values = values
        .into_iter()
        .map(|v| m.point(v.expect("every node reached")))
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeRealization { values })
}
