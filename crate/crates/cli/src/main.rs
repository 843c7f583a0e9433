use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tppca::phylo::{parse_newick, PTree};
use tppca::pipeline::{
    self, read_tree, AnalysisConfig, LeafData, ManifoldChoice, DEFAULT_STUDY_TREE,
};

#[derive(Parser, Debug)]
#[command(name = "tppca", version, about = "Tangent phylogenetic PCA for manifold-valued traits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate Brownian motion on a tree: the spherical root-estimation
    /// study (sphere) or a synthetic landmark dataset (landmarks).
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write one spherical realization (leaves.csv) instead of the study.
        #[arg(long)]
        single: bool,
    },
    /// Estimate the root of the tree from leaf data.
    EstimateRoot(Common),
    /// Align, estimate the root and run tangent p-PCA on landmark data.
    Tppca(Common),
    /// Euclidean p-PCA of aligned landmark data.
    Ppca(Common),
    /// Check that the tree and data parse and match.
    Validate(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Newick tree file.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Leaf data: species,specimen,x1,y1,… or leaf,c1,…,cD.
    #[arg(long)]
    data: Option<PathBuf>,
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Kernel width, or `rule`.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// fixed-step, fixed-step-diffusive or gaussian-increment.
    #[arg(long)]
    scheme: Option<String>,
    /// Simulation time step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    /// frechet, euclidean or south-pole.
    #[arg(long)]
    initializer: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other configuration key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<AnalysisConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("[config] reading {}", p.display()))?;
                AnalysisConfig::parse(&text).context("[config]")?
            }
            None => AnalysisConfig::default(),
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("manifold", self.manifold.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("epsilon", self.epsilon.map(|v| v.to_string()));
        push("sigma", self.sigma.clone());
        push("beta", self.beta.map(|v| v.to_string()));
        push("scheme", self.scheme.clone());
        push("step", self.step.map(|v| v.to_string()));
        push("ridge", self.ridge.map(|v| v.to_string()));
        push("initializer", self.initializer.clone());
        push("replicates", self.replicates.map(|v| v.to_string()));
        push("max_iter", self.max_iter.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("[config] --set expects KEY=VALUE, got {kv:?}"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in overrides {
            cfg.set(&k, &v).context("[config]")?;
        }
        cfg.validate().context("[config]")?;
        Ok(cfg)
    }

    fn tree(&self) -> Result<PTree> {
        let path = self.tree.as_ref().context("[input] --tree is required")?;
        read_tree(path).with_context(|| format!("[input] tree {}", path.display()))
    }

    fn tree_or_default(&self) -> Result<PTree> {
        match &self.tree {
            Some(_) => self.tree(),
            None => Ok(parse_newick(DEFAULT_STUDY_TREE)?),
        }
    }

    fn data(&self) -> Result<LeafData> {
        let path = self.data.as_ref().context("[input] --data is required")?;
        LeafData::read(path).with_context(|| format!("[input] data {}", path.display()))
    }

    fn landmarks(&self) -> Result<tppca::shapes::LandmarkDataset> {
        match self.data()? {
            LeafData::Landmarks(ds) => Ok(ds),
            LeafData::Points(_) => bail!("[input] this command needs landmark data (species,specimen,x1,y1,…)"),
        }
    }
}

fn simulate(common: &Common, single: bool) -> Result<()> {
    let cfg = common.config()?;
    let out = cfg.out.clone();
    match cfg.manifold {
        ManifoldChoice::Sphere if single => {
            let tree = common.tree_or_default()?;
            pipeline::run_sphere_realization(&cfg, &tree, &out)?;
            println!("wrote {}", out.join("leaves.csv").display());
        }
        ManifoldChoice::Sphere => {
            let tree = common.tree_or_default()?;
            let r = pipeline::run_simulation_study(&cfg, &tree, Some(&out))?;
            println!(
                "replicates {}  median error {:.4}  p95 {:.4}  skewness {:.3}  non-converged {} (Fréchet start), {} (south pole)",
                r.rows.len(),
                r.frechet.median,
                r.frechet.p95,
                r.frechet.skewness,
                r.frechet_nonconverged,
                r.south_pole_nonconverged
            );
            println!(
                "median iterations: Fréchet start {}, south pole {}",
                r.frechet_median_iterations, r.south_pole_median_iterations
            );
        }
        ManifoldChoice::Landmarks => {
            let tree = match &common.tree {
                Some(_) => Some(common.tree()?),
                None => None,
            };
            let (tree, ds) = pipeline::run_synthetic(&cfg, tree, &out)?;
            println!(
                "wrote {} specimens of {} landmarks on a {}-leaf tree to {}",
                ds.len(),
                ds.n_landmarks(),
                tree.leaf_count(),
                out.display()
            );
        }
        ManifoldChoice::Euclidean => bail!("[config] simulate supports manifold = sphere or landmarks"),
    }
    Ok(())
}

fn report_ppca(res: &tppca::estimators::PpcaResult, out: &Path) {
    println!(
        "root: {} iterations, final update {:.3e}, converged {}",
        res.root.iterations, res.root.final_update_norm, res.root.converged
    );
    for s in tppca::estimators::scree(res).iter().take(10) {
        println!("  pc{:<3} eigenvalue {:.6e}  cumulative {:.4}", s.index, s.eigenvalue, s.cumulative);
    }
    println!("outputs in {}", out.display());
}

fn validate(common: &Common) -> Result<()> {
    let tree = common.tree()?;
    let zero = tree.edges().filter(|e| e.2 == 0.0).count();
    println!(
        "tree: {} leaves, {} nodes, ultrametric {}, zero-length edges {}",
        tree.leaf_count(),
        tree.len(),
        tree.is_ultrametric(1e-9),
        zero
    );
    if common.data.is_some() {
        match common.data()? {
            LeafData::Landmarks(ds) => {
                let means = tppca::shapes::species_mean(&ds)?;
                means.reconcile(&tree).context("[reconcile]")?;
                println!(
                    "data: {} specimens, {} species, {} landmarks; all species match tree leaves",
                    ds.len(),
                    means.len(),
                    ds.n_landmarks()
                );
            }
            LeafData::Points(p) => {
                tppca::phylo::LeafOrder::from_names(&tree, &p.names).context("[reconcile]")?;
                println!("data: {} points; all names match tree leaves", p.names.len());
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, single } => simulate(&common, single),
        Command::EstimateRoot(common) => {
            let cfg = common.config()?;
            let tree = common.tree()?;
            let root = pipeline::run_estimate_root(&cfg, &common.data()?, &tree, Some(&cfg.out))?;
            println!(
                "root: {} iterations, final update {:.3e}, converged {}",
                root.iterations, root.final_update_norm, root.converged
            );
            println!("outputs in {}", cfg.out.display());
            Ok(())
        }
        Command::Tppca(common) => {
            let cfg = common.config()?;
            let tree = common.tree()?;
            let rep = pipeline::run_tppca(&cfg, &common.landmarks()?, &tree, Some(&cfg.out))?;
            if let Some(s) = rep.sigma {
                println!("sigma {s:.6}");
            }
            report_ppca(&rep.result, &cfg.out);
            Ok(())
        }
        Command::Ppca(common) => {
            let cfg = common.config()?;
            let tree = common.tree()?;
            let res = pipeline::run_ppca(&cfg, &common.landmarks()?, &tree, Some(&cfg.out))?;
            report_ppca(&res, &cfg.out);
            Ok(())
        }
        Command::Validate(common) => validate(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
