use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("point lies at or near the cut locus: {0}")]
    CutLocus(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// An iterative routine ran out of iterations. `last` holds the final
    /// iterate so callers can inspect or restart from it.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("newick syntax error at byte {position}: {message}")]
    NewickSyntax { position: usize, message: String },

    #[error("newick format error at byte {position}: {message}")]
    NewickFormat { position: usize, message: String },

    #[error("tree structure error: {0}")]
    TreeStructure(String),

    #[error(
        "species/tree mismatch: in data but not tree: [{}]; in tree but not data: [{}]",
        .missing_in_tree.join(", "),
        .missing_in_data.join(", ")
    )]
    Reconcile {
        missing_in_tree: Vec<String>,
        missing_in_data: Vec<String>,
    },

    #[error("leaf {leaf}: {error}")]
    Leaf {
        leaf: String,
        error: Box<Error>,
    },

    #[error("[{stage}] {error}")]
    Stage {
        stage: &'static str,
        error: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn at_leaf(self, leaf: impl Into<String>) -> Self {
        Error::Leaf {
            leaf: leaf.into(),
            error: Box::new(self),
        }
    }
}

/// Attach a pipeline stage label to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            error: Box::new(e),
        })
    }
}
