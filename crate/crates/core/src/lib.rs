pub mod error;
pub mod estimators;
pub mod geometry;
pub mod manifolds;
pub mod phylo;
pub mod pipeline;
pub mod plot;
pub mod shapes;
pub mod sim;

pub use error::{Error, Result};
