//! Concrete geometries: flat space, the unit 2-sphere and the LDDMM landmark
//! manifold.

mod euclidean;
mod landmarks;
mod sphere;

pub use euclidean::Euclidean;
pub use landmarks::{
    hamiltonian, kernel_cometric, GeodesicPath, LandmarkGeometry, LandmarkShape, LogSolution,
    Momentum,
};
pub use sphere::Sphere;
