//! drhuman: a desk-scale differentiable-rendering toolkit that fits a
//! refined 3D body mesh to silhouettes with a graph-convolutional refiner
//! and recovers a UV texture with coarse regression plus adversarial
//! refinement.

pub mod autodiff;
pub mod body;
pub mod error;
pub mod imageio;
pub mod mesh;
pub mod metrics;
pub mod params;
pub mod refine;
pub mod render;
pub mod texture;

pub use error::{Error, Result};
