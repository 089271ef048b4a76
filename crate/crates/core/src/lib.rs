//! Mesh-based compartment thermal model of a power module with EM
//! identification of the shared conductance and source-gain parameters.

pub mod config;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod smoother;
pub mod solvers;

pub use error::{Error, Result};
