//! Equivariant graph refinement and quality assessment of protein complexes.

pub mod backend;
pub mod featurize;
pub mod metrics;
pub mod model;
pub mod structio;
pub mod synthetic;
pub mod tape;
pub mod train;
