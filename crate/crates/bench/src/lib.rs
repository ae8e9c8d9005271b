//! Shared fixtures for the criterion benches.

use egr_core::featurize::{build_knn_graph, ComplexGraph, GraphConfig};
use egr_core::structio::ComplexStructure;
use egr_core::synthetic::{helix_dimer, perturb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A helix dimer with `residues` residues per chain and a 1 Å decoy of it,
/// both deterministic in `seed`.
pub fn native_and_decoy(residues: usize, seed: u64) -> (ComplexStructure, ComplexStructure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let native = helix_dimer(residues, 9.5, &mut rng);
    let decoy = perturb(&native, 1.0, &mut rng);
    (native, decoy)
}

pub fn all_atom_graph(s: &ComplexStructure) -> ComplexGraph {
    build_knn_graph(s, &GraphConfig::default(), None).expect("synthetic dimers featurize")
}
