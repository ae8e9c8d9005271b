//! All-atom protein complex structures: PDB I/O, atom correspondence,
//! rigid superposition and per-residue local frames.

mod align;
mod frames;
mod pdb;

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

pub use align::{apply_transform, kabsch_superpose, rmsd, Superposition};
pub use frames::{build_residue_frames, ResidueFrame};
pub use pdb::{parse_pdb, parse_pdb_file, write_pdb};

pub type Vec3 = Vector3<f64>;

/// Backbone atom names used for superposition and interface RMSDs.
pub const BACKBONE: [&str; 4] = ["N", "CA", "C", "O"];

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("structure contains no atoms after filtering")]
    Empty,
    #[error("{0} does not fit its PDB column field")]
    FormatOverflow(String),
    #[error("coordinate override has {got} rows but the structure has {expected} atoms")]
    OverrideShape { expected: usize, got: usize },
    #[error("decoy and native share no atoms")]
    NoOverlap,
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub name: String,
    pub element: String,
    pub coord: Vec3,
    pub residue_index: i32,
    pub chain_id: String,
    pub serial: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub index: i32,
    pub name: String,
    pub atoms: Vec<Atom>,
}

impl Residue {
    pub fn atom(&self, name: &str) -> Option<&Atom> {
        self.atoms.iter().find(|a| a.name == name)
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.atoms.iter().map(|a| a.coord).sum();
        sum / self.atoms.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub id: String,
    pub residues: Vec<Residue>,
}

/// A parsed complex. Atoms are addressed by their position in the flat
/// chain → residue → atom traversal order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComplexStructure {
    pub chains: Vec<Chain>,
}

/// Location of an atom inside a [`ComplexStructure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtomRef {
    pub chain: usize,
    pub residue: usize,
    pub atom: usize,
}

impl ComplexStructure {
    pub fn atom_count(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.residues)
            .map(|r| r.atoms.len())
            .sum()
    }

    pub fn residue_count(&self) -> usize {
        self.chains.iter().map(|c| c.residues.len()).sum()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.chains
            .iter()
            .flat_map(|c| &c.residues)
            .flat_map(|r| &r.atoms)
    }

    pub fn atoms_mut(&mut self) -> impl Iterator<Item = &mut Atom> {
        self.chains
            .iter_mut()
            .flat_map(|c| &mut c.residues)
            .flat_map(|r| &mut r.atoms)
    }

    pub fn residues(&self) -> impl Iterator<Item = (&Chain, &Residue)> {
        self.chains
            .iter()
            .flat_map(|c| c.residues.iter().map(move |r| (c, r)))
    }

    /// Flat atom index → location, in traversal order.
    pub fn atom_refs(&self) -> Vec<AtomRef> {
        let mut refs = Vec::with_capacity(self.atom_count());
        for (ci, chain) in self.chains.iter().enumerate() {
            for (ri, residue) in chain.residues.iter().enumerate() {
                for ai in 0..residue.atoms.len() {
                    refs.push(AtomRef {
                        chain: ci,
                        residue: ri,
                        atom: ai,
                    });
                }
            }
        }
        refs
    }

    pub fn coords(&self) -> Vec<Vec3> {
        self.atoms().map(|a| a.coord).collect()
    }

    /// Replaces every coordinate, in flat order.
    pub fn set_coords(&mut self, coords: &[Vec3]) -> Result<(), StructureError> {
        let n = self.atom_count();
        if coords.len() != n {
            return Err(StructureError::OverrideShape {
                expected: n,
                got: coords.len(),
            });
        }
        for (atom, c) in self.atoms_mut().zip(coords) {
            atom.coord = *c;
        }
        Ok(())
    }

    /// Applies `x ↦ rotation·x + translation` to every atom.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: &Vec3) -> Self {
        let mut out = self.clone();
        for atom in out.atoms_mut() {
            atom.coord = rotation * atom.coord + translation;
        }
        out
    }

    pub fn chain(&self, id: &str) -> Option<&Chain> {
        self.chains.iter().find(|c| c.id == id)
    }
}

/// Decoy/native atom pairing on exact `(chain_id, residue_index, name)` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomCorrespondence {
    /// `(decoy flat index, native flat index)`, in decoy order.
    pub pairs: Vec<(usize, usize)>,
    /// The subset of `pairs` whose atom is named `CA`.
    pub matched_ca: Vec<(usize, usize)>,
}

impl AtomCorrespondence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Decoy flat index → native flat index.
    pub fn decoy_to_native(&self, decoy_atoms: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; decoy_atoms];
        for &(d, n) in &self.pairs {
            map[d] = Some(n);
        }
        map
    }
}

type AtomKey<'a> = (&'a str, i32, &'a str);

pub fn match_atoms(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
) -> Result<AtomCorrespondence, StructureError> {
    let native_index: HashMap<AtomKey, usize> = native
        .atoms()
        .enumerate()
        .map(|(i, a)| ((a.chain_id.as_str(), a.residue_index, a.name.as_str()), i))
        .collect();

    let mut pairs = Vec::new();
    let mut matched_ca = Vec::new();
    for (i, atom) in decoy.atoms().enumerate() {
        let key = (atom.chain_id.as_str(), atom.residue_index, atom.name.as_str());
        if let Some(&j) = native_index.get(&key) {
            pairs.push((i, j));
            if atom.name == "CA" {
                matched_ca.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(StructureError::NoOverlap);
    }
    Ok(AtomCorrespondence { pairs, matched_ca })
}


#[cfg(test)]
mod tests {
    use super::fixtures::structure;
    use super::*;

    fn two_chain(chains: (&'static str, &'static str), missing_residue: bool) -> ComplexStructure {
        let mut residues = vec![
            (chains.0, 1, "GLY", vec![("N", [0.0, 0.0, 0.0]), ("CA", [1.0, 0.0, 0.0])]),
            (chains.0, 2, "ALA", vec![("N", [2.0, 0.0, 0.0]), ("CA", [3.0, 0.0, 0.0]), ("CB", [3.0, 1.0, 0.0])]),
            (chains.1, 1, "SER", vec![("CA", [0.0, 5.0, 0.0]), ("OG", [0.0, 6.0, 0.0])]),
        ];
        if missing_residue {
            residues.remove(1);
        }
        structure(&residues)
    }

    #[test]
    fn identical_structures_match_every_atom() {
        let s = two_chain(("A", "B"), false);
        let corr = match_atoms(&s, &s).unwrap();
        assert_eq!(corr.len(), s.atom_count());
        assert_eq!(corr.matched_ca.len(), 3);
    }

    #[test]
    fn missing_residue_is_unmatched() {
        let decoy = two_chain(("A", "B"), false);
        let native = two_chain(("A", "B"), true);
        let corr = match_atoms(&decoy, &native).unwrap();
        assert_eq!(corr.len(), decoy.atom_count() - 3);
        assert!(corr.pairs.iter().all(|&(d, _)| !(2..5).contains(&d)));
    }

    #[test]
    fn only_shared_chain_matches() {
        let decoy = two_chain(("A", "B"), false);
        let native = two_chain(("A", "C"), false);
        let corr = match_atoms(&decoy, &native).unwrap();
        // chain A has 2 + 3 atoms; chain B/C share nothing
        assert_eq!(corr.len(), 5);
        assert_eq!(
            match_atoms(&native, &decoy).unwrap().len(),
            corr.len(),
            "cardinality is symmetric"
        );
    }

    #[test]
    fn disjoint_structures_error() {
        let decoy = two_chain(("A", "B"), false);
        let native = two_chain(("C", "D"), false);
        assert!(matches!(
            match_atoms(&decoy, &native),
            Err(StructureError::NoOverlap)
        ));
    }
}
