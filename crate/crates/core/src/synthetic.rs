//! Idealized two-helix complexes and their noisy decoys, for tests,
//! benchmarks and smoke runs.

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::featurize::RESIDUE_TYPES;
use crate::structio::{Atom, Chain, ComplexStructure, Residue, Vec3};

const HELIX_RADIUS: f64 = 2.3;
const HELIX_RISE: f64 = 1.5;
const HELIX_TWIST: f64 = 100.0_f64 * std::f64::consts::PI / 180.0;

fn helix_point(t: f64) -> Vec3 {
    Vec3::new(HELIX_RADIUS * t.cos(), HELIX_RADIUS * t.sin(), HELIX_RISE * t / HELIX_TWIST)
}

/// Backbone (plus Cβ except for glycine) of one ideal helix along +z,
/// residues numbered from 1.
pub fn helix_chain(id: &str, names: &[&str]) -> Chain {
    let residues = names
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let t = i as f64 * HELIX_TWIST;
            let ca = helix_point(t);
            let radial = Vec3::new(t.cos(), t.sin(), 0.0);
            let tangent = (helix_point(t + 0.01) - helix_point(t - 0.01)).normalize();
            let normal = tangent.cross(&radial);
            let mut atoms = vec![
                ("N", ca - 1.2 * tangent - 0.6 * normal - 0.3 * radial),
                ("CA", ca),
                ("C", ca + 1.3 * tangent + 0.5 * normal - 0.2 * radial),
                ("O", ca + 1.8 * tangent + 1.5 * normal - 0.5 * radial),
            ];
            if name != "GLY" {
                atoms.push(("CB", ca + 1.4 * radial - 0.5 * tangent + 0.3 * normal));
            }
            Residue {
                index: i as i32 + 1,
                name: name.to_string(),
                atoms: atoms
                    .into_iter()
                    .map(|(atom, coord)| Atom {
                        name: atom.to_string(),
                        element: atom[..1].to_string(),
                        coord,
                        residue_index: i as i32 + 1,
                        chain_id: id.to_string(),
                        serial: 0,
                    })
                    .collect(),
            }
        })
        .collect();
    Chain {
        id: id.to_string(),
        residues,
    }
}

/// Two antiparallel helices (chains A and B) of `residues` residues each with
/// axes `separation` Å apart, random sequences, randomly oriented.
pub fn helix_dimer<R: Rng + ?Sized>(residues: usize, separation: f64, rng: &mut R) -> ComplexStructure {
    let mut sequence = || -> Vec<&'static str> {
        (0..residues)
            .map(|_| RESIDUE_TYPES[rng.random_range(0..20)])
            .collect()
    };
    let a = helix_chain("A", &sequence());
    let mut b = helix_chain("B", &sequence());
    let flip = Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI);
    let length = HELIX_RISE * residues as f64;
    for atom in b.residues.iter_mut().flat_map(|r| r.atoms.iter_mut()) {
        atom.coord = flip * atom.coord + Vec3::new(separation, 0.0, length);
    }
    let mut s = ComplexStructure { chains: vec![a, b] };
    let axis = Unit::new_normalize(Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.1..1.0),
    ));
    let rotation = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::TAU));
    for (serial, atom) in s.atoms_mut().enumerate() {
        atom.coord = rotation * atom.coord;
        atom.serial = serial as u32 + 1;
    }
    s
}

/// Copy of `s` with independent N(0, sigma²) noise on every coordinate.
pub fn perturb<R: Rng + ?Sized>(s: &ComplexStructure, sigma: f64, rng: &mut R) -> ComplexStructure {
    let mut out = s.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for atom in out.atoms_mut() {
            atom.coord += Vec3::from_fn(|_, _| normal.sample(rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn helices_have_regular_ca_spacing() {
        let chain = helix_chain("A", &["ALA"; 8]);
        let ca: Vec<Vec3> = chain.residues.iter().map(|r| r.atom("CA").unwrap().coord).collect();
        let d0 = (ca[1] - ca[0]).norm();
        for w in ca.windows(2) {
            assert!(((w[1] - w[0]).norm() - d0).abs() < 1e-12);
        }
        assert!((3.6..4.0).contains(&d0), "{d0}");
    }

    #[test]
    fn dimer_chains_touch_without_overlapping() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = helix_dimer(12, 9.5, &mut rng);
            assert_eq!(s.chains.len(), 2);
            let a: Vec<Vec3> = s.chains[0].residues.iter().flat_map(|r| r.atoms.iter().map(|x| x.coord)).collect();
            let b: Vec<Vec3> = s.chains[1].residues.iter().flat_map(|r| r.atoms.iter().map(|x| x.coord)).collect();
            let closest = a
                .iter()
                .flat_map(|p| b.iter().map(move |q| (p - q).norm()))
                .fold(f64::INFINITY, f64::min);
            // facing CB atoms of ideal helices come within about 2.4 Å at this spacing
            assert!((2.0..5.0).contains(&closest), "seed {seed}: {closest}");
            let serials: Vec<u32> = s.atoms().map(|a| a.serial).collect();
            assert_eq!(serials, (1..=s.atom_count() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn perturbation_with_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = helix_dimer(5, 9.0, &mut rng);
        assert_eq!(perturb(&s, 0.0, &mut rng), s);
        assert_ne!(perturb(&s, 0.5, &mut rng), s);
    }
}
