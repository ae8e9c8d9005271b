//! k-NN complex graphs with node and edge features.
//!
//! All-atom graphs carry 39 node channels (38-way atom type one-hot and
//! chain-local surface proximity) and 15 edge channels (same-chain flag,
//! sinusoidal index encoding, 12 relative geometric features, covalent
//! flag). Cα graphs carry 28 node channels (21-way residue type one-hot,
//! surface proximity, six dihedral sin/cos values) and 14 edge channels.
//! Ablations drop the surface column or the geometric block.

use std::io::BufRead;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structio::{build_residue_frames, ComplexStructure, ResidueFrame, Vec3};

/// Heavy-atom names of the 20 standard residues, then `UNK`.
pub const ATOM_TYPES: [&str; 38] = [
    "N", "CA", "C", "O", "OXT", "CB", "CG", "CG1", "CG2", "CD", "CD1", "CD2", "CE", "CE1", "CE2",
    "CE3", "CZ", "CZ2", "CZ3", "CH2", "ND1", "ND2", "NE", "NE1", "NE2", "NZ", "NH1", "NH2", "OD1",
    "OD2", "OE1", "OE2", "OG", "OG1", "OH", "SD", "SG", "UNK",
];

pub const RESIDUE_TYPES: [&str; 21] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL", "UNK",
];

pub const DEFAULT_K: usize = 20;
pub const SURFACE_RADIUS: f64 = 10.0;
pub const SURFACE_MAX_NEIGHBORS: f64 = 64.0;
pub const COVALENT_CUTOFF: f64 = 1.9;
pub const GEOMETRIC_WIDTH: usize = 12;

pub fn atom_type_index(name: &str) -> usize {
    ATOM_TYPES[..37]
        .iter()
        .position(|t| *t == name)
        .unwrap_or(37)
}

pub fn residue_type_index(name: &str) -> usize {
    RESIDUE_TYPES[..20]
        .iter()
        .position(|t| *t == name)
        .unwrap_or(20)
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("graph needs at least 2 nodes, got {0}")]
    GraphTooSmall(usize),
    #[error("surface override has {got} values but the structure has {expected} atoms")]
    SurfaceOverride { expected: usize, got: usize },
    #[error("surface override line {line}: {message}")]
    SurfaceParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    AllAtom,
    CAlpha,
}

/// Which graph to build and which feature blocks it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub granularity: Granularity,
    pub k: usize,
    pub surface_proximity: bool,
    pub geometric_features: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::AllAtom,
            k: DEFAULT_K,
            surface_proximity: true,
            geometric_features: true,
        }
    }
}

impl GraphConfig {
    pub fn c_alpha() -> Self {
        Self {
            granularity: Granularity::CAlpha,
            ..Self::default()
        }
    }

    pub fn node_dim(&self) -> usize {
        let surface = usize::from(self.surface_proximity);
        match self.granularity {
            Granularity::AllAtom => ATOM_TYPES.len() + surface,
            Granularity::CAlpha => RESIDUE_TYPES.len() + surface + 6,
        }
    }

    /// The default-k configuration producing these feature widths, if any.
    pub fn from_widths(node: usize, edge: usize) -> Option<Self> {
        let mut candidates = Vec::new();
        for granularity in [Granularity::AllAtom, Granularity::CAlpha] {
            for surface_proximity in [true, false] {
                for geometric_features in [true, false] {
                    candidates.push(Self {
                        granularity,
                        k: DEFAULT_K,
                        surface_proximity,
                        geometric_features,
                    });
                }
            }
        }
        candidates
            .into_iter()
            .find(|c| c.node_dim() == node && c.edge_dim() == edge)
    }

    pub fn edge_dim(&self) -> usize {
        let geometric = if self.geometric_features { GEOMETRIC_WIDTH } else { 0 };
        let covalent = usize::from(self.granularity == Granularity::AllAtom);
        2 + geometric + covalent
    }
}

/// A featurized complex. Row `i` of every per-node array is node `i`;
/// edge `e = (src, dst)` points from neighbor `src` to center `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGraph {
    pub granularity: Granularity,
    /// Current coordinates, `n×3`.
    pub coords: Array2<f64>,
    /// Anchor `x⁽⁰⁾` of the coordinate skip connection, `n×3`.
    pub initial_coords: Array2<f64>,
    pub node_features: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Array2<f64>,
    pub ca_mask: Vec<bool>,
    /// Flat residue index (traversal order) of each node.
    pub residue_of_node: Vec<usize>,
    pub chain_of_node: Vec<String>,
    /// Flat atom index of each node in the source structure.
    pub atom_of_node: Vec<usize>,
}

impl ComplexGraph {
    pub fn node_count(&self) -> usize {
        self.coords.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Node indices whose atom is a Cα.
    pub fn ca_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.ca_mask[i]).collect()
    }

    /// Replaces the coordinates and the skip anchor with `coords`.
    pub fn set_coords(&mut self, coords: Array2<f64>) {
        assert_eq!(coords.dim(), self.coords.dim(), "coordinate shape");
        self.initial_coords = coords.clone();
        self.coords = coords;
    }

    /// Applies `x ↦ U·x + b` to both coordinate arrays; features are untouched.
    pub fn transform_coords(&mut self, rotation: &Matrix3<f64>, translation: &Vec3) {
        for arr in [&mut self.coords, &mut self.initial_coords] {
            for mut row in arr.rows_mut() {
                let p = rotation * Vec3::new(row[0], row[1], row[2]) + translation;
                row[0] = p.x;
                row[1] = p.y;
                row[2] = p.z;
            }
        }
    }
}

pub fn coords_to_array(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, c)| points[i][c])
}

pub fn array_to_coords(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// For every node `i`, the `min(k, n−1)` nearest other nodes ordered by
/// distance, ties broken by lower index. Edges come out grouped by
/// destination in ascending order.
pub fn knn_edges(points: &[Vec3], k: usize) -> Vec<(usize, usize)> {
    let n = points.len();
    let k_eff = k.min(n.saturating_sub(1));
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((points[j] - points[i]).norm_squared(), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k_eff > 0 && cand.len() > k_eff {
                cand.select_nth_unstable_by(k_eff - 1, cmp);
                cand.truncate(k_eff);
            }
            cand.sort_unstable_by(cmp);
            cand.truncate(k_eff);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    neighbors
        .into_iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.into_iter().map(move |j| (j, i)))
        .collect()
}

/// `1 − min(1, c/64)` where `c` counts same-chain heavy atoms within 10 Å.
pub fn surface_proximity(s: &ComplexStructure) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.atom_count());
    for chain in &s.chains {
        let pts: Vec<Vec3> = chain
            .residues
            .iter()
            .flat_map(|r| r.atoms.iter().map(|a| a.coord))
            .collect();
        let r2 = SURFACE_RADIUS * SURFACE_RADIUS;
        let counts: Vec<f64> = pts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                pts.iter()
                    .enumerate()
                    .filter(|&(j, q)| j != i && (q - p).norm_squared() <= r2)
                    .count() as f64
            })
            .collect();
        out.extend(counts.into_iter().map(|c| 1.0 - (c / SURFACE_MAX_NEIGHBORS).min(1.0)));
    }
    out
}

/// Reads an externally computed proximity file: one value per line, in
/// atom order. Blank lines are skipped.
pub fn read_surface_override<R: BufRead>(reader: R) -> Result<Vec<f64>, FeatureError> {
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let v: f64 = text.parse().map_err(|_| FeatureError::SurfaceParse {
            line: i + 1,
            message: format!("not a number: {text:?}"),
        })?;
        if !(0.0..=1.0).contains(&v) {
            return Err(FeatureError::SurfaceParse {
                line: i + 1,
                message: format!("{v} outside [0, 1]"),
            });
        }
        values.push(v);
    }
    Ok(values)
}

pub fn read_surface_override_file(path: impl AsRef<Path>) -> Result<Vec<f64>, FeatureError> {
    let file = std::fs::File::open(path)?;
    read_surface_override(std::io::BufReader::new(file))
}

fn check_override(s: &ComplexStructure, values: &[f64]) -> Result<(), FeatureError> {
    if values.len() != s.atom_count() {
        return Err(FeatureError::SurfaceOverride {
            expected: s.atom_count(),
            got: values.len(),
        });
    }
    Ok(())
}

/// Atom-type one-hot rows, plus a trailing proximity column when given.
pub fn node_features_allatom(s: &ComplexStructure, proximity: Option<&[f64]>) -> Array2<f64> {
    let n = s.atom_count();
    let width = ATOM_TYPES.len() + usize::from(proximity.is_some());
    let mut f = Array2::zeros((n, width));
    for (i, atom) in s.atoms().enumerate() {
        f[[i, atom_type_index(&atom.name)]] = 1.0;
        if let Some(p) = proximity {
            f[[i, ATOM_TYPES.len()]] = p[i];
        }
    }
    f
}

/// Signed torsion angle defined by four points, in radians.
pub fn dihedral(p0: &Vec3, p1: &Vec3, p2: &Vec3, p3: &Vec3) -> f64 {
    let b1 = p1 - p0;
    let b2 = p2 - p1;
    let b3 = p3 - p2;
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let y = b2.norm() * b1.dot(&n2);
    let x = n1.dot(&n2);
    y.atan2(x)
}

struct CaNode {
    atom: usize,
    residue: usize,
}

fn ca_nodes(s: &ComplexStructure) -> Vec<CaNode> {
    let mut nodes = Vec::new();
    let mut atom_base = 0;
    let mut flat_res = 0;
    for chain in &s.chains {
        for residue in &chain.residues {
            if let Some(pos) = residue.atoms.iter().position(|a| a.name == "CA") {
                nodes.push(CaNode {
                    atom: atom_base + pos,
                    residue: flat_res,
                });
            }
            atom_base += residue.atoms.len();
            flat_res += 1;
        }
    }
    nodes
}

/// `(sin φ, cos φ, sin ψ, cos ψ, sin ω, cos ω)` for every residue with a Cα,
/// in traversal order. φ uses the previous residue's C, ψ and ω the next
/// residue's N (and Cα); neighbors count only when their residue index is
/// adjacent. Undefined angles encode as `(0, 1)`.
pub fn backbone_dihedrals(s: &ComplexStructure) -> Vec<[f64; 6]> {
    let mut out = Vec::new();
    for chain in &s.chains {
        let res = &chain.residues;
        for (r, residue) in res.iter().enumerate() {
            if residue.atom("CA").is_none() {
                continue;
            }
            let get = |idx: Option<usize>, name: &str| {
                idx.and_then(|k| res.get(k)).and_then(|x| x.atom(name)).map(|a| a.coord)
            };
            let prev = (r > 0 && res[r - 1].index + 1 == residue.index).then(|| r - 1);
            let next = (r + 1 < res.len() && res[r + 1].index == residue.index + 1).then_some(r + 1);
            let here = Some(r);
            let angle = |pts: [Option<Vec3>; 4]| -> (f64, f64) {
                match pts {
                    [Some(a), Some(b), Some(c), Some(d)] => {
                        let t = dihedral(&a, &b, &c, &d);
                        (t.sin(), t.cos())
                    }
                    _ => (0.0, 1.0),
                }
            };
            let phi = angle([get(prev, "C"), get(here, "N"), get(here, "CA"), get(here, "C")]);
            let psi = angle([get(here, "N"), get(here, "CA"), get(here, "C"), get(next, "N")]);
            let omega = angle([get(here, "CA"), get(here, "C"), get(next, "N"), get(next, "CA")]);
            out.push([phi.0, phi.1, psi.0, psi.1, omega.0, omega.1]);
        }
    }
    out
}

/// Residue-type one-hot, optional proximity of the Cα atom, dihedrals.
/// `proximity` is indexed by flat atom index.
pub fn node_features_ca(s: &ComplexStructure, proximity: Option<&[f64]>) -> Array2<f64> {
    let nodes = ca_nodes(s);
    let residues: Vec<_> = s.residues().map(|(_, r)| r).collect();
    let dihedrals = backbone_dihedrals(s);
    let surface = usize::from(proximity.is_some());
    let mut f = Array2::zeros((nodes.len(), RESIDUE_TYPES.len() + surface + 6));
    for (i, node) in nodes.iter().enumerate() {
        f[[i, residue_type_index(&residues[node.residue].name)]] = 1.0;
        let mut col = RESIDUE_TYPES.len();
        if let Some(p) = proximity {
            f[[i, col]] = p[node.atom];
            col += 1;
        }
        for (k, v) in dihedrals[i].iter().enumerate() {
            f[[i, col + k]] = *v;
        }
    }
    f
}

/// Distance, frame-local directions, relative orientation and inverse
/// distance for an edge from `x_src` (frame `f_src`) to `x_dst` (`f_dst`).
pub fn relative_geometry(
    x_dst: &Vec3,
    f_dst: &ResidueFrame,
    x_src: &Vec3,
    f_src: &ResidueFrame,
) -> [f64; GEOMETRIC_WIDTH] {
    let delta = x_src - x_dst;
    let d = delta.norm();
    let unit = if d > 0.0 { delta / d } else { Vec3::zeros() };
    let local_dst = f_dst.rotation.transpose() * unit;
    let local_src = f_src.rotation.transpose() * (-unit);
    let relative = f_dst.rotation.transpose() * f_src.rotation;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(relative));
    let mut qv = [q.w, q.i, q.j, q.k];
    if qv[0] < 0.0 {
        qv.iter_mut().for_each(|v| *v = -*v);
    }
    [
        d / 10.0,
        local_dst.x,
        local_dst.y,
        local_dst.z,
        local_src.x,
        local_src.y,
        local_src.z,
        qv[0],
        qv[1],
        qv[2],
        qv[3],
        1.0 / (1.0 + d),
    ]
}

struct NodeMeta<'a> {
    coords: &'a [Vec3],
    residue: &'a [usize],
    chain: &'a [String],
    residue_number: &'a [i32],
}

fn edge_features_impl(
    meta: &NodeMeta,
    frames: &[ResidueFrame],
    edges: &[(usize, usize)],
    config: &GraphConfig,
) -> Array2<f64> {
    let mut f = Array2::zeros((edges.len(), config.edge_dim()));
    for (e, &(src, dst)) in edges.iter().enumerate() {
        let same_chain = meta.chain[src] == meta.chain[dst];
        f[[e, 0]] = f64::from(u8::from(same_chain));
        f[[e, 1]] = (dst as f64 - src as f64).sin();
        let mut col = 2;
        if config.geometric_features {
            let g = relative_geometry(
                &meta.coords[dst],
                &frames[meta.residue[dst]],
                &meta.coords[src],
                &frames[meta.residue[src]],
            );
            for (k, v) in g.iter().enumerate() {
                f[[e, col + k]] = *v;
            }
            col += GEOMETRIC_WIDTH;
        }
        if config.granularity == Granularity::AllAtom {
            let bonded = same_chain
                && (meta.residue_number[src] - meta.residue_number[dst]).abs() <= 1
                && (meta.coords[src] - meta.coords[dst]).norm() <= COVALENT_CUTOFF;
            f[[e, col]] = f64::from(u8::from(bonded));
        }
    }
    f
}

/// Edge features for a graph built from `s` (see module docs for layout).
pub fn edge_features(s: &ComplexStructure, graph: &ComplexGraph, config: &GraphConfig) -> Array2<f64> {
    let all_coords = s.coords();
    let atoms: Vec<_> = s.atoms().collect();
    let coords: Vec<Vec3> = graph.atom_of_node.iter().map(|&a| all_coords[a]).collect();
    let residue_number: Vec<i32> = graph
        .atom_of_node
        .iter()
        .map(|&a| atoms[a].residue_index)
        .collect();
    let frames = build_residue_frames(s);
    let meta = NodeMeta {
        coords: &coords,
        residue: &graph.residue_of_node,
        chain: &graph.chain_of_node,
        residue_number: &residue_number,
    };
    edge_features_impl(&meta, &frames, &graph.edges, config)
}

/// Builds the k-NN graph of `s` with every feature block `config` asks for.
/// `surface_override`, when given, supplies per-atom proximities in flat
/// atom order instead of the neighbor-count approximation.
pub fn build_knn_graph(
    s: &ComplexStructure,
    config: &GraphConfig,
    surface_override: Option<&[f64]>,
) -> Result<ComplexGraph, FeatureError> {
    let proximity = if config.surface_proximity {
        Some(match surface_override {
            Some(v) => {
                check_override(s, v)?;
                v.to_vec()
            }
            None => surface_proximity(s),
        })
    } else {
        None
    };

    let atoms: Vec<_> = s.atoms().collect();
    let mut residue_of_atom = Vec::with_capacity(atoms.len());
    for (flat_res, (_, residue)) in s.residues().enumerate() {
        residue_of_atom.extend(std::iter::repeat_n(flat_res, residue.atoms.len()));
    }

    let (atom_of_node, node_features) = match config.granularity {
        Granularity::AllAtom => (
            (0..atoms.len()).collect::<Vec<_>>(),
            node_features_allatom(s, proximity.as_deref()),
        ),
        Granularity::CAlpha => (
            ca_nodes(s).iter().map(|c| c.atom).collect(),
            node_features_ca(s, proximity.as_deref()),
        ),
    };
    let n = atom_of_node.len();
    if n < 2 {
        return Err(FeatureError::GraphTooSmall(n));
    }

    let coords: Vec<Vec3> = atom_of_node.iter().map(|&a| atoms[a].coord).collect();
    let residue_of_node: Vec<usize> = atom_of_node.iter().map(|&a| residue_of_atom[a]).collect();
    let chain_of_node: Vec<String> = atom_of_node
        .iter()
        .map(|&a| atoms[a].chain_id.clone())
        .collect();
    let residue_number: Vec<i32> = atom_of_node.iter().map(|&a| atoms[a].residue_index).collect();
    let ca_mask: Vec<bool> = atom_of_node.iter().map(|&a| atoms[a].name == "CA").collect();

    let edges = knn_edges(&coords, config.k);
    let frames = build_residue_frames(s);
    let meta = NodeMeta {
        coords: &coords,
        residue: &residue_of_node,
        chain: &chain_of_node,
        residue_number: &residue_number,
    };
    let edge_features = edge_features_impl(&meta, &frames, &edges, config);
    let x = coords_to_array(&coords);

    Ok(ComplexGraph {
        granularity: config.granularity,
        initial_coords: x.clone(),
        coords: x,
        node_features,
        edges,
        edge_features,
        ca_mask,
        residue_of_node,
        chain_of_node,
        atom_of_node,
    })
}

/// Adds i.i.d. `Normal(0, σ²)` noise to every coordinate and re-anchors the
/// skip connection on the corrupted positions.
pub fn corrupt_coordinates<R: Rng + ?Sized>(graph: &mut ComplexGraph, sigma: f64, rng: &mut R) {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be a finite non-negative number");
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    graph.coords.mapv_inplace(|v| v + normal.sample(rng));
    graph.initial_coords = graph.coords.clone();
}
