//! Structural quality metrics for complexes: interface contacts, fnat and
//! fnonnat, interface and ligand RMSDs, DockQ, LDDT-Cα, quality classes and
//! ranking statistics over decoy sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structio::{
    kabsch_superpose, match_atoms, AtomCorrespondence, ComplexStructure, StructureError, Vec3,
    BACKBONE,
};

pub const CONTACT_CUTOFF: f64 = 5.0;
pub const INTERFACE_CUTOFF: f64 = 10.0;
pub const LRMSD_SCALE: f64 = 8.5;
pub const IRMSD_SCALE: f64 = 1.5;
pub const LDDT_RADIUS: f64 = 15.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no interface: {0}")]
    NoInterface(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("need at least 2 matched Cα atoms, got {0}")]
    TooFewCa(usize),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

/// `(chain id, residue index)`.
pub type ResidueKey = (String, i32);

/// Cross-chain residue pairs, each stored with its smaller key first.
pub type ContactSet = BTreeSet<(ResidueKey, ResidueKey)>;

struct ResidueBall<'a> {
    chain: usize,
    key: ResidueKey,
    center: Vec3,
    radius: f64,
    atoms: Vec<&'a Vec3>,
}

fn residue_balls(s: &ComplexStructure) -> Vec<ResidueBall<'_>> {
    let mut out = Vec::new();
    for (ci, chain) in s.chains.iter().enumerate() {
        for residue in &chain.residues {
            let center = residue.centroid();
            let radius = residue
                .atoms
                .iter()
                .map(|a| (a.coord - center).norm())
                .fold(0.0, f64::max);
            out.push(ResidueBall {
                chain: ci,
                key: (chain.id.clone(), residue.index),
                center,
                radius,
                atoms: residue.atoms.iter().map(|a| &a.coord).collect(),
            });
        }
    }
    out
}

/// Cross-chain residue pairs with any atom pair within `cutoff` (inclusive).
fn residue_pairs_within(s: &ComplexStructure, cutoff: f64) -> ContactSet {
    let balls = residue_balls(s);
    let cut2 = cutoff * cutoff;
    let mut out = ContactSet::new();
    for (i, a) in balls.iter().enumerate() {
        for b in &balls[i + 1..] {
            if a.chain == b.chain {
                continue;
            }
            if (a.center - b.center).norm() > a.radius + b.radius + cutoff + 1e-9 {
                continue;
            }
            let touching = a
                .atoms
                .iter()
                .any(|p| b.atoms.iter().any(|q| (*p - *q).norm_squared() <= cut2));
            if touching {
                let (lo, hi) = if a.key <= b.key { (&a.key, &b.key) } else { (&b.key, &a.key) };
                out.insert((lo.clone(), hi.clone()));
            }
        }
    }
    out
}

fn require_interface_chains(s: &ComplexStructure) -> Result<(), MetricError> {
    if s.chains.len() < 2 {
        return Err(MetricError::NoInterface(format!(
            "structure has {} chain(s)",
            s.chains.len()
        )));
    }
    Ok(())
}

pub fn contacts(s: &ComplexStructure, cutoff: f64) -> Result<ContactSet, MetricError> {
    require_interface_chains(s)?;
    Ok(residue_pairs_within(s, cutoff))
}

/// `(|d ∩ n| / |n|, |d ∖ n| / |d|)`, each 0 when its denominator is empty.
pub fn fnat_from_sets(decoy: &ContactSet, native: &ContactSet) -> (f64, f64) {
    let shared = decoy.intersection(native).count() as f64;
    let fnat = if native.is_empty() { 0.0 } else { shared / native.len() as f64 };
    let fnonnat = if decoy.is_empty() {
        0.0
    } else {
        (decoy.len() as f64 - shared) / decoy.len() as f64
    };
    (fnat, fnonnat)
}

pub fn fnat_fnonnat(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
) -> Result<(f64, f64), MetricError> {
    let d = contacts(decoy, CONTACT_CUTOFF)?;
    let n = contacts(native, CONTACT_CUTOFF)?;
    Ok(fnat_from_sets(&d, &n))
}

/// Native residues with a heavy atom within 10 Å of another chain.
pub fn interface_residues(native: &ComplexStructure) -> Result<BTreeSet<ResidueKey>, MetricError> {
    let pairs = contacts(native, INTERFACE_CUTOFF)?;
    Ok(pairs.into_iter().flat_map(|(a, b)| [a, b]).collect())
}

fn matched_points<'a>(
    decoy: &[Vec3],
    native: &[Vec3],
    pairs: impl Iterator<Item = &'a (usize, usize)>,
) -> (Vec<Vec3>, Vec<Vec3>) {
    pairs.map(|&(d, n)| (decoy[d], native[n])).unzip()
}

pub fn irmsd(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
    corr: &AtomCorrespondence,
) -> Result<f64, MetricError> {
    let interface = interface_residues(native)?;
    if interface.is_empty() {
        return Err(MetricError::NoInterface("native chains are more than 10 Å apart".into()));
    }
    let native_atoms: Vec<_> = native.atoms().collect();
    let selected = corr.pairs.iter().filter(|(_, n)| {
        let a = native_atoms[*n];
        BACKBONE.contains(&a.name.as_str())
            && interface.contains(&(a.chain_id.clone(), a.residue_index))
    });
    let (mobile, target) = matched_points(&decoy.coords(), &native.coords(), selected);
    if mobile.len() < 3 {
        return Err(MetricError::Undefined(format!(
            "interface has {} matched backbone atoms, need 3",
            mobile.len()
        )));
    }
    let sup = kabsch_superpose(&mobile, &target, None)
        .map_err(|e| MetricError::Undefined(format!("interface superposition: {e}")))?;
    Ok(sup.rmsd)
}

/// Native chain with the most residues, ties to the smallest chain id.
pub fn receptor_chain(native: &ComplexStructure) -> Result<&str, MetricError> {
    require_interface_chains(native)?;
    let best = native
        .chains
        .iter()
        .max_by(|a, b| {
            a.residues
                .len()
                .cmp(&b.residues.len())
                .then_with(|| b.id.cmp(&a.id))
        })
        .expect("at least two chains");
    Ok(&best.id)
}

pub fn lrmsd(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
    corr: &AtomCorrespondence,
) -> Result<f64, MetricError> {
    let receptor = receptor_chain(native)?.to_string();
    let native_atoms: Vec<_> = native.atoms().collect();
    let backbone: Vec<&(usize, usize)> = corr
        .pairs
        .iter()
        .filter(|(_, n)| BACKBONE.contains(&native_atoms[*n].name.as_str()))
        .collect();
    let decoy_xyz = decoy.coords();
    let native_xyz = native.coords();
    let (rec_mobile, rec_target) = matched_points(
        &decoy_xyz,
        &native_xyz,
        backbone.iter().copied().filter(|(_, n)| native_atoms[*n].chain_id == receptor),
    );
    let (lig_mobile, lig_target) = matched_points(
        &decoy_xyz,
        &native_xyz,
        backbone.iter().copied().filter(|(_, n)| native_atoms[*n].chain_id != receptor),
    );
    if rec_mobile.len() < 3 {
        return Err(MetricError::Undefined(format!(
            "receptor has {} matched backbone atoms, need 3",
            rec_mobile.len()
        )));
    }
    if lig_mobile.is_empty() {
        return Err(MetricError::Undefined("ligand has no matched backbone atoms".into()));
    }
    let sup = kabsch_superpose(&rec_mobile, &rec_target, None)
        .map_err(|e| MetricError::Undefined(format!("receptor superposition: {e}")))?;
    let moved: Vec<Vec3> = lig_mobile.iter().map(|p| sup.apply(p)).collect();
    Ok(crate::structio::rmsd(&moved, &lig_target))
}

pub fn dockq(fnat: f64, lrmsd: f64, irmsd: f64) -> f64 {
    let scaled = |r: f64, d: f64| 1.0 / (1.0 + (r / d) * (r / d));
    (fnat + scaled(lrmsd, LRMSD_SCALE) + scaled(irmsd, IRMSD_SCALE)) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueLddt {
    pub chain: String,
    pub residue_index: i32,
    /// `None` when no other matched Cα lies within the inclusion radius.
    pub lddt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LddtResult {
    /// One entry per matched Cα, in decoy order.
    pub per_residue: Vec<ResidueLddt>,
    pub global: f64,
    /// `(decoy atom, native atom)` of each entry of `per_residue`.
    pub ca_pairs: Vec<(usize, usize)>,
}

/// Superposition-free LDDT over matched Cα atoms.
pub fn lddt_ca(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
    corr: &AtomCorrespondence,
    radius: f64,
    thresholds: &[f64],
) -> Result<LddtResult, MetricError> {
    let ca = &corr.matched_ca;
    if ca.len() < 2 {
        return Err(MetricError::TooFewCa(ca.len()));
    }
    let decoy_xyz = decoy.coords();
    let native_xyz = native.coords();
    let native_atoms: Vec<_> = native.atoms().collect();
    let mut per_residue = Vec::with_capacity(ca.len());
    let mut defined = Vec::new();
    for (i, &(di, ni)) in ca.iter().enumerate() {
        let mut pairs = 0usize;
        let mut preserved = 0usize;
        for (j, &(dj, nj)) in ca.iter().enumerate() {
            if i == j {
                continue;
            }
            let native_d = (native_xyz[ni] - native_xyz[nj]).norm();
            if native_d >= radius {
                continue;
            }
            let decoy_d = (decoy_xyz[di] - decoy_xyz[dj]).norm();
            let err = (decoy_d - native_d).abs();
            pairs += 1;
            preserved += thresholds.iter().filter(|&&t| err < t).count();
        }
        let lddt = (pairs > 0)
            .then(|| preserved as f64 / (thresholds.len() * pairs) as f64);
        if let Some(v) = lddt {
            defined.push(v);
        }
        let atom = native_atoms[ni];
        per_residue.push(ResidueLddt {
            chain: atom.chain_id.clone(),
            residue_index: atom.residue_index,
            lddt,
        });
    }
    let global = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(LddtResult {
        per_residue,
        global,
        ca_pairs: ca.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityClass {
    Incorrect,
    Acceptable,
    Medium,
    High,
}

impl fmt::Display for QualityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualityClass::Incorrect => "incorrect",
            QualityClass::Acceptable => "acceptable",
            QualityClass::Medium => "medium",
            QualityClass::High => "high",
        })
    }
}

pub fn quality_class(dockq: f64) -> QualityClass {
    if dockq >= 0.80 {
        QualityClass::High
    } else if dockq >= 0.49 {
        QualityClass::Medium
    } else if dockq >= 0.23 {
        QualityClass::Acceptable
    } else {
        QualityClass::Incorrect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub schema_version: u32,
    pub fnat: f64,
    pub fnonnat: f64,
    pub irmsd: f64,
    pub lrmsd: f64,
    pub dockq: f64,
    pub lddt_ca_global: f64,
    pub per_residue_lddt: Vec<ResidueLddt>,
    pub quality_class: QualityClass,
}

pub const CSV_HEADER: [&str; 9] = [
    "target", "decoy", "fnat", "fnonnat", "irmsd", "lrmsd", "dockq", "lddt", "class",
];

impl QualityReport {
    pub fn csv_record(&self, target: &str, decoy: &str) -> Vec<String> {
        vec![
            target.to_string(),
            decoy.to_string(),
            self.fnat.to_string(),
            self.fnonnat.to_string(),
            self.irmsd.to_string(),
            self.lrmsd.to_string(),
            self.dockq.to_string(),
            self.lddt_ca_global.to_string(),
            self.quality_class.to_string(),
        ]
    }
}

/// Every metric of `decoy` against `native`.
pub fn score_decoy(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
) -> Result<QualityReport, MetricError> {
    let corr = match_atoms(decoy, native)?;
    let (fnat, fnonnat) = fnat_fnonnat(decoy, native)?;
    let irmsd = irmsd(decoy, native, &corr)?;
    let lrmsd = lrmsd(decoy, native, &corr)?;
    let lddt = lddt_ca(decoy, native, &corr, LDDT_RADIUS, &LDDT_THRESHOLDS)?;
    let dockq = dockq(fnat, lrmsd, irmsd);
    Ok(QualityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        fnat,
        fnonnat,
        irmsd,
        lrmsd,
        dockq,
        lddt_ca_global: lddt.global,
        per_residue_lddt: lddt.per_residue,
        quality_class: quality_class(dockq),
    })
}

// ---------------------------------------------------------------------------
// Ranking over decoy sets.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDecoy {
    pub decoy_id: String,
    pub predicted_score: f64,
    pub true_dockq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingInput {
    pub target_id: String,
    pub decoys: Vec<RankedDecoy>,
}

impl RankingInput {
    /// Decoys by predicted score, highest first; ties by decoy id.
    pub fn ranked(&self) -> Vec<&RankedDecoy> {
        let mut order: Vec<&RankedDecoy> = self.decoys.iter().collect();
        order.sort_by(|a, b| {
            b.predicted_score
                .total_cmp(&a.predicted_score)
                .then_with(|| a.decoy_id.cmp(&b.decoy_id))
        });
        order
    }
}

/// Counts at or above acceptable, at or above medium, and high.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounts {
    pub acceptable: usize,
    pub medium: usize,
    pub high: usize,
}

impl fmt::Display for HitCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.acceptable, self.medium, self.high)
    }
}

pub fn target_hits(input: &RankingInput, top_n: usize) -> HitCounts {
    let mut hits = HitCounts::default();
    for d in input.ranked().into_iter().take(top_n) {
        let class = quality_class(d.true_dockq);
        hits.acceptable += usize::from(class >= QualityClass::Acceptable);
        hits.medium += usize::from(class >= QualityClass::Medium);
        hits.high += usize::from(class == QualityClass::High);
    }
    hits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateSummary {
    pub per_target: Vec<(String, HitCounts)>,
    /// Number of targets with at least one hit in each class band.
    pub summary: HitCounts,
}

pub fn hit_rate(targets: &[RankingInput], top_n: usize) -> HitRateSummary {
    let per_target: Vec<(String, HitCounts)> = targets
        .iter()
        .map(|t| (t.target_id.clone(), target_hits(t, top_n)))
        .collect();
    let mut summary = HitCounts::default();
    for (_, h) in &per_target {
        summary.acceptable += usize::from(h.acceptable > 0);
        summary.medium += usize::from(h.medium > 0);
        summary.high += usize::from(h.high > 0);
    }
    HitRateSummary {
        per_target,
        summary,
    }
}

/// `1 − DockQ` of the top-ranked decoy; the native's own DockQ is 1.
pub fn ranking_loss(input: &RankingInput) -> f64 {
    input
        .ranked()
        .first()
        .map(|d| 1.0 - d.true_dockq)
        .unwrap_or(f64::NAN)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.4} ± {s:.4}")
}

/// `(FI-DockQ, API-DockQ)`: the fraction of decoys whose DockQ went up, and
/// the mean percentage gain over those decoys only.
pub fn improvement_stats(initial: &[f64], refined: &[f64]) -> (f64, f64) {
    assert_eq!(initial.len(), refined.len(), "improvement_stats needs paired lists");
    if initial.is_empty() {
        return (0.0, 0.0);
    }
    let gains: Vec<f64> = initial
        .iter()
        .zip(refined)
        .filter(|(i, r)| r > i)
        .map(|(i, r)| 100.0 * (r - i) / i.max(1e-6))
        .collect();
    let fi = gains.len() as f64 / initial.len() as f64;
    let api = if gains.is_empty() {
        0.0
    } else {
        gains.iter().sum::<f64>() / gains.len() as f64
    };
    (fi, api)
}
