use nalgebra::{Matrix3, SymmetricEigen};

use super::{StructureError, Vec3};

/// Rigid transform taking the mobile points onto the target:
/// `target ≈ rotation · mobile + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superposition {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub rmsd: f64,
}

impl Superposition {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

pub fn apply_transform(sup: &Superposition, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| sup.apply(p)).collect()
}

/// Plain root-mean-square deviation without any fitting.
pub fn rmsd(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len(), "rmsd needs equal-length point sets");
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (sum / a.len() as f64).sqrt()
}

fn centroid(points: &[Vec3], weights: &[f64], total: f64) -> Vec3 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| p * *w)
        .sum::<Vec3>()
        / total
}

fn is_degenerate(points: &[Vec3], weights: &[f64], center: &Vec3) -> bool {
    let mut scatter = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let d = p - center;
        scatter += d * d.transpose() * *w;
    }
    let mut eig = SymmetricEigen::new(scatter).eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    eig[0] <= 0.0 || eig[1] <= 1e-12 * eig[0]
}

/// Least-squares rigid superposition of `mobile` onto `target`.
///
/// The rotation is always proper; when the unconstrained optimum is a
/// reflection the smallest singular direction is flipped.
pub fn kabsch_superpose(
    mobile: &[Vec3],
    target: &[Vec3],
    weights: Option<&[f64]>,
) -> Result<Superposition, StructureError> {
    let m = mobile.len();
    if m != target.len() {
        return Err(StructureError::Alignment(format!(
            "point sets differ in size ({m} vs {})",
            target.len()
        )));
    }
    if m < 3 {
        return Err(StructureError::Alignment(format!(
            "need at least 3 points, got {m}"
        )));
    }
    let uniform;
    let weights = match weights {
        Some(w) => {
            if w.len() != m || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(StructureError::Alignment(
                    "weights must be finite, non-negative and one per point".into(),
                ));
            }
            w
        }
        None => {
            uniform = vec![1.0; m];
            &uniform
        }
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(StructureError::Alignment("weights sum to zero".into()));
    }

    let mobile_center = centroid(mobile, weights, total);
    let target_center = centroid(target, weights, total);
    if is_degenerate(mobile, weights, &mobile_center)
        || is_degenerate(target, weights, &target_center)
    {
        return Err(StructureError::Alignment(
            "point set is collinear or coincident".into(),
        ));
    }

    let mut cov = Matrix3::zeros();
    for ((p, q), w) in mobile.iter().zip(target).zip(weights) {
        cov += (p - mobile_center) * (q - target_center).transpose() * *w;
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = target_center - rotation * mobile_center;

    let sq: f64 = mobile
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, q), w)| w * (rotation * p + translation - q).norm_squared())
        .sum();
    Ok(Superposition {
        rotation,
        translation,
        rmsd: (sq / total).sqrt(),
    })
}
