use nalgebra::Matrix3;

use super::{ComplexStructure, Vec3};

/// Local coordinate system of one residue. Columns of `rotation` are the
/// frame axes expressed in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidueFrame {
    pub origin: Vec3,
    pub rotation: Matrix3<f64>,
}

/// One frame per residue in traversal order.
///
/// The frame sits on Cα with e1 along Cα→C and e2 the component of Cα→N
/// orthogonal to e1. Residues without a full N/CA/C backbone, or with a
/// collapsed one, fall back to the residue centroid and the identity.
pub fn build_residue_frames(s: &ComplexStructure) -> Vec<ResidueFrame> {
    s.residues()
        .map(|(_, residue)| {
            let backbone = (residue.atom("N"), residue.atom("CA"), residue.atom("C"));
            if let (Some(n), Some(ca), Some(c)) = backbone {
                if let Some(rotation) = backbone_rotation(&n.coord, &ca.coord, &c.coord) {
                    return ResidueFrame {
                        origin: ca.coord,
                        rotation,
                    };
                }
            }
            ResidueFrame {
                origin: residue.centroid(),
                rotation: Matrix3::identity(),
            }
        })
        .collect()
}

fn backbone_rotation(n: &Vec3, ca: &Vec3, c: &Vec3) -> Option<Matrix3<f64>> {
    let to_c = c - ca;
    let to_n = n - ca;
    let e1 = to_c.try_normalize(1e-9)?;
    let e2 = (to_n - e1 * to_n.dot(&e1)).try_normalize(1e-9)?;
    let e3 = e1.cross(&e2);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structio::fixtures::structure;
    use nalgebra::Rotation3;

    #[test]
    fn axis_aligned_backbone_is_identity() {
        let s = structure(&[(
            "A",
            1,
            "ALA",
            vec![("N", [0.0, 1.4, 0.0]), ("CA", [0.0, 0.0, 0.0]), ("C", [1.5, 0.0, 0.0])],
        )]);
        let f = build_residue_frames(&s);
        assert_eq!(f.len(), 1);
        assert!((f[0].rotation - Matrix3::identity()).amax() < 1e-15);
        assert_eq!(f[0].origin, Vec3::zeros());
    }

    #[test]
    fn missing_nitrogen_falls_back() {
        let s = structure(&[(
            "A",
            1,
            "ALA",
            vec![("CA", [1.0, 0.0, 0.0]), ("C", [3.0, 0.0, 0.0])],
        )]);
        let f = build_residue_frames(&s);
        assert_eq!(f[0].rotation, Matrix3::identity());
        assert_eq!(f[0].origin, Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn frames_rotate_with_the_structure() {
        let s = structure(&[
            ("A", 1, "ALA", vec![("N", [0.1, 1.4, 0.2]), ("CA", [0.0, 0.0, 0.0]), ("C", [1.5, 0.1, -0.2])]),
            ("A", 2, "GLY", vec![("N", [2.2, 1.0, 0.5]), ("CA", [3.1, 1.9, 0.4]), ("C", [4.5, 1.2, 1.0])]),
            ("A", 3, "SER", vec![("N", [5.0, 0.3, 2.0]), ("CA", [6.3, -0.2, 2.2]), ("C", [7.0, 0.9, 3.1])]),
        ]);
        let u = *Rotation3::from_euler_angles(0.3, -1.1, 2.0).matrix();
        let b = Vec3::new(5.0, -3.0, 12.0);
        let before = build_residue_frames(&s);
        let after = build_residue_frames(&s.transformed(&u, &b));
        for (f0, f1) in before.iter().zip(&after) {
            assert!((u * f0.rotation - f1.rotation).amax() < 1e-12);
            assert!((u * f0.origin + b - f1.origin).amax() < 1e-12);
            assert!((f1.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }
}
