use rand::Rng;

use crate::mesh::{TriangleMesh, Vec3};

/// A sampled rigid transform: rotation about the vertical axis through the
/// mesh centroid, then a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub translation: Vec3,
}

/// Rotation matrix about +y.
pub fn rotation_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn apply_matrix(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        angle: 0.0,
        translation: [0.0; 3],
    };

    /// Per-axis translation in `[-translation_range, translation_range]`
    /// and an angle in `[-rotation_range, rotation_range]`.
    pub fn sample<R: Rng>(rng: &mut R, translation_range: f64, rotation_range: f64) -> Self {
        let mut uniform = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let angle = uniform(rotation_range);
        let translation = [0; 3].map(|_| uniform(translation_range));
        Augmentation { angle, translation }
    }

    pub fn apply(&self, mesh: &TriangleMesh) -> TriangleMesh {
        if *self == Self::IDENTITY {
            return mesh.clone();
        }
        let pivot = mesh.centroid();
        let r = rotation_y(self.angle);
        let t = self.translation;
        mesh.map_vertices(|v| {
            let p = apply_matrix(&r, [v[0] - pivot[0], v[1] - pivot[1], v[2] - pivot[2]]);
            [0, 1, 2].map(|i| p[i] + pivot[i] + t[i])
        })
    }
}

/// Random rigid augmentation of `mesh`. Faces, their order and labels are
/// untouched; normals follow from the moved vertices.
pub fn augment<R: Rng>(mesh: &TriangleMesh, rng: &mut R, translation_range: f64, rotation_range: f64) -> TriangleMesh {
    Augmentation::sample(rng, translation_range, rotation_range).apply(mesh)
}
