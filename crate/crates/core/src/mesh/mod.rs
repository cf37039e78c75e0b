//! Triangle meshes, per-cell geometric features, and mesh file formats.

mod io;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use io::{
    export_colored_mesh, load_mesh, read_labels, read_obj, read_ply, write_labels, write_obj, MeshFormat, Palette,
    PlyMesh,
};

pub type Vec3 = [f64; 3];

/// Width of each feature block (three vertices plus the centroid, 3-D each).
pub const BLOCK_WIDTH: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    labels: Option<Vec<usize>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (i, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Data(format!("vertex {i} has a non-finite coordinate")));
            }
        }
        for (i, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&ix| ix >= vertices.len()) {
                return Err(Error::Data(format!(
                    "face {i} references vertex {bad} but the mesh has {}",
                    vertices.len()
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Data(format!("face {i} repeats a vertex: {f:?}")));
            }
        }
        Ok(TriangleMesh {
            vertices,
            faces,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.set_labels(labels)?;
        Ok(self)
    }

    pub fn set_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.faces.len() {
            return Err(Error::Data(format!(
                "{} labels for {} faces",
                labels.len(),
                self.faces.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_cells(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn cell_centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.faces[face].map(|i| self.vertices[i]);
        [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0)
    }

    /// Mean of all cell centroids.
    pub fn centroid(&self) -> Vec3 {
        let mut acc = [0.0; 3];
        for f in 0..self.faces.len() {
            let c = self.cell_centroid(f);
            (0..3).for_each(|k| acc[k] += c[k]);
        }
        let n = self.faces.len().max(1) as f64;
        acc.map(|v| v / n)
    }

    /// Apply `f` to every vertex position. Faces and labels are untouched.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Translate so the mean cell centroid sits at the origin.
    pub fn centered(&self) -> TriangleMesh {
        let c = self.centroid();
        self.map_vertices(|v| sub(v, c))
    }

    /// Same geometry with every face's winding reversed.
    pub fn flipped(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
            labels: self.labels.clone(),
        }
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Emitted when a face (or an isolated vertex) has no usable normal and the
/// +z sentinel was substituted.
#[derive(Clone, Debug, PartialEq)]
pub enum NormalWarning {
    DegenerateFace { face: usize, area: f64 },
    IsolatedVertex { vertex: usize },
}

#[derive(Clone, Debug)]
pub struct Normals {
    pub face: Vec<Vec3>,
    pub vertex: Vec<Vec3>,
    pub warnings: Vec<NormalWarning>,
}

const SENTINEL_NORMAL: Vec3 = [0.0, 0.0, 1.0];
const AREA_EPS: f64 = 1e-14;

/// Face normals from counter-clockwise winding, and area-weighted vertex
/// normals. Every returned vector has unit length.
pub fn compute_normals(mesh: &TriangleMesh) -> Normals {
    let mut warnings = Vec::new();
    let mut vertex_acc = vec![[0.0; 3]; mesh.num_vertices()];
    let mut face = Vec::with_capacity(mesh.num_cells());
    for (fi, &[a, b, c]) in mesh.faces().iter().enumerate() {
        let [pa, pb, pc] = [a, b, c].map(|i| mesh.vertices[i]);
        // |e1 × e2| is twice the area, so summing raw cross products weights
        // each face by its area.
        let n = cross(sub(pb, pa), sub(pc, pa));
        let len = norm(n);
        if len <= AREA_EPS {
            warnings.push(NormalWarning::DegenerateFace {
                face: fi,
                area: len / 2.0,
            });
            face.push(SENTINEL_NORMAL);
            continue;
        }
        face.push(n.map(|v| v / len));
        for v in [a, b, c] {
            (0..3).for_each(|k| vertex_acc[v][k] += n[k]);
        }
    }
    let vertex = vertex_acc
        .into_iter()
        .enumerate()
        .map(|(vi, n)| {
            let len = norm(n);
            if len <= AREA_EPS {
                warnings.push(NormalWarning::IsolatedVertex { vertex: vi });
                SENTINEL_NORMAL
            } else {
                n.map(|v| v / len)
            }
        })
        .collect();
    Normals { face, vertex, warnings }
}

/// Per-cell input encoding: an `M × 12` coordinate block and an `M × 12`
/// normal block. Within each block the 3-vectors are ordered as the face's
/// stored vertices, then the centroid (or face normal).
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatureMatrix<T> {
    pub coords: Tensor<T>,
    pub normals: Tensor<T>,
}

impl<T: Real> CellFeatureMatrix<T> {
    pub fn num_cells(&self) -> usize {
        self.coords.shape()[0]
    }

    /// The full `M × 24` row encoding (coordinates then normals).
    pub fn combined(&self) -> Tensor<T> {
        let m = self.num_cells();
        let mut data = Vec::with_capacity(m * 2 * BLOCK_WIDTH);
        for i in 0..m {
            data.extend_from_slice(self.coords.row(i));
            data.extend_from_slice(self.normals.row(i));
        }
        Tensor::new(vec![m, 2 * BLOCK_WIDTH], data).expect("consistent blocks")
    }

    pub fn cast<U: Real>(&self) -> CellFeatureMatrix<U> {
        CellFeatureMatrix {
            coords: self.coords.cast(),
            normals: self.normals.cast(),
        }
    }

    /// Stack several meshes' features along the cell axis.
    pub fn stack(parts: &[CellFeatureMatrix<T>]) -> Self {
        let m: usize = parts.iter().map(Self::num_cells).sum();
        let mut coords = Vec::with_capacity(m * BLOCK_WIDTH);
        let mut normals = Vec::with_capacity(m * BLOCK_WIDTH);
        for p in parts {
            coords.extend_from_slice(p.coords.data());
            normals.extend_from_slice(p.normals.data());
        }
        CellFeatureMatrix {
            coords: Tensor::new(vec![m, BLOCK_WIDTH], coords).expect("block width"),
            normals: Tensor::new(vec![m, BLOCK_WIDTH], normals).expect("block width"),
        }
    }
}

/// Build the 24-D cell encoding. With `center`, the mesh centroid (mean cell
/// centroid) is subtracted from every coordinate first.
pub fn build_cell_features<T: Real>(mesh: &TriangleMesh, normals: &Normals, center: bool) -> CellFeatureMatrix<T> {
    let offset = if center { mesh.centroid() } else { [0.0; 3] };
    let m = mesh.num_cells();
    let mut coords = Vec::with_capacity(m * BLOCK_WIDTH);
    let mut norms = Vec::with_capacity(m * BLOCK_WIDTH);
    for (fi, face) in mesh.faces().iter().enumerate() {
        for &v in face {
            coords.extend(sub(mesh.vertices[v], offset).map(T::of));
            norms.extend(normals.vertex[v].map(T::of));
        }
        coords.extend(sub(mesh.cell_centroid(fi), offset).map(T::of));
        norms.extend(normals.face[fi].map(T::of));
    }
    CellFeatureMatrix {
        coords: Tensor::new(vec![m, BLOCK_WIDTH], coords).expect("block width"),
        normals: Tensor::new(vec![m, BLOCK_WIDTH], norms).expect("block width"),
    }
}

/// Convenience: normals plus features in one call.
pub fn mesh_features<T: Real>(mesh: &TriangleMesh, center: bool) -> CellFeatureMatrix<T> {
    build_cell_features(mesh, &compute_normals(mesh), center)
}

/// Result of [`subsample_cells`]: the reduced mesh and, for each kept cell,
/// its index in the source mesh.
#[derive(Clone, Debug)]
pub struct Subsample {
    pub mesh: TriangleMesh,
    pub face_map: Vec<usize>,
}

/// Keep a uniformly random subset of `target` faces (in their original
/// order), compacting the vertex list. Labels travel with their faces.
pub fn subsample_cells(mesh: &TriangleMesh, target: usize, seed: u64) -> Result<Subsample> {
    if target == 0 || target > mesh.num_cells() {
        return Err(Error::Usage(format!(
            "subsample target must be in 1..={}, got {target}",
            mesh.num_cells()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, mesh.num_cells(), target).into_vec();
    keep.sort_unstable();

    let mut remap = vec![usize::MAX; mesh.num_vertices()];
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(target);
    for &f in &keep {
        let face = mesh.faces[f].map(|v| {
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(mesh.vertices[v]);
            }
            remap[v]
        });
        faces.push(face);
    }
    let labels = mesh.labels.as_ref().map(|l| keep.iter().map(|&f| l[f]).collect());
    Ok(Subsample {
        mesh: TriangleMesh {
            vertices,
            faces,
            labels,
        },
        face_map: keep,
    })
}
