//! Procedural labeled "dental arch" meshes: a gum strip swept along a
//! parabola with mirrored rows of bump-shaped teeth.
//!
//! The strip lies in the x–z plane with +y up. Cell class 0 is gum; tooth
//! `t` (counted from the midline, on either side) is class `t + 1`.

mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{generate_split, make_dataset, split_seeds, DatasetEntry, Manifest, Split, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::mesh::{compute_normals, dot, TriangleMesh, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    /// Teeth per half arch; the class count is `num_teeth + 1`.
    pub num_teeth: usize,
    pub cells_target: usize,
    /// Extent of the arch along x.
    pub arch_width: f64,
    /// Distance from the arch ends to its apex along z.
    pub arch_depth: f64,
    /// Relative per-mesh jitter of the arch depth.
    pub arch_jitter: f64,
    pub strip_width: f64,
    /// Height of the rounded crown above its base step.
    pub tooth_height: f64,
    /// Vertical step at the tooth boundary.
    pub crown_step: f64,
    pub height_jitter: f64,
    pub radius_jitter: f64,
    /// Fraction of its slot a tooth spans along the arch.
    pub tooth_fill: f64,
    /// Fraction of the strip width a tooth spans across the arch.
    pub tooth_span: f64,
    /// 0 gives evenly spaced teeth; larger values widen the teeth and shift
    /// them along the arch, shrinking the gaps between neighbors.
    pub crowding: f64,
    /// Height of the gum ridge along the strip's center line.
    pub gum_height: f64,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            num_teeth: 7,
            cells_target: 1200,
            arch_width: 56.0,
            arch_depth: 30.0,
            arch_jitter: 0.1,
            strip_width: 10.0,
            tooth_height: 3.0,
            crown_step: 2.0,
            height_jitter: 0.15,
            radius_jitter: 0.1,
            tooth_fill: 0.7,
            tooth_span: 0.7,
            crowding: 0.0,
            gum_height: 0.8,
            seed: 0,
        }
    }
}

const SUPERELLIPSE_POWER: f64 = 4.0;
const CENTERLINE_SAMPLES: usize = 2048;

/// A tooth footprint in strip coordinates (arc length `u`, offset `v`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tooth {
    pub class: usize,
    pub center_u: f64,
    pub center_v: f64,
    pub radius_u: f64,
    pub radius_v: f64,
    pub height: f64,
}

impl Tooth {
    /// Superellipse level: below 1 inside the footprint.
    fn level(&self, u: f64, v: f64) -> f64 {
        ((u - self.center_u).abs() / self.radius_u).powf(SUPERELLIPSE_POWER)
            + ((v - self.center_v).abs() / self.radius_v).powf(SUPERELLIPSE_POWER)
    }
}

/// A generated mesh together with the tooth (if any) under each vertex.
#[derive(Clone, Debug)]
pub struct GeneratedArch {
    pub mesh: TriangleMesh,
    pub teeth: Vec<Tooth>,
    pub vertex_tooth: Vec<Option<usize>>,
    pub grid: (usize, usize),
}

impl ArchSpec {
    pub fn num_classes(&self) -> usize {
        self.num_teeth + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_teeth == 0 {
            return bad("num_teeth must be at least 1");
        }
        if self.cells_target < 8 {
            return bad("cells_target must be at least 8");
        }
        let positive = [
            self.arch_width,
            self.arch_depth,
            self.strip_width,
            self.tooth_height,
            self.tooth_fill,
            self.tooth_span,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("arch dimensions, tooth height, fill and span must be positive");
        }
        let unit = [self.arch_jitter, self.height_jitter, self.radius_jitter];
        if unit.iter().any(|v| !(0.0..1.0).contains(v)) {
            return bad("jitter fractions must lie in [0, 1)");
        }
        if !(self.crowding >= 0.0 && self.crowding.is_finite()) {
            return bad("crowding must be non-negative");
        }
        if [self.crown_step, self.gum_height]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return bad("crown_step and gum_height must be non-negative");
        }
        if self.tooth_span >= 1.0 {
            return bad("tooth_span must be below 1 so gum borders every tooth");
        }
        Ok(())
    }

    /// Grid resolution `(nu, nv)` from the nominal arch, so every seed
    /// yields the same cell count `2·nu·nv`.
    pub fn grid_size(&self) -> (usize, usize) {
        let length = Centerline::new(self.arch_width, self.arch_depth).length;
        let quads = self.cells_target as f64 / 2.0;
        let nv = ((quads * self.strip_width / length).sqrt().round() as usize).max(2);
        let nu = ((quads / nv as f64).round() as usize).max(2);
        (nu, nv)
    }
}

/// Arc-length parameterized parabola `z = depth·(1 − (x / half)²)`.
struct Centerline {
    xs: Vec<f64>,
    cumulative: Vec<f64>,
    half: f64,
    depth: f64,
    length: f64,
}

impl Centerline {
    fn new(width: f64, depth: f64) -> Self {
        let half = width / 2.0;
        let xs: Vec<f64> = (0..=CENTERLINE_SAMPLES)
            .map(|i| -half + width * i as f64 / CENTERLINE_SAMPLES as f64)
            .collect();
        let mut cumulative = vec![0.0];
        for w in xs.windows(2) {
            let (a, b) = (Self::point(w[0], half, depth), Self::point(w[1], half, depth));
            let d = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        let length = *cumulative.last().unwrap();
        Centerline {
            xs,
            cumulative,
            half,
            depth,
            length,
        }
    }

    fn point(x: f64, half: f64, depth: f64) -> [f64; 2] {
        [x, depth * (1.0 - (x / half).powi(2))]
    }

    /// Position and unit in-plane normal (pointing outward) at arc length `u`.
    fn frame(&self, u: f64) -> ([f64; 2], [f64; 2]) {
        let u = u.clamp(0.0, self.length);
        let i = self.cumulative.partition_point(|&c| c < u).clamp(1, self.xs.len() - 1);
        let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        let x = self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1]);
        let p = Self::point(x, self.half, self.depth);
        let dzdx = -2.0 * self.depth * x / (self.half * self.half);
        let n = (1.0 + dzdx * dzdx).sqrt();
        let tangent = [1.0 / n, dzdx / n];
        (p, [tangent[1], -tangent[0]])
    }
}

fn place_teeth(spec: &ArchSpec, length: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Tooth>> {
    let half = length / 2.0;
    let slot = half / (spec.num_teeth as f64 + 0.5);
    let fill = spec.tooth_fill * (1.0 + 0.2 * spec.crowding);
    let mut teeth = Vec::with_capacity(2 * spec.num_teeth);
    for side in [-1.0, 1.0] {
        for t in 0..spec.num_teeth {
            let mut jitter = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
            let shift = jitter(0.1 * spec.crowding) * slot;
            let radius_u = 0.5 * slot * fill * (1.0 + jitter(spec.radius_jitter));
            let radius_v = 0.5 * spec.strip_width * spec.tooth_span * (1.0 + jitter(spec.radius_jitter)).min(1.0);
            let height = spec.tooth_height * (1.0 + jitter(spec.height_jitter));
            teeth.push(Tooth {
                class: t + 1,
                center_u: half + side * ((t as f64 + 0.5) * slot + shift),
                center_v: 0.0,
                radius_u,
                radius_v,
                height,
            });
        }
    }
    teeth.sort_by(|a, b| a.center_u.total_cmp(&b.center_u));
    for w in teeth.windows(2) {
        let gap = (w[1].center_u - w[1].radius_u) - (w[0].center_u + w[0].radius_u);
        if gap <= 0.0 {
            return Err(Error::Generation(format!(
                "teeth of class {} and {} overlap by {:.3} at crowding {}",
                w[0].class, w[1].class, -gap, spec.crowding
            )));
        }
    }
    let (first, last) = (teeth[0], teeth[teeth.len() - 1]);
    if first.center_u - first.radius_u <= 0.0 || last.center_u + last.radius_u >= length {
        return Err(Error::Generation("teeth extend past the ends of the arch".into()));
    }
    Ok(teeth)
}

/// Generate one labeled arch mesh.
pub fn generate(spec: &ArchSpec) -> Result<TriangleMesh> {
    Ok(generate_detailed(spec)?.mesh)
}

pub fn generate_detailed(spec: &ArchSpec) -> Result<GeneratedArch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = spec.arch_depth
        * (1.0
            + if spec.arch_jitter > 0.0 {
                rng.gen_range(-spec.arch_jitter..=spec.arch_jitter)
            } else {
                0.0
            });
    let line = Centerline::new(spec.arch_width, depth);
    let (nu, nv) = spec.grid_size();
    let teeth = place_teeth(spec, line.length, &mut rng)?;
    let w = spec.strip_width;

    let mut vertices = Vec::with_capacity((nu + 1) * (nv + 1));
    let mut vertex_tooth = Vec::with_capacity(vertices.capacity());
    for i in 0..=nu {
        let u = line.length * i as f64 / nu as f64;
        let (p, n) = line.frame(u);
        for j in 0..=nv {
            let v = -w / 2.0 + w * j as f64 / nv as f64;
            let ridge = 1.0 - (2.0 * v / w).powi(2);
            let mut y = spec.gum_height * ridge;
            let mut owner = None;
            for (k, t) in teeth.iter().enumerate() {
                let s = t.level(u, v);
                if s < 1.0 {
                    y += spec.crown_step + t.height * (1.0 - s).powf(1.0 / SUPERELLIPSE_POWER);
                    owner = Some(k);
                    break;
                }
            }
            vertices.push([p[0] + v * n[0], y, p[1] + v * n[1]]);
            vertex_tooth.push(owner);
        }
    }
    let id = |i: usize, j: usize| i * (nv + 1) + j;
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    // Orient faces so normals point up (+y).
    let probe = TriangleMesh::new(vertices.clone(), faces.clone())?;
    if compute_normals(&probe).face.iter().map(|n| n[1]).sum::<f64>() < 0.0 {
        faces.iter_mut().for_each(|f| f.swap(1, 2));
    }
    let labels: Vec<usize> = faces
        .iter()
        .map(|f| {
            teeth
                .iter()
                .enumerate()
                .find(|(k, _)| f.iter().filter(|&&v| vertex_tooth[v] == Some(*k)).count() >= 2)
                .map_or(0, |(_, t)| t.class)
        })
        .collect();
    let mut present = vec![false; spec.num_classes()];
    labels.iter().for_each(|&l| present[l] = true);
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::Generation(format!(
            "class {c} received no cells; raise cells_target above {}",
            spec.cells_target
        )));
    }
    let mesh = TriangleMesh::new(vertices, faces)?.with_labels(labels)?;
    Ok(GeneratedArch {
        mesh,
        teeth,
        vertex_tooth,
        grid: (nu, nv),
    })
}

/// Angle in degrees between the unit normals of two faces.
fn normal_angle(a: Vec3, b: Vec3) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// For every cell with vertices both on and off a tooth, the smallest
/// normal angle (degrees) to an edge-adjacent cell lying entirely on gum.
/// Cells without such a neighbor are skipped.
pub fn boundary_crease_angles(arch: &GeneratedArch) -> Vec<(usize, f64)> {
    let mesh = &arch.mesh;
    let normals = compute_normals(mesh).face;
    let mut by_edge: std::collections::HashMap<(usize, usize), Vec<usize>> = std::collections::HashMap::new();
    for (f, face) in mesh.faces().iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (face[e], face[(e + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    let on_tooth = |f: usize| {
        mesh.faces()[f]
            .iter()
            .filter(|&&v| arch.vertex_tooth[v].is_some())
            .count()
    };
    let mut out = Vec::new();
    for (f, face) in mesh.faces().iter().enumerate() {
        let n = on_tooth(f);
        if n == 0 || n == 3 {
            continue;
        }
        let mut best: Option<f64> = None;
        for e in 0..3 {
            let (a, b) = (face[e], face[(e + 1) % 3]);
            for &g in &by_edge[&(a.min(b), a.max(b))] {
                if g != f && on_tooth(g) == 0 {
                    let angle = normal_angle(normals[f], normals[g]);
                    best = Some(best.map_or(angle, |b: f64| b.min(angle)));
                }
            }
        }
        if let Some(a) = best {
            out.push((f, a));
        }
    }
    out
}

#[cfg(test)]
mod tests;
