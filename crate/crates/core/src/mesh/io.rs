use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{TriangleMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::Format {
                line: None,
                msg: format!("{}: unknown mesh extension (want .obj or .ply)", path.display()),
            }),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

/// Load an OBJ or ASCII PLY mesh, choosing the parser from the extension.
/// Faces keep file order, so cell `i` is the `i`-th face record.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = read_text(path)?;
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => read_obj(&text),
        MeshFormat::Ply => read_ply(&text).map(|p| p.mesh),
    }
}

fn parse_coord(tok: Option<&str>, line: usize) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::Parse {
        line,
        msg: "missing coordinate".into(),
    })?;
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number {tok:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite coordinate {tok:?}"),
        });
    }
    Ok(v)
}

/// Parse Wavefront OBJ `v`/`f` records. Texture and normal references in
/// face records (`f 1/2/3 ...`) are ignored; negative indices are relative.
pub fn read_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let mut toks = body.split_whitespace();
        match toks.next() {
            Some("v") => {
                let v = [
                    parse_coord(toks.next(), line)?,
                    parse_coord(toks.next(), line)?,
                    parse_coord(toks.next(), line)?,
                ];
                vertices.push(v);
            }
            Some("f") => {
                let refs: Vec<&str> = toks.collect();
                if refs.len() != 3 {
                    return Err(Error::Format {
                        line: Some(line),
                        msg: format!("only triangular faces are supported, found {} vertices", refs.len()),
                    });
                }
                let mut face = [0usize; 3];
                for (slot, r) in face.iter_mut().zip(&refs) {
                    let head = r.split('/').next().unwrap_or("");
                    let ix: i64 = head.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad vertex reference {r:?}"),
                    })?;
                    let resolved = if ix > 0 { ix - 1 } else { vertices.len() as i64 + ix };
                    if ix == 0 || resolved < 0 {
                        return Err(Error::Parse {
                            line,
                            msg: format!("vertex reference {ix} out of range"),
                        });
                    }
                    *slot = resolved as usize;
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

/// Write vertices and faces as OBJ. Coordinates use the shortest
/// round-tripping decimal form, so re-reading is exact.
pub fn write_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(mesh.num_vertices() * 40 + mesh.num_cells() * 20);
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    write_new(path.as_ref(), &out)
}

fn write_new(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

/// One class id per line, in face order.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("bad label {:?}", l.trim()),
            })
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 2);
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    write_new(path.as_ref(), &out)
}

/// Parsed PLY: the mesh plus per-face colors when the file carries them.
#[derive(Clone, Debug)]
pub struct PlyMesh {
    pub mesh: TriangleMesh,
    pub face_colors: Option<Vec<[u8; 3]>>,
}

#[derive(Debug)]
enum Prop {
    Scalar(String),
    List(String),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

fn fmt_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        line: Some(line),
        msg: msg.into(),
    }
}

/// Parse an ASCII PLY with `vertex` (x, y, z) and `face` (vertex index list,
/// optional red/green/blue) elements. Other elements are skipped.
pub fn read_ply(text: &str) -> Result<PlyMesh> {
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(fmt_err(1, "missing 'ply' magic")),
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (line, l) = lines
            .next()
            .ok_or_else(|| fmt_err(0, "header ended without end_header"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(fmt_err(line, format!("only ascii ply is supported, got {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| fmt_err(line, format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| fmt_err(line, "property before element"))?
                .props
                .push(Prop::List(name.to_string())),
            ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| fmt_err(line, "property before element"))?
                .props
                .push(Prop::Scalar(name.to_string())),
            ["end_header"] => break,
            _ => return Err(fmt_err(line, format!("unrecognized header line {l:?}"))),
        }
    }

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let mut has_color = false;
    for el in &elements {
        for _ in 0..el.count {
            let (line, l) = lines
                .next()
                .ok_or_else(|| fmt_err(0, format!("file ends inside element {}", el.name)))?;
            let mut toks = l.split_whitespace();
            let mut xyz = [None; 3];
            let mut rgb = [None; 3];
            let mut list: Option<Vec<usize>> = None;
            for p in &el.props {
                match p {
                    Prop::Scalar(name) => {
                        let tok = toks
                            .next()
                            .ok_or_else(|| fmt_err(line, format!("missing property {name}")))?;
                        match (el.name.as_str(), name.as_str()) {
                            ("vertex", "x") => xyz[0] = Some(parse_coord(Some(tok), line)?),
                            ("vertex", "y") => xyz[1] = Some(parse_coord(Some(tok), line)?),
                            ("vertex", "z") => xyz[2] = Some(parse_coord(Some(tok), line)?),
                            ("face", c @ ("red" | "green" | "blue")) => {
                                let v: u8 = tok.parse().map_err(|_| fmt_err(line, format!("bad color {tok:?}")))?;
                                let slot = match c {
                                    "red" => 0,
                                    "green" => 1,
                                    _ => 2,
                                };
                                rgb[slot] = Some(v);
                            }
                            _ => {}
                        }
                    }
                    Prop::List(name) => {
                        let count: usize = toks
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| fmt_err(line, format!("bad list length for {name}")))?;
                        let mut items = Vec::with_capacity(count);
                        for _ in 0..count {
                            let t = toks.next().ok_or_else(|| fmt_err(line, "truncated list"))?;
                            items.push(
                                t.parse::<usize>()
                                    .map_err(|_| fmt_err(line, format!("bad index {t:?}")))?,
                            );
                        }
                        if name == "vertex_indices" || name == "vertex_index" {
                            list = Some(items);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    let v = [xyz[0], xyz[1], xyz[2]];
                    if v.iter().any(Option::is_none) {
                        return Err(fmt_err(line, "vertex element lacks x/y/z"));
                    }
                    vertices.push(v.map(|c| c.unwrap()));
                }
                "face" => {
                    let idx = list.ok_or_else(|| fmt_err(line, "face without vertex_indices"))?;
                    if idx.len() != 3 {
                        return Err(fmt_err(
                            line,
                            format!("only triangular faces are supported, found {} vertices", idx.len()),
                        ));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                    if rgb.iter().all(Option::is_some) {
                        has_color = true;
                        colors.push(rgb.map(|c| c.unwrap()));
                    }
                }
                _ => {}
            }
        }
    }
    let mesh = TriangleMesh::new(vertices, faces)?;
    let face_colors = (has_color && colors.len() == mesh.num_cells()).then_some(colors);
    Ok(PlyMesh { mesh, face_colors })
}

/// Class-id → RGB lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

const BASE_COLORS: [[u8; 3]; 12] = [
    [255, 162, 143],
    [238, 50, 51],
    [255, 214, 0],
    [110, 196, 64],
    [47, 133, 226],
    [157, 83, 211],
    [255, 128, 0],
    [0, 200, 200],
    [200, 0, 120],
    [120, 90, 40],
    [60, 60, 60],
    [150, 220, 255],
];

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Self {
        Palette { colors }
    }

    /// Distinct colors for `classes` classes; class 0 (gingiva) is pink.
    pub fn for_classes(classes: usize) -> Self {
        let colors = (0..classes)
            .map(|c| {
                let base = BASE_COLORS[c % BASE_COLORS.len()];
                let round = (c / BASE_COLORS.len()) as u8;
                base.map(|v| v.wrapping_add(round.wrapping_mul(37)))
            })
            .collect();
        Palette { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class: usize) -> Option<[u8; 3]> {
        self.colors.get(class).copied()
    }

    /// Inverse lookup; the first class with this color wins.
    pub fn class_of(&self, color: [u8; 3]) -> Option<usize> {
        self.colors.iter().position(|&c| c == color)
    }
}

/// Write an ASCII PLY whose faces carry `red`/`green`/`blue` from `palette`.
pub fn export_colored_mesh(
    mesh: &TriangleMesh,
    classes: &[usize],
    palette: &Palette,
    path: impl AsRef<Path>,
) -> Result<()> {
    if palette.is_empty() {
        return Err(Error::Range("palette has no colors".into()));
    }
    if classes.len() != mesh.num_cells() {
        return Err(Error::Data(format!(
            "{} classes for {} cells",
            classes.len(),
            mesh.num_cells()
        )));
    }
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\n\
         property double z\nelement face {}\nproperty list uchar int vertex_indices\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        mesh.num_vertices(),
        mesh.num_cells()
    );
    for v in mesh.vertices() {
        let _ = writeln!(out, "{} {} {}", v[0], v[1], v[2]);
    }
    for (cell, (f, &c)) in mesh.faces().iter().zip(classes).enumerate() {
        let [r, g, b] = palette.color(c).ok_or_else(|| {
            Error::Range(format!(
                "cell {cell} has class {c} but the palette covers {} classes",
                palette.len()
            ))
        })?;
        let _ = writeln!(out, "3 {} {} {} {r} {g} {b}", f[0], f[1], f[2]);
    }
    write_new(path.as_ref(), &out)
}
