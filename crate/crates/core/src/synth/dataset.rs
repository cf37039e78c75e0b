use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{generate, ArchSpec};
use crate::error::{Error, Result};
use crate::mesh::{load_mesh, read_labels, write_labels, write_obj, TriangleMesh};

pub const MANIFEST_FILE: &str = "manifest.tsv";

const SEED_STRIDE: u64 = 1_000_003;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One mesh of a dataset. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub mesh: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
    pub seed: u64,
}

/// Tab-separated list of `mesh, labels, split, seed` rows under a header.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Manifest {
    pub const HEADER: &'static str = "mesh\tlabels\tsplit\tseed";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.mesh.display(),
                e.labels.display(),
                e.split.name(),
                e.seed
            );
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim_end() == Self::HEADER => {}
            _ => {
                return Err(Error::Format {
                    line: Some(1),
                    msg: format!("expected header {:?}", Self::HEADER),
                })
            }
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            let bad = |msg: String| Error::Format { line: Some(n + 1), msg };
            let cols: Vec<&str> = line.trim_end().split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, got {}", cols.len())));
            }
            let split = match cols[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(bad(format!("unknown split {s:?}"))),
            };
            let seed = cols[3].parse().map_err(|_| bad(format!("bad seed {:?}", cols[3])))?;
            entries.push(DatasetEntry {
                mesh: PathBuf::from(cols[0]),
                labels: PathBuf::from(cols[1]),
                split,
                seed,
            });
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Load every mesh of `split` with its labels attached.
    pub fn load_split(&self, split: Split) -> Result<Vec<TriangleMesh>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mesh = load_mesh(self.resolve(&e.mesh))?;
                mesh.with_labels(read_labels(self.resolve(&e.labels))?)
            })
            .collect()
    }
}

fn split_seed(base: u64, split: Split, i: usize) -> u64 {
    let offset = 2 * i as u64 + u64::from(split == Split::Test);
    base.wrapping_mul(SEED_STRIDE).wrapping_add(offset)
}

/// Generate `n_train + n_test` meshes into `dir` with a manifest. Training
/// seeds are even offsets from the base and test seeds odd, so the splits
/// never share a mesh. Existing files are never overwritten.
pub fn make_dataset(spec: &ArchSpec, n_train: usize, n_test: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Usage(
            "a dataset needs at least one training and one test mesh".into(),
        ));
    }
    let mut entries = Vec::new();
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for i in 0..n {
            let stem = format!("{}_{i:03}", split.name());
            entries.push(DatasetEntry {
                mesh: PathBuf::from(format!("{stem}.obj")),
                labels: PathBuf::from(format!("{stem}.labels")),
                split,
                seed: split_seed(seed, split, i),
            });
        }
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    let targets = manifest
        .entries
        .iter()
        .flat_map(|e| [manifest.resolve(&e.mesh), manifest.resolve(&e.labels)])
        .chain([dir.join(MANIFEST_FILE)]);
    for t in targets {
        if t.exists() {
            return Err(Error::file(
                &t,
                io::Error::new(io::ErrorKind::AlreadyExists, "refusing to overwrite an existing file"),
            ));
        }
    }
    let meshes = manifest
        .entries
        .iter()
        .map(|e| {
            generate(&ArchSpec {
                seed: e.seed,
                ..spec.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    for (e, mesh) in manifest.entries.iter().zip(&meshes) {
        write_obj(mesh, manifest.resolve(&e.mesh))?;
        write_labels(
            mesh.labels().expect("generated meshes are labeled"),
            manifest.resolve(&e.labels),
        )?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// Seeds `make_dataset` assigns to the train and test meshes.
pub fn split_seeds(base: u64, n_train: usize, n_test: usize) -> (Vec<u64>, Vec<u64>) {
    (
        (0..n_train).map(|i| split_seed(base, Split::Train, i)).collect(),
        (0..n_test).map(|i| split_seed(base, Split::Test, i)).collect(),
    )
}

/// The meshes `make_dataset` would write, kept in memory.
pub fn generate_split(
    spec: &ArchSpec,
    base: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<TriangleMesh>, Vec<TriangleMesh>)> {
    let (tr, te) = split_seeds(base, n_train, n_test);
    let gen = |seeds: Vec<u64>| {
        seeds
            .into_iter()
            .map(|seed| generate(&ArchSpec { seed, ..spec.clone() }))
            .collect::<Result<Vec<_>>>()
    };
    Ok((gen(tr)?, gen(te)?))
}
