use std::collections::BTreeSet;

use super::*;
use crate::mesh::{compute_normals, mesh_features, norm};

fn histogram(mesh: &TriangleMesh, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    mesh.labels().unwrap().iter().for_each(|&l| h[l] += 1);
    h
}

#[test]
fn single_tooth_gives_two_classes() {
    let spec = ArchSpec {
        num_teeth: 1,
        crowding: 0.0,
        ..ArchSpec::default()
    };
    let mesh = generate(&spec).unwrap();
    let labels: BTreeSet<usize> = mesh.labels().unwrap().iter().copied().collect();
    assert_eq!(labels, BTreeSet::from([0, 1]));
}

#[test]
fn generation_is_deterministic() {
    let spec = ArchSpec {
        seed: 42,
        ..ArchSpec::default()
    };
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let other = generate(&ArchSpec {
        seed: 43,
        ..spec.clone()
    })
    .unwrap();
    assert_ne!(other, generate(&spec).unwrap());
    assert_eq!(other.num_cells(), generate(&spec).unwrap().num_cells());
}

#[test]
fn default_histogram() {
    for seed in 0..5 {
        let spec = ArchSpec {
            seed,
            ..ArchSpec::default()
        };
        let h = histogram(&generate(&spec).unwrap(), 8);
        assert!(h[1..].iter().all(|&c| c > 0 && c < h[0]), "{h:?}");
    }
}

#[test]
fn cell_count_tracks_target() {
    for target in [300, 800, 1200, 2500, 4000] {
        let spec = ArchSpec {
            cells_target: target,
            ..ArchSpec::default()
        };
        let m = generate(&spec).unwrap().num_cells() as f64;
        assert!((m - target as f64).abs() <= 0.1 * target as f64, "{target}: {m}");
    }
}

#[test]
fn meshes_are_valid_and_face_up() {
    for seed in 0..5 {
        let mesh = generate(&ArchSpec {
            seed,
            ..ArchSpec::default()
        })
        .unwrap();
        let normals = compute_normals(&mesh);
        assert!(normals.warnings.is_empty(), "{:?}", normals.warnings);
        assert!(normals.face.iter().all(|n| (norm(*n) - 1.0).abs() < 1e-12));
        assert!(normals.face.iter().all(|n| n[1] > 0.0));
        assert_eq!(mesh.labels().unwrap().len(), mesh.num_cells());
    }
}

#[test]
fn label_boundaries_are_creases() {
    for (teeth, seed) in [(7, 0), (7, 1), (4, 2), (4, 3), (1, 4)] {
        let arch = generate_detailed(&ArchSpec {
            num_teeth: teeth,
            seed,
            ..ArchSpec::default()
        })
        .unwrap();
        let angles = boundary_crease_angles(&arch);
        assert!(!angles.is_empty());
        for (cell, a) in angles {
            assert!(a > 30.0, "cell {cell}: {a:.1} degrees");
        }
    }
}

#[test]
fn every_boundary_cell_touches_a_tooth() {
    let arch = generate_detailed(&ArchSpec::default()).unwrap();
    let labels = arch.mesh.labels().unwrap();
    for (f, face) in arch.mesh.faces().iter().enumerate() {
        let owners: Vec<Option<usize>> = face.iter().map(|&v| arch.vertex_tooth[v]).collect();
        let on = owners.iter().filter(|o| o.is_some()).count();
        if labels[f] == 0 {
            assert!(on <= 1);
        } else {
            assert!(on >= 2);
            let t = owners.iter().flatten().next().unwrap();
            assert_eq!(arch.teeth[*t].class, labels[f]);
        }
    }
}

#[test]
fn mirrored_halves_share_classes() {
    let arch = generate_detailed(&ArchSpec::default()).unwrap();
    assert_eq!(arch.teeth.len(), 14);
    let classes: Vec<usize> = arch.teeth.iter().map(|t| t.class).collect();
    assert_eq!(classes, [7, 6, 5, 4, 3, 2, 1, 1, 2, 3, 4, 5, 6, 7]);
}

#[test]
fn crowding_bound() {
    assert!(generate(&ArchSpec {
        crowding: 0.5,
        ..ArchSpec::default()
    })
    .is_ok());
    let err = generate(&ArchSpec {
        crowding: 3.0,
        ..ArchSpec::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Generation(_)), "{err}");
}

#[test]
fn too_coarse_grid_is_a_generation_error() {
    let err = generate(&ArchSpec {
        cells_target: 40,
        ..ArchSpec::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Generation(_)), "{err}");
}

#[test]
fn invalid_specs() {
    for spec in [
        ArchSpec {
            num_teeth: 0,
            ..ArchSpec::default()
        },
        ArchSpec {
            strip_width: 0.0,
            ..ArchSpec::default()
        },
        ArchSpec {
            tooth_span: 1.2,
            ..ArchSpec::default()
        },
        ArchSpec {
            height_jitter: 1.5,
            ..ArchSpec::default()
        },
        ArchSpec {
            crowding: -1.0,
            ..ArchSpec::default()
        },
    ] {
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}

#[test]
fn dataset_files_and_manifest() {
    let spec = ArchSpec {
        cells_target: 300,
        num_teeth: 3,
        ..ArchSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(&spec, 20, 5, 7, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 25);
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 51);
    let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);

    let train: BTreeSet<u64> = m
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.seed)
        .collect();
    let test: BTreeSet<u64> = m
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| e.seed)
        .collect();
    assert_eq!((train.len(), test.len()), (20, 5));
    assert!(train.is_disjoint(&test));

    for split in [Split::Train, Split::Test] {
        for mesh in loaded.load_split(split).unwrap() {
            assert!(compute_normals(&mesh).warnings.is_empty());
            let f = mesh_features::<f32>(&mesh, true);
            assert!(f.coords.is_finite() && f.normals.is_finite());
            assert_eq!(f.num_cells(), mesh.labels().unwrap().len());
        }
    }

    let again = tempfile::tempdir().unwrap();
    make_dataset(&spec, 20, 5, 7, again.path()).unwrap();
    for e in &m.entries {
        for p in [&e.mesh, &e.labels] {
            assert_eq!(
                std::fs::read(dir.path().join(p)).unwrap(),
                std::fs::read(again.path().join(p)).unwrap()
            );
        }
    }
}

#[test]
fn dataset_refuses_to_overwrite() {
    let spec = ArchSpec {
        cells_target: 300,
        num_teeth: 2,
        ..ArchSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("test_000.labels"), "keep").unwrap();
    let err = make_dataset(&spec, 2, 1, 0, dir.path()).unwrap_err();
    assert!(
        matches!(&err, Error::File { source, .. } if source.kind() == std::io::ErrorKind::AlreadyExists),
        "{err}"
    );
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("test_000.labels")).unwrap(),
        "keep"
    );
}

#[test]
fn manifest_parse_errors() {
    let root = std::path::Path::new(".");
    assert!(Manifest::parse("nope\n", root).is_err());
    let bad_split = format!("{}\na.obj\ta.labels\tdev\t1\n", Manifest::HEADER);
    assert!(matches!(
        Manifest::parse(&bad_split, root),
        Err(Error::Format { line: Some(2), .. })
    ));
    let bad_cols = format!("{}\na.obj\ta.labels\n", Manifest::HEADER);
    assert!(Manifest::parse(&bad_cols, root).is_err());
}
