use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mesh::{compute_normals, TriangleMesh};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Wavy `n × n` grid of quads split into triangles, labeled by quadrant.
fn grid(n: usize, phase: f64) -> TriangleMesh {
    let mut vertices = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            let (x, z) = (i as f64, j as f64);
            vertices.push([x, (x * 0.7 + phase).sin() + (z * 0.5).cos(), z]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut faces = Vec::new();
    let mut labels = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let label = usize::from(i >= n / 2) + 2 * usize::from(j >= n / 2);
            faces.push([id(i, j), id(i, j + 1), id(i + 1, j)]);
            faces.push([id(i + 1, j), id(i, j + 1), id(i + 1, j + 1)]);
            labels.extend([label, label]);
        }
    }
    TriangleMesh::new(vertices, faces).unwrap().with_labels(labels).unwrap()
}

fn small_model(seed: u64) -> TsgcNet<f32> {
    TsgcNet::new(ModelConfig {
        num_classes: 4,
        k: 4,
        stream_widths: vec![4, 8],
        fusion_width: 8,
        head_widths: vec![8],
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr0: 1e-2,
        translation_range: 1.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_halves_every_twenty_epochs() {
    let c = TrainConfig::default();
    for e in 0..20 {
        assert_eq!(c.learning_rate(e), 1e-3);
    }
    for e in 20..40 {
        assert_eq!(c.learning_rate(e), 5e-4);
    }
    for e in 0..200 {
        assert_eq!(c.learning_rate(e), 1e-3 * 0.5f64.powi((e / 20) as i32));
    }
}

fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let id = s.add_param("w", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
    s.param_mut(id).grad = grad.map(|g| Tensor::new(vec![1], vec![g]).unwrap());
    s
}

#[test]
fn adam_first_step_is_lr() {
    let mut s = scalar_store(0.5, Some(1.0));
    let mut st = AdamState::new(&s);
    adam_step(&mut s, &mut st, 1e-3, &AdamParams::default()).unwrap();
    let w = s.params()[0].value.data()[0];
    assert!((w - (0.5 - 1e-3)).abs() < 1e-9, "{w}");
    assert!(s.params()[0].grad.is_none());
    assert_eq!(st.step, 1);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut s = scalar_store(0.5, Some(0.0));
    let mut st = AdamState::new(&s);
    adam_step(&mut s, &mut st, 1e-3, &AdamParams::default()).unwrap();
    assert_eq!(s.params()[0].value.data()[0], 0.5);

    st.m[0].data_mut()[0] = 0.3;
    st.v[0].data_mut()[0] = 0.2;
    s.params_mut()[0].grad = Some(Tensor::new(vec![1], vec![0.0]).unwrap());
    adam_step(&mut s, &mut st, 1e-3, &AdamParams::default()).unwrap();
    assert!((st.m[0].data()[0] - 0.27).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.1998).abs() < 1e-15);
}

#[test]
fn adam_matches_textbook_update() {
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut s = scalar_store(1.0, None);
    let mut st = AdamState::new(&s);
    for (t, &g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        w -= lr * mh / (vh.sqrt() + eps);
        s.params_mut()[0].grad = Some(Tensor::new(vec![1], vec![g]).unwrap());
        adam_step(&mut s, &mut st, lr, &AdamParams::default()).unwrap();
        assert!((s.params()[0].value.data()[0] - w).abs() < 1e-12);
    }
}

#[test]
fn adam_missing_gradient_names_the_parameter() {
    let mut s = scalar_store(0.5, None);
    let mut st = AdamState::new(&s);
    let err = adam_step(&mut s, &mut st, 1e-3, &AdamParams::default()).unwrap_err();
    assert!(matches!(&err, Error::Training(m) if m.contains("\"w\"")), "{err}");
    assert_eq!(st.step, 0);
}

#[test]
fn zero_range_augmentation_is_identity() {
    let mesh = grid(4, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(augment(&mesh, &mut rng, 0.0, 0.0), mesh);
}

#[test]
fn translation_keeps_normals() {
    let mesh = grid(5, 0.3);
    let moved = Augmentation {
        angle: 0.0,
        translation: [3.0, -7.5, 9.9],
    }
    .apply(&mesh);
    let a = mesh_features::<f64>(&mesh, false).normals;
    let b = mesh_features::<f64>(&moved, false).normals;
    assert!(a.max_abs_diff(&b) <= 1e-6);
}

#[test]
fn rotation_maps_normals() {
    let mesh = grid(5, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let aug = Augmentation::sample(&mut rng, 10.0, std::f64::consts::FRAC_PI_6);
        assert!(aug.angle.abs() <= std::f64::consts::FRAC_PI_6);
        assert!(aug.translation.iter().all(|t| t.abs() <= 10.0));
        let moved = aug.apply(&mesh);
        let r = rotation_y(aug.angle);
        let before = compute_normals(&mesh);
        let after = compute_normals(&moved);
        for (n, m) in before.face.iter().zip(&after.face) {
            let expect = apply_matrix(&r, *n);
            for i in 0..3 {
                assert!((expect[i] - m[i]).abs() <= 1e-5);
            }
        }
        assert_eq!(moved.faces(), mesh.faces());
        assert_eq!(moved.labels(), mesh.labels());
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let model = small_model(1);
    let before = model.store().clone();
    let (after, log) = train(model, &[grid(4, 0.0)], &quick(0)).unwrap();
    assert!(log.is_empty());
    assert_eq!(after.store(), &before);
}

#[test]
fn training_is_deterministic() {
    let data = [grid(4, 0.0), grid(4, 0.5), grid(4, 1.0)];
    let (a, la) = train(small_model(1), &data, &quick(3)).unwrap();
    let (b, lb) = train(small_model(1), &data, &quick(3)).unwrap();
    assert_eq!(a.store(), b.store());
    assert_eq!(la, lb);
    assert_eq!(la.len(), 3);
    assert!(la
        .iter()
        .all(|r| r.mean_loss.is_finite() && (0.0..=1.0).contains(&r.train_oa)));
}

#[test]
fn resume_equals_uninterrupted_run() {
    let data = TrainingSet::new(&[grid(4, 0.0), grid(4, 0.5), grid(4, 1.0)], 4).unwrap();
    let mut full = Trainer::new(small_model(2), quick(4)).unwrap();
    let log_full = full.fit(&data, 4, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(small_model(2), quick(4)).unwrap();
    let mut log = first.fit(&data, 2, |_, _| Ok(())).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), quick(4)).unwrap();
    assert_eq!(second.epochs_done(), 2);
    log.extend(second.fit(&data, 4, |_, _| Ok(())).unwrap());
    assert_eq!(log, log_full);
    assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn fixed_augmentation_doubles_the_pool() {
    let data = TrainingSet::new(&[grid(4, 0.0), grid(4, 0.5)], 4).unwrap();
    let cfg = TrainConfig {
        fixed_augmentation: true,
        ..quick(1)
    };
    let mut t = Trainer::new(small_model(3), cfg).unwrap();
    assert_eq!(t.pool(&data).len(), 4);
    t.run_epoch(&data).unwrap();
    assert_eq!(t.adam().step, 2);
}

#[test]
fn mixed_cell_counts_are_a_batching_error() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..quick(1)
    };
    let err = train(small_model(1), &[grid(4, 0.0), grid(5, 0.0)], &cfg).unwrap_err();
    assert!(matches!(err, Error::Batching(_)), "{err}");
}

#[test]
fn non_finite_loss_names_the_batch() {
    let mut model = small_model(1);
    let last = model.store().num_params() - 1;
    model.store_mut().params_mut()[last].value.data_mut()[0] = f32::NAN;
    let err = train(model, &[grid(4, 0.0)], &quick(1)).unwrap_err();
    assert!(matches!(&err, Error::Training(m) if m.contains("batch 0")), "{err}");
}

#[test]
fn unlabeled_or_out_of_range_data_is_rejected() {
    let unlabeled = TriangleMesh::new(grid(3, 0.0).vertices().to_vec(), grid(3, 0.0).faces().to_vec()).unwrap();
    assert!(matches!(TrainingSet::new(&[unlabeled], 4), Err(Error::Data(_))));
    assert!(matches!(TrainingSet::new(&[grid(3, 0.0)], 3), Err(Error::Data(_))));
}

#[test]
fn train_to_dir_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainingSet::new(&[grid(4, 0.0), grid(4, 0.5)], 4).unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick(3)
    };
    let mut t = Trainer::new(small_model(4), cfg.clone()).unwrap();
    let recs = train_to_dir(&mut t, &data, dir.path()).unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log, format_log(&recs));
    assert!(dir.path().join(epoch_checkpoint_name(2)).exists());
    assert!(!dir.path().join(epoch_checkpoint_name(3)).exists());
    let last = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.training.as_ref().unwrap().epochs_done, 3);

    // Resuming from epoch 2 appends the remaining line.
    let ck = Checkpoint::load(&dir.path().join(epoch_checkpoint_name(2))).unwrap();
    let other = tempfile::tempdir().unwrap();
    std::fs::write(other.path().join(LOG_FILE), format_log(&recs[..2])).unwrap();
    let mut resumed = Trainer::resume(ck, cfg).unwrap();
    train_to_dir(&mut resumed, &data, other.path()).unwrap();
    assert_eq!(std::fs::read_to_string(other.path().join(LOG_FILE)).unwrap(), log);
    assert_eq!(
        std::fs::read(other.path().join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn invalid_train_config() {
    for c in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            decay_every: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr0: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            rotation_range: -0.1,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
