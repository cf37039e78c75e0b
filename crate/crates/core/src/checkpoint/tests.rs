use super::*;
use crate::model::{ModelConfig, Variant};
use crate::train::AdamState;

fn model(variant: Variant) -> TsgcNet<f32> {
    let cfg = ModelConfig {
        num_classes: 5,
        k: 4,
        stream_widths: vec![4, 8],
        fusion_width: 8,
        head_widths: vec![8, 6],
        bn_eps: 1.1e-5,
        seed: 9,
        ..ModelConfig::default()
    };
    TsgcNet::new(variant.apply(&cfg)).unwrap()
}

fn with_state(m: &TsgcNet<f32>) -> Checkpoint {
    let mut adam = AdamState::new(m.store());
    adam.step = 17;
    for (i, t) in adam.m.iter_mut().chain(adam.v.iter_mut()).enumerate() {
        t.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
    }
    Checkpoint::from_model(m, Some(TrainingState { epochs_done: 7, adam }))
}

#[test]
fn byte_exact_round_trip() {
    for v in Variant::ALL {
        let m = model(v);
        for ck in [Checkpoint::from_model(&m, None), with_state(&m)] {
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], b"TSGC");
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }
}

#[test]
fn model_survives_round_trip() {
    let m = model(Variant::Full);
    let (back, state) = Checkpoint::from_bytes(&with_state(&m).to_bytes())
        .unwrap()
        .into_model()
        .unwrap();
    assert_eq!(back.store(), m.store());
    assert_eq!(back.config(), m.config());
    assert_eq!(state.unwrap().epochs_done, 7);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsgc");
    let ck = with_state(&model(Variant::LowFusion));
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
    assert!(!path.with_extension("tmp").exists());
}

#[test]
fn corrupted_header_names_the_magic() {
    let mut bytes = Checkpoint::from_model(&model(Variant::Full), None).to_bytes();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("magic"), "{err}");
    assert!(Checkpoint::from_bytes(b"TS").is_err());
}

#[test]
fn version_mismatch_is_rejected() {
    let mut bytes = Checkpoint::from_model(&model(Variant::Full), None).to_bytes();
    bytes[4] = 9;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("version 9"), "{err}");
}

#[test]
fn truncated_and_padded_files_are_rejected() {
    let bytes = with_state(&model(Variant::Full)).to_bytes();
    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..cut]),
            Err(Error::Format { .. })
        ));
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
}

#[test]
fn parameters_must_fit_the_config() {
    let a = model(Variant::Full);
    let b = model(Variant::CoordsOnly);
    let ck = Checkpoint {
        config: a.config().clone(),
        params: b.store().clone(),
        training: None,
    };
    let bytes = ck.to_bytes();
    let err = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}
