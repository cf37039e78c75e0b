use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t64(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn concat_channels_appends() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2], &[1.0, 2.0]));
    let b = tape.constant(t64(&[1], &[3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn concat_rejects_non_channel_axis() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.concat(&[a, b], 0), Err(Error::Usage(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![3, 2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn leaky_relu_negative_slope() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[-1.0, 2.0]));
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn affine_backward_matches_hand_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[1, 2], &[1.0, 2.0]), true);
    let w = tape.leaf(t64(&[2, 1], &[1.0, 1.0]), true);
    let b = tape.leaf(t64(&[1], &[0.0]), true);
    let y = tape.affine(x, w, Some(b)).unwrap();
    let s = tape.sum_axis(y, 1).unwrap();
    let s = tape.sum_axis(s, 0).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0]);

    // Central differences agree with the frozen values above.
    let err = gradient_check(
        |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            let s = t.sum_axis(y, 1)?;
            t.sum_axis(s, 0)
        },
        &[t64(&[1, 2], &[1.0, 2.0]), t64(&[2, 1], &[1.0, 1.0]), t64(&[1], &[0.0])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn softmax_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax_axis(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax_axis(x, 0).unwrap();
    // exp(i) / (e + e^2 + e^3) evaluated independently
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (v, e) in tape.value(y).data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-12);
    }
    for (v, e) in tape.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((v - e).abs() < 1e-5);
    }
}

#[test]
fn max_axis_over_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 2], &[1.0, 5.0, 7.0, 2.0]));
    let y = tape.max_axis(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, 5.0]);
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3, 1], &[4.0, 4.0, 4.0]), true);
    let y = tape.max_axis(x, 0).unwrap();
    let s = tape.sum_axis(y, 0).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn empty_reduction_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![0, 3]));
    assert!(matches!(tape.sum_axis(x, 0), Err(Error::EmptyReduction { .. })));
    assert!(matches!(tape.max_axis(x, 0), Err(Error::EmptyReduction { .. })));
}

#[test]
fn gather_rows_permutation() {
    let mut tape = Tape::<f64>::new();
    let src = tape.constant(t64(&[3, 1], &[10.0, 20.0, 30.0]));
    let idx = IndexTable::from_rows(&[vec![1], vec![2], vec![0]]).unwrap();
    let out = tape.gather_rows(src, &idx).unwrap();
    assert_eq!(tape.shape(out), &[3, 1, 1]);
    assert_eq!(tape.value(out).data(), &[20.0, 30.0, 10.0]);
}

#[test]
fn gather_rows_scatter_counts() {
    let (m, k) = (4, 3);
    let mut tape = Tape::<f64>::new();
    let src = tape.leaf(Tensor::zeros(vec![m, 2]), true);
    let idx = IndexTable::new(m, k, vec![0; m * k]).unwrap();
    let out = tape.gather_rows(src, &idx).unwrap();
    let s = tape.sum_axis(out, 2).unwrap();
    let s = tape.sum_axis(s, 1).unwrap();
    let s = tape.sum_axis(s, 0).unwrap();
    let g = tape.backward(s).unwrap();
    let g = g.get(src).unwrap();
    assert_eq!(g.row(0), &[(m * k) as f64; 2]);
    for r in 1..m {
        assert_eq!(g.row(r), &[0.0, 0.0]);
    }
}

#[test]
fn gather_rows_out_of_range_names_cell() {
    let mut tape = Tape::<f64>::new();
    let src = tape.constant(Tensor::zeros(vec![3, 1]));
    let idx = IndexTable::from_rows(&[vec![0], vec![5], vec![1]]).unwrap();
    match tape.gather_rows(src, &idx) {
        Err(Error::Index { row, col, index, .. }) => assert_eq!((row, col, index), (1, 0, 5)),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn gather_rows_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = random(&[5, 3], &mut rng);
    let weights = random(&[5, 2, 3], &mut rng);
    let idx = IndexTable::from_rows(&[vec![1, 4], vec![0, 0], vec![3, 2], vec![2, 1], vec![4, 4]]).unwrap();
    let err = gradient_check(
        |t, v| {
            let g = t.gather_rows(v[0], &idx)?;
            let w = t.constant(weights.clone());
            let p = t.mul(g, w)?;
            let p = t.mul(p, g)?;
            let s = t.sum_axis(p, 2)?;
            let s = t.sum_axis(s, 1)?;
            t.sum_axis(s, 0)
        },
        &[src],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn batch_norm_train_hand_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2, 1], &[1.0, 3.0]));
    let g = tape.constant(t64(&[1], &[1.0]));
    let b = tape.constant(t64(&[1], &[0.0]));
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
    let y = tape.value(y).data();
    assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4, "{y:?}");
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var_unbiased, vec![2.0]);
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3, 2], &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]));
    let g = tape.constant(t64(&[2], &[1.0, 1.0]));
    let b = tape.constant(t64(&[2], &[0.0, 0.0]));
    let (y, _) = tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
    let y = tape.value(y);
    for r in 0..3 {
        assert_eq!(y.row(r)[0], 0.0);
        assert!(y.row(r)[1].is_finite());
    }
}

#[test]
fn batch_norm_train_needs_two_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1], &[1.0]));
    let g = tape.constant(t64(&[1], &[1.0]));
    let b = tape.constant(t64(&[1], &[0.0]));
    assert!(matches!(
        tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }),
        Err(Error::Statistics(1))
    ));
}

#[test]
fn batch_norm_eval_is_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random(&[6, 3], &mut rng);
    let run = || {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let g = tape.constant(t64(&[3], &[1.0, 2.0, 0.5]));
        let b = tape.constant(t64(&[3], &[0.1, 0.0, -0.3]));
        let mode = BnMode::Eval {
            mean: &[0.1, -0.2, 0.0],
            var: &[1.5, 0.7, 2.0],
            eps: 1e-5,
        };
        let (y, stats) = tape.batch_norm(x, g, b, mode).unwrap();
        assert!(stats.is_none());
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_check_polynomial() {
    let x = t64(&[2], &[1.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum_axis(sq, 0).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    let err = gradient_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum_axis(sq, 0)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn gradient_check_rejects_non_scalar() {
    let r = gradient_check(|t, v| Ok(t.scale(v[0], 2.0)), &[t64(&[2], &[1.0, 2.0])], 1e-5);
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

/// Every differentiable op, composed, against finite differences.
#[test]
fn all_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 5], &mut rng);
    let b = random(&[5], &mut rng);
    let gamma = random(&[5], &mut rng);
    let beta = random(&[5], &mut rng);
    let err = gradient_check(
        |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            let (y, _) = t.batch_norm(y, v[3], v[4], BnMode::Train { eps: 1e-5 })?;
            let a = t.leaky_relu(y, 0.2);
            let sm = t.softmax_axis(a, 0)?;
            let p = t.mul(sm, y)?;
            let c = t.concat(&[p, a], 1)?;
            let d = t.sub(c, c)?;
            let c = t.add(c, d)?;
            let c = t.scale(c, 1.5);
            let mx = t.max_axis(c, 1)?;
            let mean = t.mean_axis(c, 1)?;
            let s = t.add(mx, mean)?;
            let s = t.mul(s, s)?;
            t.sum_axis(s, 0)
        },
        &[x, w, b, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn cross_entropy_matches_scripted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[6, 3], &mut rng);
    let labels = [0usize, 2, 1, 1, 0, 2];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, &labels, Reduction::Sum).unwrap();
    let mut expect = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[y].exp() / z).ln();
    }
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-6);

    let err = gradient_check(|t, v| t.cross_entropy(v[0], &labels, Reduction::Mean), &[logits], 1e-5).unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(vec![2, 3]));
    let e = tape.cross_entropy(l, &[0, 3], Reduction::Sum).unwrap_err();
    assert!(matches!(e, Error::Data(ref m) if m.contains("cell 1")), "{e}");
}

#[test]
fn edge_affine_matches_materialized_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (m, d, k, kn) = (6, 3, 4, 2);
    let src = random(&[m, d], &mut rng);
    let w = random(&[2 * d, k], &mut rng);
    let b = random(&[k], &mut rng);
    let idx = IndexTable::new(m, kn, (0..m * kn).map(|_| rng.gen_range(0..m as u32)).collect()).unwrap();
    for input in [EdgeInput::Concat, EdgeInput::DiffConcat] {
        let mut tape = Tape::new();
        let s = tape.constant(src.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let fused = tape.edge_affine(s, &idx, wv, Some(bv), input).unwrap();
        let center = tape.gather_rows(s, &IndexTable::identity(m, kn)).unwrap();
        let neigh = tape.gather_rows(s, &idx).unwrap();
        let first = match input {
            EdgeInput::Concat => center,
            EdgeInput::DiffConcat => tape.sub(center, neigh).unwrap(),
        };
        let cat = tape.concat(&[first, neigh], 2).unwrap();
        let plain = tape.affine(cat, wv, Some(bv)).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(plain)) < 1e-12);

        let err = gradient_check(
            |t, v| {
                let y = t.edge_affine(v[0], &idx, v[1], Some(v[2]), input)?;
                let y = t.mul(y, y)?;
                let y = t.sum_axis(y, 2)?;
                let y = t.sum_axis(y, 1)?;
                t.sum_axis(y, 0)
            },
            &[src.clone(), w.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{input:?} {err}");
    }
}

#[test]
fn broken_softmax_hook_is_scoped() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = with_broken_softmax(|| tape.softmax_axis(x, 0).unwrap());
    assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    let y = tape.softmax_axis(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn f32_and_f64_gemm_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[7, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let mut c64 = vec![0.0; 21];
    f64::gemm(7, 5, 3, a.data(), false, b.data(), false, &mut c64, false);
    let mut naive = vec![0.0; 21];
    for i in 0..7 {
        for j in 0..3 {
            for p in 0..5 {
                naive[i * 3 + j] += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
        }
    }
    let (a32, b32) = (a.cast::<f32>(), b.cast::<f32>());
    let mut c32 = vec![0.0f32; 21];
    f32::gemm(7, 5, 3, a32.data(), false, b32.data(), false, &mut c32, false);
    for ((x, y), z) in c64.iter().zip(&naive).zip(&c32) {
        assert!((x - y).abs() < 1e-12);
        assert!((x - *z as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let n = v.len();
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[n], &v));
        let y = tape.softmax_axis(x, 0).unwrap();
        let y = tape.value(y).data();
        prop_assert!(y.iter().all(|&p| p >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn gather_conserves_gradient_mass(
        seed in 0u64..1000,
        m in 1usize..12,
        kn in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = IndexTable::new(m, kn, (0..m * kn).map(|_| rng.gen_range(0..m as u32)).collect()).unwrap();
        let up = random(&[m, kn, 2], &mut rng);
        let mut tape = Tape::new();
        let src = tape.leaf(random(&[m, 2], &mut rng), true);
        let g = tape.gather_rows(src, &idx).unwrap();
        let w = tape.constant(up.clone());
        let p = tape.mul(g, w).unwrap();
        let s = tape.sum_axis(p, 2).unwrap();
        let s = tape.sum_axis(s, 1).unwrap();
        let s = tape.sum_axis(s, 0).unwrap();
        let grads = tape.backward(s).unwrap();
        let total: f64 = grads.get(src).unwrap().data().iter().sum();
        let upstream: f64 = up.data().iter().sum();
        prop_assert!((total - upstream).abs() <= 1e-6);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[5, 4], &mut rng).cast::<f32>();
        let w = random(&[4, 3], &mut rng).cast::<f32>();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.affine(xv, wv, None).unwrap();
            let y = tape.softmax_axis(y, 1).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
