use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::knn::build_knn_graph;
use crate::nn::{gradient_check_params, Mode, SharedMlp};
use crate::tensor::{IndexTable, Tensor};

const NORM: (f64, f64) = (1e-5, 0.1);
const SLOPE: f64 = 0.2;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore<f64>, name: &str, values: &[f64]) {
    let id = store.find_param(name).unwrap_or_else(|| panic!("no param {name}"));
    store.param_mut(id).value.data_mut().copy_from_slice(values);
}

fn set_buffer(store: &mut ParamStore<f64>, name: &str, values: &[f64]) {
    let (_, b) = store.buffers_mut().find(|(n, _)| *n == name).unwrap();
    b.data_mut().copy_from_slice(values);
}

fn run(
    layer: &AggregationLayer,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    graph: &KnnGraph,
    mode: Mode,
) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let mut s = Session::new(store, mode, false);
    let xv = s.tape.constant(x.clone());
    let out = layer.forward(&mut s, xv, graph).unwrap();
    (
        s.tape.value(out.output).clone(),
        out.attention.map(|a| s.tape.value(a).clone()),
    )
}

/// Hand-set parameters for a d=2 → k=3 layer.
struct Weights {
    wc: Vec<f64>, // 4×3
    bc: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    wa: Vec<f64>, // 4×3
    ba: Vec<f64>,
}

fn hand_weights() -> Weights {
    Weights {
        wc: vec![0.5, -0.3, 0.8, 0.1, 0.9, -0.4, -0.7, 0.2, 0.3, 0.6, -0.5, 0.25],
        bc: vec![0.05, -0.1, 0.2],
        gamma: vec![1.5, 0.7, 1.0],
        beta: vec![-0.2, 0.1, 0.0],
        mean: vec![0.1, -0.05, 0.2],
        var: vec![2.0, 0.5, 1.2],
        wa: vec![0.3, -0.6, 0.4, -0.2, 0.5, 0.7, 0.8, -0.1, -0.3, 0.15, 0.35, -0.45],
        ba: vec![0.0, 0.1, -0.2],
    }
}

fn install(store: &mut ParamStore<f64>, w: &Weights, attention: bool) {
    set(store, "l.calibrate.weight", &w.wc);
    set(store, "l.calibrate.bias", &w.bc);
    set(store, "l.calibrate.bn.gamma", &w.gamma);
    set(store, "l.calibrate.bn.beta", &w.beta);
    set_buffer(store, "l.calibrate.bn.running_mean", &w.mean);
    set_buffer(store, "l.calibrate.bn.running_var", &w.var);
    if attention {
        set(store, "l.score.0.weight", &w.wa);
        set(store, "l.score.0.bias", &w.ba);
    }
}

/// Step-by-step evaluation of the calibration / attention / aggregation
/// formulas with explicit loops. `batch_stats` switches the normalization
/// to statistics over all edges (training mode).
fn scripted(x: &[[f64; 2]], nbrs: &[Vec<usize>], w: &Weights, attention: bool, batch_stats: bool) -> Vec<[f64; 3]> {
    let affine = |inp: [f64; 4], wm: &[f64], b: &[f64]| -> [f64; 3] {
        let mut o = [0.0; 3];
        for c in 0..3 {
            o[c] = b[c];
            for r in 0..4 {
                o[c] += inp[r] * wm[r * 3 + c];
            }
        }
        o
    };
    let m = x.len();
    let mut pre = vec![];
    let mut score = vec![];
    for i in 0..m {
        for &j in &nbrs[i] {
            pre.push(affine([x[i][0], x[i][1], x[j][0], x[j][1]], &w.wc, &w.bc));
            score.push(affine(
                [x[i][0] - x[j][0], x[i][1] - x[j][1], x[j][0], x[j][1]],
                &w.wa,
                &w.ba,
            ));
        }
    }
    let (mean, var) = if batch_stats {
        let n = pre.len() as f64;
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for p in &pre {
            for c in 0..3 {
                mean[c] += p[c] / n;
            }
        }
        for p in &pre {
            for c in 0..3 {
                var[c] += (p[c] - mean[c]).powi(2) / n;
            }
        }
        (mean.to_vec(), var.to_vec())
    } else {
        (w.mean.clone(), w.var.clone())
    };
    let fhat: Vec<[f64; 3]> = pre
        .iter()
        .map(|p| {
            let mut o = [0.0; 3];
            for c in 0..3 {
                let v = w.gamma[c] * (p[c] - mean[c]) / (var[c] + 1e-5).sqrt() + w.beta[c];
                o[c] = if v > 0.0 { v } else { SLOPE * v };
            }
            o
        })
        .collect();
    let k = nbrs[0].len();
    (0..m)
        .map(|i| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                if attention {
                    let z: f64 = (0..k).map(|j| score[i * k + j][c].exp()).sum();
                    for j in 0..k {
                        out[c] += score[i * k + j][c].exp() / z * fhat[i * k + j][c];
                    }
                } else {
                    out[c] = (0..k).map(|j| fhat[i * k + j][c]).fold(f64::NEG_INFINITY, f64::max);
                }
            }
            out
        })
        .collect()
}

fn attention_layer(store: &mut ParamStore<f64>, d: usize, k: usize, seed: u64) -> AggregationLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AggregationLayer::Attention(GraphAttentionLayer::new(store, &mut rng, "l", d, k, &[], NORM, SLOPE).unwrap())
}

fn maxpool_layer(store: &mut ParamStore<f64>, d: usize, k: usize, seed: u64) -> AggregationLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AggregationLayer::MaxPool(GraphMaxPoolLayer::new(store, &mut rng, "l", d, k, NORM, SLOPE).unwrap())
}

const X4: [[f64; 2]; 4] = [[0.3, -1.2], [1.1, 0.4], [-0.6, 0.9], [0.2, 0.05]];

fn x4() -> Tensor<f64> {
    Tensor::new(vec![4, 2], X4.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn attention_matches_scripted_evaluation() {
    let w = hand_weights();
    let graph = build_knn_graph(&x4(), 2, false).unwrap();
    let nbrs: Vec<Vec<usize>> = (0..4).map(|i| graph.neighbors(i).collect()).collect();
    for (mode, batch) in [(Mode::Eval, false), (Mode::Train, true)] {
        let mut store = ParamStore::new();
        let layer = attention_layer(&mut store, 2, 3, 0);
        install(&mut store, &w, true);
        let (out, _) = run(&layer, &mut store, &x4(), &graph, mode);
        let expect = scripted(&X4, &nbrs, &w, true, batch);
        for i in 0..4 {
            for c in 0..3 {
                assert!(
                    (out.row(i)[c] - expect[i][c]).abs() <= 1e-6,
                    "{mode:?} {i} {c} {:?} {:?}",
                    out.row(i),
                    expect[i]
                );
            }
        }
    }
}

#[test]
fn maxpool_matches_scripted_evaluation() {
    let w = hand_weights();
    let graph = build_knn_graph(&x4(), 3, false).unwrap();
    let nbrs: Vec<Vec<usize>> = (0..4).map(|i| graph.neighbors(i).collect()).collect();
    let mut store = ParamStore::new();
    let layer = maxpool_layer(&mut store, 2, 3, 0);
    install(&mut store, &w, false);
    let (out, att) = run(&layer, &mut store, &x4(), &graph, Mode::Eval);
    assert!(att.is_none());
    let expect = scripted(&X4, &nbrs, &w, false, false);
    for i in 0..4 {
        for c in 0..3 {
            assert!((out.row(i)[c] - expect[i][c]).abs() <= 1e-6);
        }
    }
}

#[test]
fn identical_neighbors_get_uniform_weights() {
    // Cell 0's three neighbors (1, 2, 3) share one feature vector.
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    let graph = KnnGraph::from_table(
        IndexTable::from_rows(&[vec![1, 2, 3], vec![2, 3, 0], vec![1, 3, 0], vec![1, 2, 0]]).unwrap(),
    );
    for attention in [true, false] {
        let mut store = ParamStore::new();
        let layer = if attention {
            attention_layer(&mut store, 2, 4, 1)
        } else {
            maxpool_layer(&mut store, 2, 4, 1)
        };
        let mut s = Session::new(&mut store, Mode::Eval, false);
        let xv = s.tape.constant(x.clone());
        let out = layer.forward(&mut s, xv, &graph).unwrap();
        let cal = s.tape.value(out.calibrated);
        let o = s.tape.value(out.output);
        if let Some(a) = out.attention {
            for j in 0..3 {
                for &v in s.tape.value(a).row(j) {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
        for c in 0..4 {
            assert!((o.row(0)[c] - cal.row(0)[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_neighbor_attention_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 3], &mut rng);
    let graph = build_knn_graph(&x, 1, false).unwrap();
    let mut store = ParamStore::new();
    let layer = attention_layer(&mut store, 3, 4, 3);
    let mut s = Session::new(&mut store, Mode::Eval, false);
    let xv = s.tape.constant(x);
    let out = layer.forward(&mut s, xv, &graph).unwrap();
    assert!(s.tape.value(out.attention.unwrap()).data().iter().all(|&a| a == 1.0));
    assert_eq!(s.tape.value(out.output).data(), s.tape.value(out.calibrated).data());
}

#[test]
fn attention_weights_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[20, 5], &mut rng);
    let graph = build_knn_graph(&x, 6, false).unwrap();
    let mut store = ParamStore::new();
    let layer = attention_layer(&mut store, 5, 7, 5);
    let mut s = Session::new(&mut store, Mode::Train, false);
    let xv = s.tape.constant(x);
    let out = layer.forward(&mut s, xv, &graph).unwrap();
    let a = s.tape.value(out.attention.unwrap());
    for i in 0..20 {
        for c in 0..7 {
            let total: f64 = (0..6).map(|j| a.get(&[i, j, c])).sum();
            assert!((total - 1.0).abs() <= 1e-5);
            assert!((0..6).all(|j| a.get(&[i, j, c]) >= 0.0));
        }
    }
}

#[test]
fn neighbor_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[12, 3], &mut rng);
    let graph = build_knn_graph(&x, 5, false).unwrap();
    let shuffled: Vec<Vec<usize>> = (0..12)
        .map(|i| {
            let mut r: Vec<usize> = graph.neighbors(i).collect();
            r.rotate_left(i % 5);
            r.swap(0, 4);
            r
        })
        .collect();
    let shuffled = KnnGraph::from_table(IndexTable::from_rows(&shuffled).unwrap());
    let mut store = ParamStore::new();
    let att = attention_layer(&mut store, 3, 4, 7);
    let (a, _) = run(&att, &mut store, &x, &graph, Mode::Eval);
    let (b, _) = run(&att, &mut store, &x, &shuffled, Mode::Eval);
    assert!(a.max_abs_diff(&b) <= 1e-6);

    let mut store = ParamStore::new();
    let mp = maxpool_layer(&mut store, 3, 4, 7);
    let (a, _) = run(&mp, &mut store, &x, &graph, Mode::Eval);
    let (b, _) = run(&mp, &mut store, &x, &shuffled, Mode::Eval);
    assert_eq!(a, b);
}

fn layer_gradient_error(attention: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d, k) = (8, 3, 4);
    let mut store = ParamStore::new();
    let layer = if attention {
        attention_layer(&mut store, d, k, seed)
    } else {
        maxpool_layer(&mut store, d, k, seed)
    };
    // Non-trivial running stats and affine parameters for eval-mode BN.
    set_buffer(&mut store, "l.calibrate.bn.running_mean", &[0.1, -0.2, 0.05, 0.0]);
    set_buffer(&mut store, "l.calibrate.bn.running_var", &[0.8, 1.3, 0.6, 1.1]);
    set(&mut store, "l.calibrate.bias", &[0.1, -0.1, 0.2, 0.05]);
    let input = store.add_param("input", random(&[m, d], &mut rng)).unwrap();
    let probe = random(&[m, k], &mut rng);
    let graph = build_knn_graph(&store.param(input).value, 3, false).unwrap();
    gradient_check_params(
        &mut store,
        |s| {
            let x = s.param(input);
            let out = layer.forward(s, x, &graph)?;
            let p = s.tape.constant(probe.clone());
            let y = s.tape.mul(out.output, p)?;
            let y = s.tape.sum_axis(y, 1)?;
            s.tape.sum_axis(y, 0)
        },
        1e-5,
    )
    .unwrap()
}

#[test]
fn attention_gradients_match_finite_differences() {
    let err = layer_gradient_error(true, 10);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let err = layer_gradient_error(false, 11);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn deeper_score_network_is_normalized_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let layer = AggregationLayer::Attention(
        GraphAttentionLayer::new(&mut store, &mut rng, "l", 3, 4, &[6, 5], NORM, SLOPE).unwrap(),
    );
    let input = store.add_param("input", random(&[8, 3], &mut rng)).unwrap();
    let graph = build_knn_graph(&store.param(input).value, 3, false).unwrap();
    let err = gradient_check_params(
        &mut store,
        |s| {
            let x = s.param(input);
            let out = layer.forward(s, x, &graph)?;
            let y = s.tape.mul(out.output, out.output)?;
            let y = s.tape.sum_axis(y, 1)?;
            s.tape.sum_axis(y, 0)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn same_layer_serves_any_cell_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let layer = attention_layer(&mut store, 3, 4, 13);
    let before = store.num_scalars();
    for m in [5, 9, 30] {
        let x = random(&[m, 3], &mut rng);
        let g = build_knn_graph(&x, 4, false).unwrap();
        let (out, _) = run(&layer, &mut store, &x, &g, Mode::Train);
        assert_eq!(out.shape(), &[m, 4]);
    }
    assert_eq!(store.num_scalars(), before);
}

#[test]
fn graph_mismatch_is_a_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let layer = maxpool_layer(&mut store, 2, 3, 14);
    let g = build_knn_graph(&random(&[6, 2], &mut rng), 2, false).unwrap();
    let mut s = Session::new(&mut store, Mode::Eval, false);
    let x = s.tape.constant(random(&[7, 2], &mut rng));
    assert!(matches!(layer.forward(&mut s, x, &g), Err(crate::Error::Shape { .. })));
}

fn shared(store: &mut ParamStore<f64>, din: usize, dout: usize, norm: bool) -> SharedMlp {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    SharedMlp::new(store, &mut rng, "mlp", din, dout, norm.then_some(NORM), Some(SLOPE)).unwrap()
}

fn apply(mlp: &SharedMlp, store: &mut ParamStore<f64>, x: Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut s = Session::new(store, mode, false);
    let v = s.tape.constant(x);
    let y = mlp.forward(&mut s, v).unwrap();
    s.tape.value(y).clone()
}

#[test]
fn shared_mlp_identical_rows() {
    let mut store = ParamStore::new();
    let mlp = shared(&mut store, 3, 5, true);
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let y = apply(&mlp, &mut store, x, Mode::Train);
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn shared_mlp_identity_configuration() {
    let mut store = ParamStore::new();
    let mlp = shared(&mut store, 3, 3, false);
    set(
        &mut store,
        "mlp.linear.weight",
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    );
    let x = Tensor::from_rows(&[vec![0.5, 1.0, 2.0], vec![3.0, 0.25, 7.0]]).unwrap();
    assert_eq!(apply(&mlp, &mut store, x.clone(), Mode::Eval), x);
}

#[test]
fn shared_mlp_rows_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let mlp = shared(&mut store, 4, 6, true);
    set_buffer(&mut store, "mlp.bn.running_mean", &[0.1, 0.2, -0.1, 0.0, 0.3, -0.3]);
    let x = random(&[5, 4], &mut rng);
    let all = apply(&mlp, &mut store, x.clone(), Mode::Eval);
    for i in 0..5 {
        let one = Tensor::new(vec![1, 4], x.row(i).to_vec()).unwrap();
        let y = apply(&mlp, &mut store, one, Mode::Eval);
        assert_eq!(y.row(0), all.row(i));
    }
}

#[test]
fn shared_mlp_width_mismatch() {
    let mut store = ParamStore::new();
    let mlp = shared(&mut store, 4, 2, false);
    let mut s = Session::new(&mut store, Mode::Eval, false);
    let x = s.tape.constant(Tensor::zeros(vec![3, 5]));
    assert!(matches!(mlp.forward(&mut s, x), Err(crate::Error::Shape { .. })));
}
