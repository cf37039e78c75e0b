use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{axis_angle, brute_force_knn, cross_entropy_row, rotate, set_metrics};
use super::{Context, GeneralizationSetup};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::eval::ConfusionMatrix;
use crate::experiment::{evaluate, train_and_evaluate, RunResult};
use crate::knn::{build_knn_graph, KnnGraph};
use crate::mesh::{compute_normals, mesh_features, CellFeatureMatrix, TriangleMesh, Vec3};
use crate::model::{ForwardOptions, ModelConfig, TsgcNet, Variant};
use crate::nn::{
    gradient_check_params, AggregationLayer, EdgeMlp, GraphAttentionLayer, GraphMaxPoolLayer, Mode, ParamStore,
    Session, SharedMlp,
};
use crate::synth::{generate, generate_split, ArchSpec};
use crate::tensor::{gradient_check, BnMode, EdgeInput, IndexTable, Reduction, Tape, Tensor, Var};
use crate::train::{apply_matrix, rotation_y, Augmentation, TrainConfig, Trainer, TrainingSet};

type Outcome = Result<(bool, String)>;
type LayerFn = Box<dyn Fn(&mut Session<'_, f64>, Var, &KnnGraph) -> Result<Var>>;

const NORM: (f64, f64) = (1e-5, 0.1);
const SLOPE: f64 = 0.2;
// Small enough that a max or LeakyReLU kink rarely falls inside the
// difference window, large enough to keep roundoff near 1e-9.
const STEP: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_features(m: usize, rng: &mut ChaCha8Rng) -> CellFeatureMatrix<f64> {
    CellFeatureMatrix {
        coords: random(&[m, 12], rng),
        normals: random(&[m, 12], rng),
    }
}

/// Sum every element down to a scalar.
fn total(tape: &mut Tape<f64>, mut v: Var) -> Result<Var> {
    while !tape.shape(v).is_empty() {
        v = tape.sum_axis(v, 0)?;
    }
    Ok(v)
}

/// Weighted sum with a fixed probe so every output element matters.
fn probe_sum(tape: &mut Tape<f64>, v: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let y = tape.mul(v, p)?;
    total(tape, y)
}

fn knn_table(x: &Tensor<f64>, k: usize) -> Result<IndexTable> {
    Ok(build_knn_graph(x, k, false)?.table().clone())
}

fn tape_op_errors(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();

    let (x, w, b) = (random(&[6, 4], rng), random(&[4, 3], rng), random(&[3], rng));
    let probe = random(&[6, 3], rng);
    let err = gradient_check(
        |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            let y = t.leaky_relu(y, SLOPE);
            let y = t.softmax_axis(y, 1)?;
            probe_sum(t, y, &probe)
        },
        &[x, w, b],
        STEP,
    )?;
    out.push(("affine/leaky_relu/softmax", err));

    let src = random(&[7, 3], rng);
    let idx = knn_table(&src, 3)?;
    for (name, input) in [
        ("edge_affine concat", EdgeInput::Concat),
        ("edge_affine diff", EdgeInput::DiffConcat),
    ] {
        let (w, b) = (random(&[6, 4], rng), random(&[4], rng));
        let probe = random(&[7, 4], rng);
        let err = gradient_check(
            |t, v| {
                let y = t.edge_affine(v[0], &idx, v[1], Some(v[2]), input)?;
                let y = t.max_axis(y, 1)?;
                probe_sum(t, y, &probe)
            },
            &[src.clone(), w, b],
            STEP,
        )?;
        out.push((name, err));
    }

    let (x, gamma, beta) = (random(&[5, 3, 4], rng), random(&[4], rng), random(&[4], rng));
    let probe = random(&[5, 3, 4], rng);
    let err = gradient_check(
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: NORM.0 })?;
            probe_sum(t, y, &probe)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        STEP,
    )?;
    out.push(("batch_norm train", err));
    let (mean, var) = ([0.1, -0.2, 0.3, 0.0], [0.5, 1.5, 0.9, 2.0]);
    let err = gradient_check(
        |t, v| {
            let mode = BnMode::Eval {
                mean: &mean,
                var: &var,
                eps: NORM.0,
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
            probe_sum(t, y, &probe)
        },
        &[x, gamma, beta],
        STEP,
    )?;
    out.push(("batch_norm eval", err));

    let (a, c) = (random(&[5, 2], rng), random(&[5, 3], rng));
    let idx = IndexTable::from_rows(&[vec![1, 3], vec![0, 0], vec![4, 2], vec![2, 1], vec![2, 4]])?;
    let labels = [0, 4, 2, 1, 3];
    let err = gradient_check(
        |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.gather_rows(y, &idx)?;
            let y = t.mean_axis(y, 1)?;
            let y = t.scale(y, 2.0);
            t.cross_entropy(y, &labels, Reduction::Mean)
        },
        &[a, c],
        STEP,
    )?;
    out.push(("concat/gather/cross_entropy", err));
    Ok(out)
}

fn layer_error(kind: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, d, k, c) = (9, 3, 3, 4);
    let mut store = ParamStore::<f64>::new();
    let layer: LayerFn = match kind {
        "attention" => {
            let l =
                AggregationLayer::Attention(GraphAttentionLayer::new(&mut store, rng, "l", d, c, &[5], NORM, SLOPE)?);
            Box::new(move |s, x, g| Ok(l.forward(s, x, g)?.output))
        }
        "maxpool" => {
            let l = AggregationLayer::MaxPool(GraphMaxPoolLayer::new(&mut store, rng, "l", d, c, NORM, SLOPE)?);
            Box::new(move |s, x, g| Ok(l.forward(s, x, g)?.output))
        }
        "edge_mlp" => {
            let l = EdgeMlp::new(
                &mut store,
                rng,
                "l",
                EdgeInput::DiffConcat,
                d,
                c,
                Some(NORM),
                Some(SLOPE),
            )?;
            Box::new(move |s, x, g| {
                let y = l.forward(s, x, g)?;
                s.tape.sum_axis(y, 1)
            })
        }
        _ => {
            let l = SharedMlp::new(&mut store, rng, "l", d, c, Some(NORM), Some(SLOPE))?;
            Box::new(move |s, x, _| l.forward(s, x))
        }
    };
    // Non-trivial running statistics for the eval-mode normalization.
    for (_, b) in store.buffers_mut() {
        b.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(0.2..0.8));
    }
    for p in store.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let input = store.add_param("input", random(&[m, d], rng))?;
    let graph = build_knn_graph(&store.param(input).value, k, false)?;
    let probe = random(&[m, c], rng);
    gradient_check_params(
        &mut store,
        |s| {
            let x = s.param(input);
            let y = layer(s, x, &graph)?;
            let p = s.tape.constant(probe.clone());
            let y = s.tape.mul(y, p)?;
            let y = s.tape.sum_axis(y, 1)?;
            s.tape.sum_axis(y, 0)
        },
        STEP,
    )
}

/// Finite differences over every parameter of a tiny full model (M=16,
/// K=3, C=3) with the KNN graphs frozen.
fn model_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        num_classes: 3,
        k: 3,
        stream_widths: vec![4, 8, 8],
        fusion_width: 6,
        head_widths: vec![6, 5, 4],
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let mut net = TsgcNet::<f64>::new(cfg)?;
    let x = random_features(16, rng);
    net.forward(&x, ForwardOptions::train())?;
    let labels: Vec<usize> = (0..16).map(|i| (i * 7) % 3).collect();
    let graphs = net.forward(&x, ForwardOptions::eval())?.trace.graphs;
    let opts = ForwardOptions {
        graphs: Some(&graphs),
        track_params: true,
        ..ForwardOptions::eval()
    };
    let mut pass = net.forward(&x, opts)?;
    let loss = pass.loss(&labels, Reduction::Sum)?;
    net.backward(&pass, loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = net.store().params().iter().map(|p| p.grad.clone()).collect();
    let quiet = ForwardOptions {
        track_params: false,
        ..opts
    };
    let eval = |net: &mut TsgcNet<f64>| -> Result<f64> {
        let mut pass = net.forward(&x, quiet)?;
        let l = pass.loss(&labels, Reduction::Sum)?;
        Ok(pass.tape.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..net.store().params()[p].value.numel() {
            let orig = net.store().params()[p].value.data()[e];
            net.store_mut().params_mut()[p].value.data_mut()[e] = orig + STEP;
            let plus = eval(&mut net)?;
            net.store_mut().params_mut()[p].value.data_mut()[e] = orig - STEP;
            let minus = eval(&mut net)?;
            net.store_mut().params_mut()[p].value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[e]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

pub(super) fn gradients(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut errors = tape_op_errors(&mut rng)?;
    for kind in ["attention", "maxpool", "edge_mlp", "shared_mlp"] {
        errors.push((kind, layer_error(kind, &mut rng)?));
    }
    errors.push(("model", model_error(&mut rng)?));
    let (name, worst) = errors
        .iter()
        .copied()
        .fold(("", 0.0), |acc, e| if e.1 >= acc.1 { e } else { acc });
    Ok((
        worst <= 1e-4,
        format!(
            "{} gradient checks, worst relative error {worst:.2e} ({name}), limit 1e-4",
            errors.len()
        ),
    ))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let variant = [Variant::Full, Variant::AttnAttn, Variant::MaxAttn, Variant::LowFusion][rng.gen_range(0..4)];
    let depth = rng.gen_range(1..=3);
    variant.apply(&ModelConfig {
        num_classes: rng.gen_range(2..=8),
        k: rng.gen_range(1..=8),
        stream_widths: (0..depth).map(|_| rng.gen_range(2..=12)).collect(),
        fusion_width: 8,
        head_widths: vec![8],
        attention_hidden: if rng.gen_bool(0.5) {
            vec![]
        } else {
            vec![rng.gen_range(2..=6)]
        },
        seed: rng.gen(),
        ..ModelConfig::default()
    })
}

pub(super) fn attention_normalization(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut weights = 0usize;
    for pass in 0..100 {
        let cfg = random_model(&mut rng);
        let m = rng.gen_range(cfg.k + 2..=60);
        let mut net = TsgcNet::<f32>::new(cfg)?;
        let x = random_features(m, &mut rng).cast::<f32>();
        let opts = if pass % 2 == 0 {
            ForwardOptions::train()
        } else {
            ForwardOptions::eval()
        };
        let fp = net.forward(&x, opts)?;
        for &a in fp.trace.attention.iter().flatten().flatten() {
            let alpha = fp.tape.value(a);
            let (cells, k, ch) = (alpha.shape()[0], alpha.shape()[1], alpha.shape()[2]);
            for i in 0..cells {
                for c in 0..ch {
                    let s: f64 = (0..k).map(|j| f64::from(alpha.data()[(i * k + j) * ch + c])).sum();
                    worst = worst.max((s - 1.0).abs());
                    weights += 1;
                }
            }
        }
    }
    Ok((
        weights > 0 && worst <= 1e-5,
        format!("100 passes, {weights} weight sums, worst |sum - 1| {worst:.2e}, limit 1e-5"),
    ))
}

fn run_layer(
    layer: &AggregationLayer,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    g: &KnnGraph,
    mode: Mode,
) -> Result<Tensor<f64>> {
    let mut s = Session::new(store, mode, false);
    let xv = s.tape.constant(x.clone());
    let out = layer.forward(&mut s, xv, g)?;
    Ok(s.tape.value(out.output).clone())
}

pub(super) fn aggregation_invariance(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut max_identical, mut att_worst) = (true, 0.0f64);
    let trials = 20;
    for _ in 0..trials {
        let (m, d, k, c) = (
            rng.gen_range(10..40),
            rng.gen_range(1..6),
            rng.gen_range(2..9),
            rng.gen_range(1..9),
        );
        let x = random(&[m, d], &mut rng);
        let graph = build_knn_graph(&x, k, false)?;
        let rows: Vec<Vec<usize>> = (0..m)
            .map(|i| {
                let mut r: Vec<usize> = graph.neighbors(i).collect();
                r.shuffle(&mut rng);
                r
            })
            .collect();
        let shuffled = KnnGraph::from_table(IndexTable::from_rows(&rows)?);

        let mut store = ParamStore::new();
        let mp = AggregationLayer::MaxPool(GraphMaxPoolLayer::new(&mut store, &mut rng, "l", d, c, NORM, SLOPE)?);
        let a = run_layer(&mp, &mut store, &x, &graph, Mode::Eval)?;
        let b = run_layer(&mp, &mut store, &x, &shuffled, Mode::Eval)?;
        max_identical &= a == b;

        let mut store = ParamStore::new();
        let hidden = if rng.gen_bool(0.5) { vec![] } else { vec![4] };
        let att = AggregationLayer::Attention(GraphAttentionLayer::new(
            &mut store, &mut rng, "l", d, c, &hidden, NORM, SLOPE,
        )?);
        for mode in [Mode::Eval, Mode::Train] {
            let mut s1 = store.clone();
            let mut s2 = store.clone();
            let a = run_layer(&att, &mut s1, &x, &graph, mode)?;
            let b = run_layer(&att, &mut s2, &x, &shuffled, mode)?;
            att_worst = att_worst.max(a.max_abs_diff(&b));
        }
    }
    Ok((
        max_identical && att_worst <= 1e-6,
        format!(
            "{trials} shuffled graphs, max-pool bit-identical: {max_identical}, attention worst diff {att_worst:.2e}, limit 1e-6"
        ),
    ))
}

pub(super) fn knn_oracle(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for set in 0..50 {
        let m = match set {
            0 | 1 => 2000,
            _ if set % 10 == 0 => rng.gen_range(500..=2000),
            _ => rng.gen_range(2..300),
        };
        let d = rng.gen_range(1..=12);
        let include_self = set % 2 == 1;
        let k = rng.gen_range(1..=(if include_self { m } else { m - 1 }).min(40));
        // Every third set uses a tiny integer grid, so equal distances are
        // common and the index tie-break decides membership and order.
        let integer = set % 3 == 0;
        let data: Vec<f64> = (0..m * d)
            .map(|_| {
                if integer {
                    f64::from(rng.gen_range(0..3))
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        ties += usize::from(integer);
        let x = Tensor::new(vec![m, d], data)?;
        let graph = build_knn_graph(&x, k, include_self)?;
        let expected = brute_force_knn(x.data(), m, d, k, include_self);
        let same = (0..m).all(|i| graph.neighbors(i).eq(expected[i].iter().copied()));
        if !same {
            mismatches.push(set);
        }
    }
    Ok((
        mismatches.is_empty(),
        format!("50 feature sets ({ties} with integer ties), mismatched sets: {mismatches:?}"),
    ))
}

pub(super) fn loss_sanity(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (m, c) = (64, 8);
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
    let ce = |logits: Tensor<f64>, reduction| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.constant(logits);
        let loss = t.cross_entropy(l, &labels, reduction)?;
        Ok(t.value(loss).data()[0])
    };
    let uniform = ce(Tensor::full(vec![m, c], 0.37), Reduction::Mean)?;
    let uniform_err = (uniform - 8f64.ln()).abs();
    let uniform_sum = ce(Tensor::full(vec![m, c], -1.5), Reduction::Sum)? / m as f64;
    let sum_err = (uniform_sum - 8f64.ln()).abs();

    let mut forcing = Tensor::zeros(vec![m, c]);
    for (i, &y) in labels.iter().enumerate() {
        forcing.data_mut()[i * c + y] = 50.0;
    }
    let forced = ce(forcing, Reduction::Mean)?;

    let logits = random(&[m, c], &mut rng);
    let expected: f64 = (0..m).map(|i| cross_entropy_row(logits.row(i), labels[i])).sum::<f64>() / m as f64;
    let oracle_err = (ce(logits, Reduction::Mean)? - expected).abs();
    Ok((
        uniform_err <= 1e-5 && sum_err <= 1e-5 && forced <= 1e-6 && oracle_err <= 1e-9,
        format!(
            "uniform {uniform:.6} (ln 8 error {:.1e}), forcing {forced:.1e}, random logits error {oracle_err:.1e}",
            uniform_err.max(sum_err)
        ),
    ))
}

pub(super) fn metric_oracle(_: &mut Context) -> Outcome {
    let mut hand = ConfusionMatrix::new(2);
    hand.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1])?;
    let h = hand.metrics()?;
    let hand_ok = h.overall_accuracy == 0.75 && (h.mean_iou - 0.5833).abs() < 5e-5;

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut failures = 0;
    for _ in 0..100 {
        let c = rng.gen_range(2..=10);
        let n = rng.gen_range(1..=500);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        // Bias towards correct predictions so IoUs spread over (0, 1).
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..c) })
            .collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &truth)?;
        let got = cm.metrics()?;
        let (oa, iou, miou) = set_metrics(c, &truth, &pred);
        if got.overall_accuracy != oa || got.iou != iou || got.mean_iou != miou {
            failures += 1;
        }
    }
    Ok((
        hand_ok && failures == 0,
        format!(
            "hand example OA {:.4} mIoU {:.4}; {failures}/100 random pairs differ from the set oracle",
            h.overall_accuracy, h.mean_iou
        ),
    ))
}

pub(super) fn overfit(ctx: &mut Context) -> Outcome {
    let setup = &ctx.suite.overfit;
    let mesh = generate(&setup.arch)?;
    let data = TrainingSet::new(std::slice::from_ref(&mesh), setup.model.num_classes)?;
    let cfg = TrainConfig {
        epochs: setup.steps,
        batch_size: 1,
        ..setup.train.clone()
    };
    let mut trainer = Trainer::new(TsgcNet::new(setup.model.clone())?, cfg)?;
    let log = trainer.fit(&data, setup.steps, |_, _| Ok(()))?;
    let steps = trainer.adam().step;
    let mut model = trainer.into_model();
    let acc = evaluate(&mut model, std::slice::from_ref(&mesh))?
        .metrics()?
        .overall_accuracy;
    let last = log.last().map_or(0.0, |r| r.train_oa);
    Ok((
        acc >= setup.min_accuracy && steps as usize <= setup.steps,
        format!(
            "M={} C={} after {steps} steps: accuracy {acc:.4} (last training-mode batch {last:.4}), need {}",
            mesh.num_cells(),
            setup.model.num_classes,
            setup.min_accuracy
        ),
    ))
}

pub(super) fn generalization_run(setup: &GeneralizationSetup, variant: Variant) -> Result<RunResult> {
    let (train, test) = generate_split(&setup.arch, setup.seed, setup.n_train, setup.n_test)?;
    let mut config = setup.run_config();
    config.model = variant.apply(&config.model);
    train_and_evaluate(&config, &train, &test, |_| {})
}

pub(super) fn generalization(ctx: &mut Context) -> Outcome {
    let min = ctx.suite.generalization.min_miou;
    let (n_train, n_test) = (ctx.suite.generalization.n_train, ctx.suite.generalization.n_test);
    let baseline = ctx.baseline;
    let m = &ctx.generalization_run(Variant::Full)?.metrics;
    let miou = m.mean_iou;
    let mut ok = miou >= min;
    let mut detail = format!(
        "{n_train} train / {n_test} test arches: OA {:.4} mIoU {miou:.4}, need {min}",
        m.overall_accuracy
    );
    match baseline {
        Some(b) => {
            let drift = (miou - b.miou).abs();
            ok &= drift <= b.tolerance;
            detail.push_str(&format!(
                "; baseline {:.4} drift {drift:.1e} (limit {:.1e})",
                b.miou, b.tolerance
            ));
        }
        None => detail.push_str("; no baseline recorded"),
    }
    Ok((ok, detail))
}

pub(super) fn ablation_ordering(ctx: &mut Context) -> Outcome {
    let full = ctx.generalization_run(Variant::Full)?.metrics.mean_iou;
    let n = ctx.generalization_run(Variant::NormalsOnly)?.metrics.mean_iou;
    let c = ctx.generalization_run(Variant::CoordsOnly)?.metrics.mean_iou;
    // Reported only: small margins need not survive on synthetic arches.
    let aa = ctx.generalization_run(Variant::AttnAttn)?.metrics.mean_iou;
    let low = ctx.generalization_run(Variant::LowFusion)?.metrics.mean_iou;
    Ok((
        full >= n && full >= c,
        format!(
            "mIoU TSGCNet {full:.4}, TSGCNet-N {n:.4}, TSGCNet-C {c:.4}; not gated: A+A {aa:.4}, L-fusion {low:.4}"
        ),
    ))
}

fn small_run_setup() -> Result<(TrainingSet, ModelConfig, TrainConfig)> {
    let spec = ArchSpec {
        num_teeth: 3,
        cells_target: 300,
        ..ArchSpec::default()
    };
    let meshes: Vec<TriangleMesh> = (0..4)
        .map(|s| {
            generate(&ArchSpec {
                seed: 90 + s,
                ..spec.clone()
            })
        })
        .collect::<Result<_>>()?;
    let model = ModelConfig {
        num_classes: spec.num_classes(),
        k: 8,
        stream_widths: vec![8, 16],
        fusion_width: 16,
        head_widths: vec![16, 8],
        seed: 5,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 4,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    Ok((TrainingSet::new(&meshes, model.num_classes)?, model, train))
}

pub(super) fn determinism(_: &mut Context) -> Outcome {
    let (data, model, cfg) = small_run_setup()?;
    let run = |until: usize| -> Result<(Trainer, Vec<crate::train::EpochRecord>)> {
        let mut t = Trainer::new(TsgcNet::new(model.clone())?, cfg.clone())?;
        let log = t.fit(&data, until, |_, _| Ok(()))?;
        Ok((t, log))
    };
    let (a, log_a) = run(cfg.epochs)?;
    let (b, log_b) = run(cfg.epochs)?;
    let bytes_a = a.checkpoint().to_bytes();
    let same_trajectory = log_a == log_b && bytes_a == b.checkpoint().to_bytes();

    let path = std::env::temp_dir().join(format!("tsgcnet-verify-{}.tsgc", std::process::id()));
    a.checkpoint().save(&path)?;
    let on_disk = std::fs::read(&path)?;
    let reloaded = Checkpoint::load(&path)?.to_bytes();
    std::fs::remove_file(&path)?;
    let round_trip = on_disk == bytes_a && reloaded == bytes_a;

    let (half, mut log) = run(cfg.epochs / 2)?;
    let mut resumed = Trainer::resume(Checkpoint::from_bytes(&half.checkpoint().to_bytes())?, cfg.clone())?;
    log.extend(resumed.fit(&data, cfg.epochs, |_, _| Ok(()))?);
    let resume_equal = log == log_a && resumed.checkpoint().to_bytes() == bytes_a;

    Ok((
        same_trajectory && round_trip && resume_equal,
        format!(
            "repeat run bit-identical: {same_trajectory}, checkpoint round trip ({} bytes): {round_trip}, resume {}+{} epochs: {resume_equal}",
            bytes_a.len(),
            cfg.epochs / 2,
            cfg.epochs - cfg.epochs / 2
        ),
    ))
}

fn max_vec_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
        .fold(0.0, f64::max)
}

/// Rotate every 3-vector of a feature block.
fn rotate_block(t: &Tensor<f64>, r: &[[f64; 3]; 3]) -> Tensor<f64> {
    let data = t.data().chunks(3).flat_map(|v| rotate(r, [v[0], v[1], v[2]])).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub(super) fn geometry(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mesh = generate(&ArchSpec {
        num_teeth: 5,
        cells_target: 600,
        seed: 77,
        ..ArchSpec::default()
    })?;
    let (mut rot_err, mut trans_err, mut aug_err, mut labels_ok) = (0.0f64, 0.0f64, 0.0f64, true);
    for _ in 0..10 {
        let axis = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let r = axis_angle(axis, rng.gen_range(-3.1..3.1));
        let base = mesh_features::<f64>(&mesh, false);
        let rotated = mesh_features::<f64>(&mesh.map_vertices(|v| rotate(&r, v)), false);
        rot_err = rot_err
            .max(rotated.coords.max_abs_diff(&rotate_block(&base.coords, &r)))
            .max(rotated.normals.max_abs_diff(&rotate_block(&base.normals, &r)));

        let t: Vec3 = [0; 3].map(|_| rng.gen_range(-50.0..50.0));
        let moved = mesh_features::<f64>(&mesh.map_vertices(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]]), true);
        let centered = mesh_features::<f64>(&mesh, true);
        trans_err = trans_err
            .max(moved.coords.max_abs_diff(&centered.coords))
            .max(moved.normals.max_abs_diff(&centered.normals));

        let aug = Augmentation::sample(&mut rng, 10.0, std::f64::consts::FRAC_PI_6);
        let out = aug.apply(&mesh);
        labels_ok &= out.labels() == mesh.labels() && out.faces() == mesh.faces();
        let ry = rotation_y(aug.angle);
        let before = compute_normals(&mesh);
        let after = compute_normals(&out);
        let expect_face: Vec<Vec3> = before.face.iter().map(|&n| apply_matrix(&ry, n)).collect();
        let expect_vertex: Vec<Vec3> = before.vertex.iter().map(|&n| apply_matrix(&ry, n)).collect();
        aug_err = aug_err
            .max(max_vec_diff(&after.face, &expect_face))
            .max(max_vec_diff(&after.vertex, &expect_vertex));
    }
    Ok((
        rot_err <= 1e-5 && trans_err <= 1e-6 && aug_err <= 1e-5 && labels_ok,
        format!(
            "rotation {rot_err:.1e} (limit 1e-5), translation {trans_err:.1e} (limit 1e-6), augmented normals {aug_err:.1e} (limit 1e-5), labels kept: {labels_ok}"
        ),
    ))
}
