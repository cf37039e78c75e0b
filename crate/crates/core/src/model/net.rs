use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Aggregation, FusionLevel, ModelConfig, Streams};
use crate::error::{Error, Result};
use crate::knn::{build_knn_graph, KnnGraph};
use crate::mesh::{CellFeatureMatrix, BLOCK_WIDTH};
use crate::nn::{AggregationLayer, GraphAttentionLayer, GraphMaxPoolLayer, Mode, ParamStore, Session, SharedMlp};
use crate::tensor::{Real, Reduction, Tape, Tensor, Var};

/// Which block of the cell encoding a stream consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamInput {
    Coords,
    Normals,
    Combined,
}

impl StreamInput {
    pub fn width(self) -> usize {
        match self {
            StreamInput::Coords | StreamInput::Normals => BLOCK_WIDTH,
            StreamInput::Combined => 2 * BLOCK_WIDTH,
        }
    }
}

/// One stream: a stack of aggregation layers plus its fusion block.
#[derive(Clone, Debug)]
pub struct Stream {
    pub name: String,
    pub input: StreamInput,
    pub layers: Vec<AggregationLayer>,
    pub fusion: SharedMlp,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub streams: Vec<Stream>,
    pub head: Vec<SharedMlp>,
}

/// Gradient tracking and graph options for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub track_params: bool,
    pub coords_grad: bool,
    pub normals_grad: bool,
    /// Per-layer graphs to use instead of building them from features.
    pub graphs: Option<&'a [KnnGraph]>,
}

impl ForwardOptions<'_> {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            track_params: true,
            coords_grad: false,
            normals_grad: false,
            graphs: None,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            track_params: false,
            ..Self::train()
        }
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub coords: Var,
    pub normals: Var,
    /// `layers[s][l]` is the output of layer `l` in stream `s`.
    pub layers: Vec<Vec<Var>>,
    /// `layer_inputs[s][l]` is the input of layer `l` in stream `s`.
    pub layer_inputs: Vec<Vec<Var>>,
    pub attention: Vec<Vec<Option<Var>>>,
    pub graphs: Vec<KnnGraph>,
    pub fused: Vec<Var>,
    pub head_input: Var,
}

pub struct ForwardPass<T: Real> {
    pub tape: Tape<T>,
    pub logits: Var,
    pub trace: Trace,
    pub bindings: Vec<Option<Var>>,
    /// Cells per stacked mesh.
    pub segments: Vec<usize>,
}

impl<T: Real> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    pub fn probabilities(&self) -> Tensor<T> {
        softmax_rows(self.logits())
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits())
    }

    /// Cross-entropy of the logits against `labels`, appended to the tape.
    pub fn loss(&mut self, labels: &[usize], reduction: Reduction) -> Result<Var> {
        self.tape.cross_entropy(self.logits, labels, reduction)
    }
}

/// Row-wise softmax of an `M × C` matrix.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

/// Row-wise argmax; ties go to the lowest class.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// The two-stream network with its parameters.
#[derive(Clone, Debug)]
pub struct TsgcNet<T: Real> {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore<T>,
}

impl<T: Real> TsgcNet<T> {
    /// Build and initialize from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let norm = Some((config.bn_eps, config.bn_momentum));
        let slope = config.leaky_slope;
        let plan: Vec<(&str, StreamInput, Aggregation)> = match config.streams {
            Streams::Both => vec![
                ("c", StreamInput::Coords, config.c_stream_agg),
                ("n", StreamInput::Normals, config.n_stream_agg),
            ],
            Streams::CoordsOnly => vec![("c", StreamInput::Coords, config.c_stream_agg)],
            Streams::NormalsOnly => vec![("n", StreamInput::Normals, config.n_stream_agg)],
            Streams::SingleConcat => vec![("s", StreamInput::Combined, Aggregation::Attention)],
        };
        let low = config.fusion_level == FusionLevel::Low;
        let mut streams = Vec::new();
        for (name, input, agg) in plan.iter().copied() {
            let mut layers = Vec::new();
            let mut in_dim = input.width();
            for (l, &width) in config.stream_widths.iter().enumerate() {
                let lname = format!("{name}.layer{l}");
                let bn = (config.bn_eps, config.bn_momentum);
                layers.push(match agg {
                    Aggregation::Attention => AggregationLayer::Attention(GraphAttentionLayer::new(
                        &mut store,
                        &mut rng,
                        &lname,
                        in_dim,
                        width,
                        &config.attention_hidden,
                        bn,
                        slope,
                    )?),
                    Aggregation::MaxPool => AggregationLayer::MaxPool(GraphMaxPoolLayer::new(
                        &mut store, &mut rng, &lname, in_dim, width, bn, slope,
                    )?),
                });
                in_dim = if low { width * plan.len() } else { width };
            }
            let skip: usize = config.stream_widths.iter().sum();
            let fusion = SharedMlp::new(
                &mut store,
                &mut rng,
                &format!("mlp_{name}"),
                skip,
                config.fusion_width,
                norm,
                Some(slope),
            )?;
            streams.push(Stream {
                name: name.to_string(),
                input,
                layers,
                fusion,
            });
        }
        let mut head = Vec::new();
        let mut in_dim = config.fusion_width * streams.len();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(SharedMlp::new(
                &mut store,
                &mut rng,
                &format!("pred.{i}"),
                in_dim,
                w,
                norm,
                Some(slope),
            )?);
            in_dim = w;
        }
        head.push(SharedMlp::new(
            &mut store,
            &mut rng,
            &format!("pred.{}", config.head_widths.len()),
            in_dim,
            config.num_classes,
            None,
            None,
        )?);
        Ok(TsgcNet {
            config,
            arch: Architecture { streams, head },
            store,
        })
    }

    /// Rebuild the architecture of `config` around an existing parameter
    /// store. Every parameter and buffer must match by name and shape.
    pub fn with_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        let fresh = &net.store;
        let mismatch = |what: &str| {
            Err(Error::Format {
                line: None,
                msg: what.to_string(),
            })
        };
        if fresh.num_params() != store.num_params() || fresh.buffers().count() != store.buffers().count() {
            return mismatch("parameter set does not match the model configuration");
        }
        for (a, b) in fresh.params().iter().zip(store.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return mismatch(&format!(
                    "parameter {:?} does not match {:?} {:?}",
                    b.name,
                    a.name,
                    a.value.shape()
                ));
            }
        }
        for ((an, a), (bn, b)) in fresh.buffers().zip(store.buffers()) {
            if an != bn || a.shape() != b.shape() {
                return mismatch(&format!("buffer {bn:?} does not match {an:?} {:?}", a.shape()));
            }
        }
        net.store = store;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> TsgcNet<U> {
        TsgcNet {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    /// Forward pass over one mesh.
    pub fn forward(&mut self, features: &CellFeatureMatrix<T>, opts: ForwardOptions<'_>) -> Result<ForwardPass<T>> {
        self.forward_batch(std::slice::from_ref(features), opts)
    }

    /// Forward pass over several meshes stacked along the cell axis. Each
    /// mesh gets its own KNN graphs; batch-norm statistics span the batch.
    pub fn forward_batch(
        &mut self,
        meshes: &[CellFeatureMatrix<T>],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass<T>> {
        if meshes.is_empty() {
            return Err(Error::Usage("forward needs at least one mesh".into()));
        }
        let segments: Vec<usize> = meshes.iter().map(CellFeatureMatrix::num_cells).collect();
        let k = self.config.k;
        if let Some(&m) = segments.iter().find(|&&m| m <= k) {
            return Err(Error::Config(format!("mesh has {m} cells, needs more than K = {k}")));
        }
        let nlayers = self.config.stream_widths.len();
        if let Some(g) = opts.graphs {
            if g.len() != nlayers {
                return Err(Error::Usage(format!("expected {nlayers} graphs, got {}", g.len())));
            }
        }
        for m in meshes {
            if !m.coords.is_finite() || !m.normals.is_finite() {
                return Err(Error::Data("cell features contain non-finite values".into()));
            }
        }
        let stacked = CellFeatureMatrix::stack(meshes);
        let low = self.config.fusion_level == FusionLevel::Low;
        let include_self = self.config.include_self;
        let arch = &self.arch;

        let mut s = Session::new(&mut self.store, opts.mode, opts.track_params);
        let coords = s.tape.leaf(stacked.coords, opts.coords_grad);
        let normals = s.tape.leaf(stacked.normals, opts.normals_grad);
        let mut inputs: Vec<Var> = Vec::new();
        for st in &arch.streams {
            inputs.push(match st.input {
                StreamInput::Coords => coords,
                StreamInput::Normals => normals,
                StreamInput::Combined => s.tape.concat(&[coords, normals], 1)?,
            });
        }
        let ns = arch.streams.len();
        let mut layers = vec![Vec::new(); ns];
        let mut layer_inputs = vec![Vec::new(); ns];
        let mut attention = vec![Vec::new(); ns];
        let mut graphs = Vec::new();
        for l in 0..nlayers {
            let graph = match opts.graphs {
                Some(g) => g[l].clone(),
                None => segmented_knn(s.tape.value(inputs[0]), &segments, k, include_self)?,
            };
            for (si, st) in arch.streams.iter().enumerate() {
                let out = st.layers[l].forward(&mut s, inputs[si], &graph)?;
                layer_inputs[si].push(inputs[si]);
                layers[si].push(out.output);
                attention[si].push(out.attention);
            }
            graphs.push(graph);
            if low {
                let outs: Vec<Var> = layers.iter().map(|v| v[l]).collect();
                let joined = s.tape.concat(&outs, 1)?;
                inputs.iter_mut().for_each(|x| *x = joined);
            } else {
                for si in 0..ns {
                    inputs[si] = layers[si][l];
                }
            }
        }
        let mut fused = Vec::new();
        for (si, st) in arch.streams.iter().enumerate() {
            let skip = s.tape.concat(&layers[si], 1)?;
            fused.push(st.fusion.forward(&mut s, skip)?);
        }
        let head_input = s.tape.concat(&fused, 1)?;
        let mut x = head_input;
        for stage in &arch.head {
            x = stage.forward(&mut s, x)?;
        }
        let (tape, bindings) = s.finish();
        Ok(ForwardPass {
            tape,
            logits: x,
            trace: Trace {
                coords,
                normals,
                layers,
                layer_inputs,
                attention,
                graphs,
                fused,
                head_input,
            },
            bindings,
            segments,
        })
    }

    /// Add the gradients of `loss` to the parameter store.
    pub fn backward(&mut self, pass: &ForwardPass<T>, loss: Var) -> Result<()> {
        self.store.accumulate_grads(&pass.tape, &pass.bindings, loss)
    }

    /// Eval-mode class predictions for one mesh.
    pub fn predict(&mut self, features: &CellFeatureMatrix<T>) -> Result<Vec<usize>> {
        Ok(self.forward(features, ForwardOptions::eval())?.predictions())
    }
}

/// KNN graph of each stacked mesh, offset into one block-diagonal table.
fn segmented_knn<T: Real>(features: &Tensor<T>, segments: &[usize], k: usize, include_self: bool) -> Result<KnnGraph> {
    if segments.len() == 1 {
        return build_knn_graph(features, k, include_self);
    }
    let d = features.last_dim();
    let mut start = 0;
    let mut parts = Vec::with_capacity(segments.len());
    for &m in segments {
        let rows = Tensor::new(vec![m, d], features.data()[start * d..(start + m) * d].to_vec())?;
        parts.push(build_knn_graph(&rows, k, include_self)?);
        start += m;
    }
    KnnGraph::stack(&parts)
}
