use rand::Rng;

use super::params::{BufferId, Mode, ParamId, ParamStore, Session};
use crate::error::Result;
use crate::knn::KnnGraph;
use crate::tensor::{BnMode, EdgeInput, Real, Tensor, Var};

/// Fan-in scaled uniform init in `[-1/√fan_in, 1/√fan_in]`.
fn uniform<T: Real, R: Rng>(rng: &mut R, shape: [usize; 2], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..shape[0] * shape[1])
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Affine map applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_param(format!("{name}.weight"), uniform(rng, [in_dim, out_dim], in_dim))?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.affine(x, w, b)
    }
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()))?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()))?,
            eps,
            momentum,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn running_stats<'a, T: Real>(&self, store: &'a ParamStore<T>) -> (&'a [T], &'a [T]) {
        (
            store.buffer(self.running_mean).data(),
            store.buffer(self.running_var).data(),
        )
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let mode = s.mode();
        let (tape, store) = s.tape_and_store();
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train { eps: self.eps })?;
                let stats = stats.expect("train mode yields statistics");
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (r, &b) in store
                    .buffer_mut(self.running_mean)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.mean)
                {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in store
                    .buffer_mut(self.running_var)
                    .data_mut()
                    .iter_mut()
                    .zip(&stats.var_unbiased)
                {
                    *r = keep * *r + m * b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).data();
                let var = store.buffer(self.running_var).data();
                let (y, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean,
                        var,
                        eps: self.eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Shared per-cell block: affine, then optional batch norm, then optional
/// LeakyReLU. Rows never mix except through batch statistics.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    linear: Linear,
    bn: Option<BatchNorm>,
    slope: Option<f64>,
}

impl SharedMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        norm: Option<(f64, f64)>,
        slope: Option<f64>,
    ) -> Result<Self> {
        let linear = Linear::new(store, rng, &format!("{name}.linear"), in_dim, out_dim, true)?;
        let bn = match norm {
            Some((eps, momentum)) => Some(BatchNorm::new(store, &format!("{name}.bn"), out_dim, eps, momentum)?),
            None => None,
        };
        Ok(SharedMlp { linear, bn, slope })
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        self.bn.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.linear.forward(s, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        if let Some(slope) = self.slope {
            y = s.tape.leaky_relu(y, slope);
        }
        Ok(y)
    }
}

/// Shared MLP over the edges of a KNN graph: `2d → k` affine on the edge
/// feature (`f_i ⊕ f_ij` or `(f_i − f_ij) ⊕ f_ij`), with optional batch norm
/// and LeakyReLU. Output is `M × K × k`.
#[derive(Clone, Debug)]
pub struct EdgeMlp {
    weight: ParamId,
    bias: ParamId,
    input: EdgeInput,
    bn: Option<BatchNorm>,
    slope: Option<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl EdgeMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: EdgeInput,
        in_dim: usize,
        out_dim: usize,
        norm: Option<(f64, f64)>,
        slope: Option<f64>,
    ) -> Result<Self> {
        let weight = store.add_param(
            format!("{name}.weight"),
            uniform(rng, [2 * in_dim, out_dim], 2 * in_dim),
        )?;
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        let bn = match norm {
            Some((eps, momentum)) => Some(BatchNorm::new(store, &format!("{name}.bn"), out_dim, eps, momentum)?),
            None => None,
        };
        Ok(EdgeMlp {
            weight,
            bias,
            input,
            bn,
            slope,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn input(&self) -> EdgeInput {
        self.input
    }

    pub fn batch_norm(&self) -> Option<&BatchNorm> {
        self.bn.as_ref()
    }

    pub fn slope(&self) -> Option<f64> {
        self.slope
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, graph: &KnnGraph) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let mut y = s.tape.edge_affine(x, graph.table(), w, Some(b), self.input)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        if let Some(slope) = self.slope {
            y = s.tape.leaky_relu(y, slope);
        }
        Ok(y)
    }
}
