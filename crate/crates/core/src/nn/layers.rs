//! Graph aggregation layers: learned neighbor attention and channel-wise
//! max-pooling over calibrated neighbor features.

use rand::Rng;

use super::modules::{EdgeMlp, Linear};
use super::params::{ParamStore, Session};
use crate::error::Result;
use crate::knn::KnnGraph;
use crate::tensor::{EdgeInput, Real, Var};

/// Layer result. `attention` holds the `M × K × k` neighbor weights when
/// the layer computes them.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub output: Var,
    pub calibrated: Var,
    pub attention: Option<Var>,
}

fn calibration<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    norm: (f64, f64),
    slope: f64,
) -> Result<EdgeMlp> {
    EdgeMlp::new(
        store,
        rng,
        &format!("{name}.calibrate"),
        EdgeInput::Concat,
        in_dim,
        out_dim,
        Some(norm),
        Some(slope),
    )
}

/// Calibrated neighbor features `f̂_ij = MLP(f_i ⊕ f_ij)`, weighted by
/// per-channel attention `α_ij = softmax_j σ((f_i − f_ij) ⊕ f_ij)` and summed
/// over the neighborhood.
#[derive(Clone, Debug)]
pub struct GraphAttentionLayer {
    calibrate: EdgeMlp,
    score_in: EdgeMlp,
    score_rest: Vec<Linear>,
    slope: f64,
}

impl GraphAttentionLayer {
    /// `score_hidden` lists hidden widths of σ; empty means a single affine
    /// map straight to `out_dim` scores.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        score_hidden: &[usize],
        norm: (f64, f64),
        slope: f64,
    ) -> Result<Self> {
        let calibrate = calibration(store, rng, name, in_dim, out_dim, norm, slope)?;
        let first = score_hidden.first().copied().unwrap_or(out_dim);
        let score_in = EdgeMlp::new(
            store,
            rng,
            &format!("{name}.score.0"),
            EdgeInput::DiffConcat,
            in_dim,
            first,
            None,
            (!score_hidden.is_empty()).then_some(slope),
        )?;
        let mut score_rest = Vec::new();
        let mut prev = first;
        let rest = if score_hidden.is_empty() {
            &[][..]
        } else {
            &score_hidden[1..]
        };
        for (i, &w) in rest.iter().chain(score_hidden.first().map(|_| &out_dim)).enumerate() {
            score_rest.push(Linear::new(
                store,
                rng,
                &format!("{name}.score.{}", i + 1),
                prev,
                w,
                true,
            )?);
            prev = w;
        }
        Ok(GraphAttentionLayer {
            calibrate,
            score_in,
            score_rest,
            slope,
        })
    }

    pub fn calibrate(&self) -> &EdgeMlp {
        &self.calibrate
    }

    pub fn score_input(&self) -> &EdgeMlp {
        &self.score_in
    }

    pub fn score_rest(&self) -> &[Linear] {
        &self.score_rest
    }

    pub fn out_dim(&self) -> usize {
        self.calibrate.out_dim()
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, graph: &KnnGraph) -> Result<LayerOutput> {
        let calibrated = self.calibrate.forward(s, x, graph)?;
        let mut scores = self.score_in.forward(s, x, graph)?;
        let last = self.score_rest.len().saturating_sub(1);
        for (i, lin) in self.score_rest.iter().enumerate() {
            scores = lin.forward(s, scores)?;
            if i < last {
                scores = s.tape.leaky_relu(scores, self.slope);
            }
        }
        let alpha = s.tape.softmax_axis(scores, 1)?;
        let weighted = s.tape.mul(alpha, calibrated)?;
        let output = s.tape.sum_axis(weighted, 1)?;
        Ok(LayerOutput {
            output,
            calibrated,
            attention: Some(alpha),
        })
    }
}

/// Channel-wise maximum over calibrated neighbor features.
#[derive(Clone, Debug)]
pub struct GraphMaxPoolLayer {
    calibrate: EdgeMlp,
}

impl GraphMaxPoolLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        norm: (f64, f64),
        slope: f64,
    ) -> Result<Self> {
        Ok(GraphMaxPoolLayer {
            calibrate: calibration(store, rng, name, in_dim, out_dim, norm, slope)?,
        })
    }

    pub fn calibrate(&self) -> &EdgeMlp {
        &self.calibrate
    }

    pub fn out_dim(&self) -> usize {
        self.calibrate.out_dim()
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, graph: &KnnGraph) -> Result<LayerOutput> {
        let calibrated = self.calibrate.forward(s, x, graph)?;
        let output = s.tape.max_axis(calibrated, 1)?;
        Ok(LayerOutput {
            output,
            calibrated,
            attention: None,
        })
    }
}

#[derive(Clone, Debug)]
pub enum AggregationLayer {
    Attention(GraphAttentionLayer),
    MaxPool(GraphMaxPoolLayer),
}

impl AggregationLayer {
    pub fn out_dim(&self) -> usize {
        match self {
            AggregationLayer::Attention(l) => l.out_dim(),
            AggregationLayer::MaxPool(l) => l.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            AggregationLayer::Attention(l) => l.calibrate.in_dim(),
            AggregationLayer::MaxPool(l) => l.calibrate.in_dim(),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, graph: &KnnGraph) -> Result<LayerOutput> {
        match self {
            AggregationLayer::Attention(l) => l.forward(s, x, graph),
            AggregationLayer::MaxPool(l) => l.forward(s, x, graph),
        }
    }
}

#[cfg(test)]
mod tests;
