//! Exact K-nearest-neighbor graphs in feature space, and the edge tensors
//! built on them.

use crate::error::{Error, Result};
use crate::tensor::{IndexTable, Real, Tape, Tensor, Var};

/// `M × K` neighbor table. Row `i` lists neighbor cell ids by
/// non-decreasing feature distance, ties broken by lower cell id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    indices: IndexTable,
}

impl KnnGraph {
    pub fn from_table(indices: IndexTable) -> Self {
        KnnGraph { indices }
    }

    pub fn k(&self) -> usize {
        self.indices.cols()
    }

    pub fn num_cells(&self) -> usize {
        self.indices.rows()
    }

    pub fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.indices.row(cell).iter().map(|&j| j as usize)
    }

    pub fn table(&self) -> &IndexTable {
        &self.indices
    }

    /// Block-diagonal union of per-mesh graphs: the cells of graph `n` are
    /// offset by the total cell count of graphs `0..n`.
    pub fn stack(graphs: &[KnnGraph]) -> Result<KnnGraph> {
        let k = graphs.first().map_or(0, KnnGraph::k);
        let rows: usize = graphs.iter().map(KnnGraph::num_cells).sum();
        let mut data = Vec::with_capacity(rows * k);
        let mut offset = 0u32;
        for g in graphs {
            if g.k() != k {
                return Err(Error::shape("knn stack", &[k], &[g.k()]));
            }
            data.extend(g.indices.as_slice().iter().map(|&j| j + offset));
            offset += g.num_cells() as u32;
        }
        Ok(KnnGraph {
            indices: IndexTable::new(rows, k, data)?,
        })
    }
}

/// Squared Euclidean distance accumulated in f64.
#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Exact KNN graph over the rows of `features` (`M × d`). The center cell is
/// excluded unless `include_self` is set, in which case it competes like any
/// other cell (distance 0).
pub fn build_knn_graph<T: Real>(features: &Tensor<T>, k: usize, include_self: bool) -> Result<KnnGraph> {
    if features.ndim() != 2 {
        return Err(Error::Usage(format!(
            "knn features must be 2-D, got {:?}",
            features.shape()
        )));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let available = if include_self { m } else { m.saturating_sub(1) };
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "K = {k} needs more cells than M = {m} ({} self)",
            if include_self { "including" } else { "excluding" }
        )));
    }
    if !features.is_finite() {
        return Err(Error::Data("knn features contain non-finite values".into()));
    }
    let x = features.to_f64_vec();
    let mut data = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(m);
    for i in 0..m {
        let xi = &x[i * d..(i + 1) * d];
        cand.clear();
        cand.extend(
            (0..m)
                .filter(|&j| include_self || j != i)
                .map(|j| (squared_distance(xi, &x[j * d..(j + 1) * d]), j as u32)),
        );
        let order = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        data.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph {
        indices: IndexTable::new(m, k, data)?,
    })
}

/// Differentiable edge tensors over a KNN graph: `concat[i, j] = f_i ⊕ f_ij`
/// (`M × K × 2d`) and `diff[i, j] = f_i − f_ij` (`M × K × d`).
pub fn edge_tensors<T: Real>(tape: &mut Tape<T>, features: Var, graph: &KnnGraph) -> Result<(Var, Var)> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[0] != graph.num_cells() {
        return Err(Error::shape("edge_tensors", &s, &[graph.num_cells(), graph.k()]));
    }
    let center = tape.gather_rows(features, &IndexTable::identity(s[0], graph.k()))?;
    let neighbor = tape.gather_rows(features, graph.table())?;
    let concat = tape.concat(&[center, neighbor], 2)?;
    let diff = tape.sub(center, neighbor)?;
    Ok((concat, diff))
}
