//! KNN graph Laplacians over the rows of cube unfoldings, and the trace
//! regularizers that tie the decoder factors to them.

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::real::Real;
use crate::tensor::{unfold, DenseMatrix, HyperCube, Mode};

pub const DEFAULT_K: usize = 8;

/// Gaussian kernel width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    /// Mean distance from each sample to its k-th nearest neighbor.
    Auto,
    Fixed(f64),
}

impl Sigma {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Sigma::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Sigma::Fixed(v)),
            _ => Err(Error::arg(format!(
                "sigma must be `auto` or a positive number, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for Sigma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sigma::Auto => f.write_str("auto"),
            Sigma::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianGraph {
    adjacency: DenseMatrix,
    degree: Vec<f64>,
    laplacian: DenseMatrix,
    k: usize,
    sigma: f64,
}

impl LaplacianGraph {
    pub fn adjacency(&self) -> &DenseMatrix {
        &self.adjacency
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn laplacian(&self) -> &DenseMatrix {
        &self.laplacian
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The kernel width actually used (resolved when built with [`Sigma::Auto`]).
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.degree.len()
    }

    /// `tr(Fᵀ L F)` for `f` with one row per graph node.
    pub fn trace_quad(&self, f: &DenseMatrix) -> Result<f64> {
        if f.rows() != self.size() {
            return Err(Error::shape(format!(
                "factor has {} rows, graph has {} nodes",
                f.rows(),
                self.size()
            )));
        }
        let lf = self.laplacian.matmul(f)?;
        Ok(lf.data().iter().zip(f.data()).map(|(a, b)| a * b).sum())
    }

    pub fn laplacian_array<T: Real>(&self) -> Array<T> {
        let n = self.size();
        Array::from_f64(vec![n, n], self.laplacian.data())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian-weighted KNN graph over the rows of `samples`.
///
/// Node `j` is a neighbor of `i` if it is among the `k` closest other rows
/// (distance ties go to the lower index); the edge set is the union of both
/// directions.
pub fn knn_adjacency(samples: &DenseMatrix, k: usize, sigma: Sigma) -> Result<LaplacianGraph> {
    let n = samples.rows();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("k = {k} needs 1 <= k < number of samples ({n})")));
    }
    if let Sigma::Fixed(s) = sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::arg(format!("sigma must be positive, got {s}")));
        }
    }
    let dist: Vec<Vec<f64>> = exec::map_range(n, |i| (0..n).map(|j| sq_dist(samples.row(i), samples.row(j))).collect());
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect();
    let sigma = match sigma {
        Sigma::Fixed(s) => s,
        Sigma::Auto => {
            let mean = neighbors
                .iter()
                .enumerate()
                .map(|(i, nb)| dist[i][nb[k - 1]].sqrt())
                .sum::<f64>()
                / n as f64;
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        }
    };
    let mut mask = vec![false; n * n];
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            mask[i * n + j] = true;
            mask[j * n + i] = true;
        }
    }
    let s2 = sigma * sigma;
    let adjacency = DenseMatrix::from_fn(
        n,
        n,
        |i, j| {
            if mask[i * n + j] {
                (-dist[i][j] / s2).exp()
            } else {
                0.0
            }
        },
    );
    let degree = adjacency.row_sums();
    let laplacian = DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            degree[i] - adjacency.get(i, j)
        } else {
            -adjacency.get(i, j)
        }
    });
    Ok(LaplacianGraph {
        adjacency,
        degree,
        laplacian,
        k,
        sigma,
    })
}

/// Keeps every `stride`-th column.
fn subsample_columns(m: &DenseMatrix, stride: usize) -> DenseMatrix {
    if stride <= 1 {
        return m.clone();
    }
    let cols = m.cols().div_ceil(stride);
    DenseMatrix::from_fn(m.rows(), cols, |i, j| m.get(i, j * stride))
}

/// Band graph `L_S` from the rows of the mode-3 unfolding of the LR-HSI.
/// `stride > 1` subsamples the pixels used as features.
pub fn spectral_graph_from_lr_hsi(x: &HyperCube, k: usize, sigma: Sigma, stride: usize) -> Result<LaplacianGraph> {
    knn_adjacency(&subsample_columns(&unfold(x, Mode::Band), stride), k, sigma)
}

/// Row and column graphs `(L_W, L_H)` from the mode-1 and mode-2
/// unfoldings of the HR-MSI.
pub fn spatial_graphs_from_hr_msi(y: &HyperCube, k: usize, sigma: Sigma) -> Result<(LaplacianGraph, LaplacianGraph)> {
    Ok((
        knn_adjacency(&unfold(y, Mode::Width), k, sigma)?,
        knn_adjacency(&unfold(y, Mode::Height), k, sigma)?,
    ))
}

/// The three frozen Laplacians used during training.
#[derive(Debug, Clone)]
pub struct ManifoldGraphs {
    pub spectral: LaplacianGraph,
    pub width: LaplacianGraph,
    pub height: LaplacianGraph,
}

impl ManifoldGraphs {
    pub fn build(x: &HyperCube, y: &HyperCube, k: usize, sigma: Sigma, stride: usize) -> Result<Self> {
        let spectral = spectral_graph_from_lr_hsi(x, k, sigma, stride)?;
        let (width, height) = spatial_graphs_from_hr_msi(y, k, sigma)?;
        Ok(Self {
            spectral,
            width,
            height,
        })
    }

    /// `β1 tr(SᵀL_S S) + β2 (tr(WᵀL_W W) + tr(HᵀL_H H))`.
    pub fn loss(&self, s: &DenseMatrix, w: &DenseMatrix, h: &DenseMatrix, beta1: f64, beta2: f64) -> Result<f64> {
        Ok(beta1 * self.spectral.trace_quad(s)? + beta2 * (self.width.trace_quad(w)? + self.height.trace_quad(h)?))
    }
}

/// Laplacians as constant graph inputs.
#[derive(Debug, Clone)]
pub struct ManifoldNodes {
    ls: Var,
    lw: Var,
    lh: Var,
}

impl ManifoldNodes {
    pub fn insert<T: Real>(g: &mut Graph<T>, graphs: &ManifoldGraphs) -> Self {
        Self {
            ls: g.input(graphs.spectral.laplacian_array()),
            lw: g.input(graphs.width.laplacian_array()),
            lh: g.input(graphs.height.laplacian_array()),
        }
    }

    /// Unweighted `(tr(SᵀL_S S), tr(WᵀL_W W) + tr(HᵀL_H H))`.
    pub fn terms<T: Real>(&self, g: &mut Graph<T>, s: Var, w: Var, h: Var) -> (Var, Var) {
        let spe = g.trace_quad(s, self.ls);
        let tw = g.trace_quad(w, self.lw);
        let th = g.trace_quad(h, self.lh);
        let spa = g.add(tw, th);
        (spe, spa)
    }
}
