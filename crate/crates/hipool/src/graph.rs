//! Adjacency construction for the pooling hierarchy: the chain graph over
//! chunks, the fixed sliding-window cluster assignment, its complement mask,
//! the lifted cluster-level adjacency, and symmetric GCN normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Path-graph adjacency over `n` nodes in document order.
#[derive(Debug, Clone)]
pub struct ChainAdjacency {
    n: usize,
    matrix: Tensor,
}

impl ChainAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Binary n×m map from low-level nodes to their covering cluster windows
/// (window width 2p, stride p).
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    n: usize,
    m: usize,
    matrix: Tensor,
}

impl ClusterAssignment {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Entrywise complement of a [`ClusterAssignment`].
#[derive(Debug, Clone)]
pub struct CrossMask {
    matrix: Tensor,
}

impl CrossMask {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    #[cfg(test)]
    pub(crate) fn from_matrix_for_tests(matrix: Tensor) -> Self {
        CrossMask { matrix }
    }
}

/// Low-level connectivity choices for the first hierarchy level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowAdjacency {
    Chain,
    Complete,
}

/// Tridiagonal 0/1 adjacency: (i, j) connected iff |i − j| = 1.
pub fn build_chain(n: usize) -> Result<ChainAdjacency> {
    if n < 1 {
        return Err(Error::Domain(format!("chain graph needs n ≥ 1, got {n}")));
    }
    let mut m = Tensor::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        m.values_mut()[i * n + (i + 1)] = 1.0;
        m.values_mut()[(i + 1) * n + i] = 1.0;
    }
    Ok(ChainAdjacency { n, matrix: m })
}

/// All-ones minus the diagonal.
pub fn build_complete(n: usize) -> Result<ChainAdjacency> {
    if n < 1 {
        return Err(Error::Domain(format!("complete graph needs n ≥ 1, got {n}")));
    }
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m.values_mut()[i * n + j] = 1.0;
            }
        }
    }
    Ok(ChainAdjacency { n, matrix: m })
}

pub fn build_low_adjacency(n: usize, mode: LowAdjacency) -> Result<ChainAdjacency> {
    match mode {
        LowAdjacency::Chain => build_chain(n),
        LowAdjacency::Complete => build_complete(n),
    }
}

/// m = ceil(n/p) clusters; cluster j covers node indices
/// [j·p, j·p + 2p − 1] clipped to [0, n − 1].
pub fn build_clusters(n: usize, p: usize) -> Result<ClusterAssignment> {
    if n < 1 || p < 1 {
        return Err(Error::Domain(format!(
            "cluster assignment needs n ≥ 1 and p ≥ 1, got n = {n}, p = {p}"
        )));
    }
    let m = n.div_ceil(p);
    let mut matrix = Tensor::zeros(n, m);
    for j in 0..m {
        let lo = j * p;
        let hi = (j * p + 2 * p - 1).min(n - 1);
        for i in lo..=hi {
            matrix.values_mut()[i * m + j] = 1.0;
        }
    }
    Ok(ClusterAssignment { n, m, matrix })
}

/// A_cross = 1 − A_self, entrywise.
pub fn build_cross_mask(a: &ClusterAssignment) -> CrossMask {
    let mut matrix = a.matrix.clone();
    for v in matrix.values_mut() {
        *v = 1.0 - *v;
    }
    CrossMask { matrix }
}

/// Sᵀ·A·S: connectivity induced among cluster nodes. Real-valued — entries
/// may exceed 1 and the diagonal may be nonzero.
pub fn lift_adjacency(a: &Tensor, s: &ClusterAssignment) -> Result<Tensor> {
    let n = s.n;
    if a.shape() != [n, n] {
        return Err(Error::dimension("lift_adjacency", a.shape(), &[n, n]));
    }
    let m = s.m;
    let sv = s.matrix.values();
    let av = a.values();
    // AS (n×m), then SᵀAS (m×m).
    let mut tmp = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..n {
            let aik = av[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                tmp[i * m + j] += aik * sv[k * m + j];
            }
        }
    }
    let mut out = Tensor::zeros(m, m);
    for i in 0..n {
        for r in 0..m {
            let sir = sv[i * m + r];
            if sir == 0.0 {
                continue;
            }
            for j in 0..m {
                out.values_mut()[r * m + j] += sir * tmp[i * m + j];
            }
        }
    }
    Ok(out)
}

/// Â = D^(−1/2)(A + I)D^(−1/2) with D the diagonal row-sums of A + I.
pub fn gcn_normalize(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dimension("gcn_normalize", shape, &[shape[0], shape[0]]));
    }
    let n = shape[0];
    if let Some(&bad) = a.values().iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!(
            "gcn_normalize requires non-negative entries, found {bad}"
        )));
    }
    let mut with_loops = a.clone();
    for i in 0..n {
        with_loops.values_mut()[i * n + i] += 1.0;
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| with_loops.values()[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.values_mut()[i * n + j] = inv_sqrt[i] * with_loops.values()[i * n + j] * inv_sqrt[j];
        }
    }
    Ok(out)
}
