//! Symmetric-union kNN affinity graph with Gaussian weights.
//!
//! Neighbor search is exact brute force over the joint pool. Ties in
//! distance are broken by ascending node index, so the graph is a pure
//! function of the embeddings.

use std::collections::BTreeMap;

use crate::error::{LataError, Result};
use crate::matrix::{dot, squared_distance, Matrix};
use crate::model::Embedding;

/// Median neighbor distance, with a flag for the all-duplicates fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub sigma: f64,
    /// Set when every neighbor distance was zero and `sigma` fell back to 1.
    pub degenerate: bool,
}

/// For every node, the `k` nearest other nodes by Euclidean distance.
pub fn knn_indices(embeddings: &[Embedding], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(LataError::InvalidInput(format!(
            "kNN needs at least 2 nodes, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(LataError::InvalidInput(format!(
            "k must be in [1, {}), got {k}",
            n
        )));
    }
    let dim = embeddings[0].dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(LataError::dims("embedding dimension", dim, bad.dim()));
    }

    let mut lists = Vec::with_capacity(n);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        let vi = embeddings[i].as_slice();
        candidates.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(vi, embeddings[j].as_slice()), j)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, by_dist);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(by_dist);
        lists.push(candidates.iter().map(|&(_, j)| j).collect());
    }
    Ok(lists)
}

/// Median over all directed neighbor distances (N*k values).
pub fn median_bandwidth(embeddings: &[Embedding], knn: &[Vec<usize>]) -> Result<Bandwidth> {
    let mut dists: Vec<f64> = knn
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| {
            nbrs.iter().map(move |&j| {
                squared_distance(embeddings[i].as_slice(), embeddings[j].as_slice()).sqrt()
            })
        })
        .collect();
    if dists.is_empty() {
        return Err(LataError::InvalidInput("no neighbor distances".into()));
    }
    dists.sort_unstable_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        Ok(Bandwidth {
            sigma: median,
            degenerate: false,
        })
    } else {
        Ok(Bandwidth {
            sigma: 1.0,
            degenerate: true,
        })
    }
}

/// Symmetric sparse affinity matrix stored as CSR with both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinityGraph {
    n_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    bandwidth: f64,
    degenerate_bandwidth: bool,
}

impl SparseAffinityGraph {
    /// Builds a graph from undirected edges, each listed once.
    ///
    /// Weights must lie in (0, 1]; self-loops and repeated pairs are rejected.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for &(i, j, w) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(LataError::InvalidInput(format!(
                    "edge ({i}, {j}) out of range for {n_nodes} nodes"
                )));
            }
            if i == j {
                return Err(LataError::InvalidInput(format!("self-loop at node {i}")));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(LataError::InvalidInput(format!(
                    "edge ({i}, {j}) weight {w} outside (0, 1]"
                )));
            }
            if pairs.insert((i.min(j), i.max(j)), w).is_some() {
                return Err(LataError::InvalidInput(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self::from_pairs(n_nodes, &pairs, f64::NAN, false))
    }

    fn from_pairs(
        n_nodes: usize,
        pairs: &BTreeMap<(usize, usize), f64>,
        bandwidth: f64,
        degenerate_bandwidth: bool,
    ) -> Self {
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_nodes];
        for (&(i, j), &w) in pairs {
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut neighbors = Vec::with_capacity(2 * pairs.len());
        let mut weights = Vec::with_capacity(2 * pairs.len());
        let mut degrees = Vec::with_capacity(n_nodes);
        offsets.push(0);
        for row in &mut adjacency {
            row.sort_unstable_by_key(|&(j, _)| j);
            let mut d = 0.0;
            for &(j, w) in row.iter() {
                neighbors.push(j);
                weights.push(w);
                d += w;
            }
            degrees.push(d);
            offsets.push(neighbors.len());
        }
        Self {
            n_nodes,
            offsets,
            neighbors,
            weights,
            degrees,
            bandwidth,
            degenerate_bandwidth,
        }
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Neighbors of `i` in ascending index order with their weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.neighbors[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    /// `W_ij`, zero when the nodes are not adjacent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let range = self.offsets[i]..self.offsets[i + 1];
        match self.neighbors[range.clone()].binary_search(&j) {
            Ok(pos) => self.weights[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    #[inline]
    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    /// Kernel bandwidth; NaN for graphs built from explicit edges.
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn degenerate_bandwidth(&self) -> bool {
        self.degenerate_bandwidth
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_nodes).flat_map(move |i| {
            self.neighbors(i)
                .filter(move |&(j, _)| j > i)
                .map(move |(j, w)| (i, j, w))
        })
    }

    /// Approximate heap footprint in bytes.
    pub fn memory_bytes(&self) -> usize {
        use std::mem::size_of;
        self.offsets.len() * size_of::<usize>()
            + self.neighbors.len() * size_of::<usize>()
            + self.weights.len() * size_of::<f64>()
            + self.degrees.len() * size_of::<f64>()
    }

    /// `out[c] = sum_j W_ij z_jc`, summing neighbors in ascending index order.
    #[inline]
    pub(crate) fn aggregate_row(&self, i: usize, z: &Matrix, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, w) in self.neighbors(i) {
            for (o, zj) in out.iter_mut().zip(z.row(j)) {
                *o += w * zj;
            }
        }
    }
}

/// Builds the union kNN graph with weights `exp(-|v_i - v_j|^2 / sigma^2)`.
///
/// `sigma_override` replaces the median-distance bandwidth when given.
pub fn build_graph(
    embeddings: &[Embedding],
    k: usize,
    sigma_override: Option<f64>,
) -> Result<SparseAffinityGraph> {
    let knn = knn_indices(embeddings, k)?;
    let bw = match sigma_override {
        Some(s) if s > 0.0 && s.is_finite() => Bandwidth {
            sigma: s,
            degenerate: false,
        },
        Some(s) => {
            return Err(LataError::InvalidInput(format!(
                "bandwidth must be positive, got {s}"
            )))
        }
        None => median_bandwidth(embeddings, &knn)?,
    };
    let inv_sigma2 = 1.0 / (bw.sigma * bw.sigma);
    let mut pairs = BTreeMap::new();
    for (i, nbrs) in knn.iter().enumerate() {
        for &j in nbrs {
            let key = (i.min(j), i.max(j));
            pairs.entry(key).or_insert_with(|| {
                let d2 = squared_distance(embeddings[key.0].as_slice(), embeddings[key.1].as_slice());
                // Far pairs under a tiny bandwidth would underflow to zero.
                (-d2 * inv_sigma2).exp().max(f64::MIN_POSITIVE)
            });
        }
    }
    Ok(SparseAffinityGraph::from_pairs(
        embeddings.len(),
        &pairs,
        bw.sigma,
        bw.degenerate,
    ))
}

/// `M = W Z`, one sparse product per class.
pub fn neighbor_aggregate(graph: &SparseAffinityGraph, z: &Matrix) -> Result<Matrix> {
    if z.rows() != graph.n_nodes() {
        return Err(LataError::dims("aggregate rows", graph.n_nodes(), z.rows()));
    }
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        graph.aggregate_row(i, z, out.row_mut(i));
    }
    Ok(out)
}

/// `1/2 sum_ij W_ij |z_i - z_j|^2`, summed over undirected edges.
pub fn laplacian_quadratic(graph: &SparseAffinityGraph, z: &Matrix) -> f64 {
    graph
        .edges()
        .map(|(i, j, w)| w * squared_distance(z.row(i), z.row(j)))
        .sum()
}

/// The same quadratic form written as `sum_i d_i |z_i|^2 - sum_ij W_ij z_i.z_j`.
pub fn laplacian_quadratic_expanded(graph: &SparseAffinityGraph, z: &Matrix) -> f64 {
    let diag: f64 = (0..graph.n_nodes())
        .map(|i| graph.degree(i) * dot(z.row(i), z.row(i)))
        .sum();
    let cross: f64 = (0..graph.n_nodes())
        .map(|i| {
            graph
                .neighbors(i)
                .map(|(j, w)| w * dot(z.row(i), z.row(j)))
                .sum::<f64>()
        })
        .sum();
    diag - cross
}
