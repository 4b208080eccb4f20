//! Sparse undirected graphs: canonical neighbour lists, row-normalized
//! adjacency, BFS context extraction, and the stochastic edge manipulations
//! training needs.
//!
//! Graphs are immutable after construction; every "mutation" builds a new
//! graph, so values are safe to share across concurrent readers.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::Rng;
use thiserror::Error;

use crate::numeric::{Matrix, NumericError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("self loop on node {0}")]
    SelfLoop(usize),
    #[error("node {node} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("requested {requested} negative pairs but only {available} non-edges are available")]
    InsufficientNegatives { requested: usize, available: usize },
}

/// Undirected simple graph stored as sorted per-node neighbour lists
/// (compressed row form).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Graph {
    /// Builds the canonical graph from an edge list. Duplicate and reversed
    /// pairs collapse; self loops and out-of-range ids are rejected.
    pub fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut canonical = BTreeSet::new();
        for &(i, j) in edges {
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            for node in [i, j] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes });
                }
            }
            canonical.insert((i.min(j), i.max(j)));
        }
        Ok(Self::from_canonical(num_nodes, &canonical))
    }

    /// `canonical` must hold deduplicated pairs with `i < j`, all in range.
    fn from_canonical(num_nodes: usize, canonical: &BTreeSet<(usize, usize)>) -> Self {
        let mut degree = vec![0usize; num_nodes];
        for &(i, j) in canonical {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut targets = vec![0usize; offsets[num_nodes]];
        let mut cursor = offsets.clone();
        // Lexicographic pair order fills every row in ascending order.
        for &(i, j) in canonical {
            targets[cursor[i]] = j;
            cursor[i] += 1;
            targets[cursor[j]] = i;
            cursor[j] += 1;
        }
        debug_assert!((0..num_nodes).all(|n| {
            let row = &targets[offsets[n]..offsets[n + 1]];
            row.windows(2).all(|w| w[0] < w[1])
        }));
        Self {
            num_nodes,
            offsets,
            targets,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn neighbours(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.neighbours(i).binary_search(&j).is_ok()
    }

    /// Every edge once, as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_nodes {
            for &j in self.neighbours(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// New graph with the given canonical pairs removed.
    pub fn remove_edges(&self, remove: &HashSet<(usize, usize)>) -> Graph {
        let kept: BTreeSet<(usize, usize)> = self
            .edges()
            .into_iter()
            .filter(|e| !remove.contains(e))
            .collect();
        Graph::from_canonical(self.num_nodes, &kept)
    }

    /// The first `k` non-seed nodes visited by breadth-first search from
    /// `seed`, in level order with ascending node ids inside each level.
    /// Returns fewer than `k` when the component is exhausted.
    pub fn k_neighbourhood(&self, seed: usize, k: usize) -> Vec<usize> {
        assert!(seed < self.num_nodes, "seed {seed} out of range");
        let mut visited = vec![false; self.num_nodes];
        visited[seed] = true;
        let mut result = Vec::new();
        let mut frontier = vec![seed];
        while !frontier.is_empty() && result.len() < k {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in self.neighbours(u) {
                    if !visited[v] {
                        visited[v] = true;
                        next.push(v);
                    }
                }
            }
            next.sort_unstable();
            for &v in &next {
                if result.len() == k {
                    break;
                }
                result.push(v);
            }
            frontier = next;
        }
        result
    }

    /// Subgraph induced on `nodes` (deduplicated), together with the id
    /// remap. New ids follow ascending old-id order.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> (Graph, NodeRemap) {
        let selected: BTreeSet<usize> = nodes.iter().copied().collect();
        for &node in &selected {
            assert!(node < self.num_nodes, "node {node} out of range");
        }
        let new_to_old: Vec<usize> = selected.iter().copied().collect();
        let old_to_new: HashMap<usize, usize> = new_to_old
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let mut canonical = BTreeSet::new();
        for (&old_i, &new_i) in &old_to_new {
            for &old_j in self.neighbours(old_i) {
                if old_i < old_j {
                    if let Some(&new_j) = old_to_new.get(&old_j) {
                        canonical.insert((new_i.min(new_j), new_i.max(new_j)));
                    }
                }
            }
        }
        let graph = Graph::from_canonical(new_to_old.len(), &canonical);
        (
            graph,
            NodeRemap {
                new_to_old,
                old_to_new,
            },
        )
    }
}

/// Bijection between original node ids and induced-subgraph ids.
#[derive(Clone, Debug, Default)]
pub struct NodeRemap {
    new_to_old: Vec<usize>,
    old_to_new: HashMap<usize, usize>,
}

impl NodeRemap {
    pub fn to_new(&self, old: usize) -> Option<usize> {
        self.old_to_new.get(&old).copied()
    }

    pub fn to_old(&self, new: usize) -> usize {
        self.new_to_old[new]
    }

    pub fn new_to_old(&self) -> &[usize] {
        &self.new_to_old
    }

    pub fn len(&self) -> usize {
        self.new_to_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_to_old.is_empty()
    }
}

/// Row-stochastic sparse matrix in compressed row form, tagged with the
/// adjacency step it normalizes.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    num_nodes: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    step: usize,
}

/// Rows per parallel sparse-multiply task (fixed; thread-count independent).
const SPMM_ROW_BLOCK: usize = 256;

impl NormalizedAdjacency {
    /// Step-0 matrix: the identity over the node set.
    pub fn identity(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            offsets: (0..=num_nodes).collect(),
            cols: (0..num_nodes).collect(),
            vals: vec![1.0; num_nodes],
            step: 0,
        }
    }

    /// Step-1 matrix: `D^{-1} (A + I)` where `D` holds the row sums of
    /// `A + I`, so every row sums to exactly 1.
    pub fn self_loop_normalized(g: &Graph) -> Self {
        let n = g.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(2 * g.num_edges() + n);
        let mut vals = Vec::with_capacity(2 * g.num_edges() + n);
        offsets.push(0);
        for i in 0..n {
            let weight = 1.0 / (g.degree(i) + 1) as f64;
            let mut inserted_self = false;
            for &j in g.neighbours(i) {
                if !inserted_self && j > i {
                    cols.push(i);
                    vals.push(weight);
                    inserted_self = true;
                }
                cols.push(j);
                vals.push(weight);
            }
            if !inserted_self {
                cols.push(i);
                vals.push(weight);
            }
            offsets.push(cols.len());
        }
        Self {
            num_nodes: n,
            offsets,
            cols,
            vals,
            step: 1,
        }
    }

    /// `D^{-1} A` without self connections; isolated nodes get empty rows.
    /// This is the literal per-node normalization of the neighbour sum and
    /// exists mainly as an oracle for the self-loop form.
    pub fn neighbour_normalized(g: &Graph) -> Self {
        let n = g.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(2 * g.num_edges());
        let mut vals = Vec::with_capacity(2 * g.num_edges());
        offsets.push(0);
        for i in 0..n {
            let deg = g.degree(i);
            if deg > 0 {
                let weight = 1.0 / deg as f64;
                for &j in g.neighbours(i) {
                    cols.push(j);
                    vals.push(weight);
                }
            }
            offsets.push(cols.len());
        }
        Self {
            num_nodes: n,
            offsets,
            cols,
            vals,
            step: 1,
        }
    }

    /// Normalized adjacency for step `s` (0 or 1).
    pub fn for_step(g: &Graph, step: usize) -> Self {
        match step {
            0 => Self::identity(g.num_nodes()),
            1 => Self::self_loop_normalized(g),
            _ => panic!("adjacency step {step} unsupported (only 0 and 1)"),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[row]..self.offsets[row + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.num_nodes)
            .map(|r| self.row_entries(r).map(|(_, v)| v).sum())
            .collect()
    }

    /// Densifies to an `N x N` matrix (test support).
    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.num_nodes, self.num_nodes);
        for r in 0..self.num_nodes {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Sparse-dense product; touches only stored entries.
    pub fn matmul(&self, dense: &Matrix) -> Result<Matrix, NumericError> {
        if dense.rows() != self.num_nodes {
            return Err(NumericError::DimensionMismatch {
                op: "sparse_dense_matmul",
                lhs_rows: self.num_nodes,
                lhs_cols: self.num_nodes,
                rhs_rows: dense.rows(),
                rhs_cols: dense.cols(),
            });
        }
        let cols = dense.cols();
        let mut out = Matrix::zeros(self.num_nodes, cols);

        let fill_rows = |r0: usize, chunk: &mut [f64]| {
            for (local, row) in chunk.chunks_mut(cols).enumerate() {
                for (c, v) in self.row_entries(r0 + local) {
                    let src = dense.row(c);
                    for (dst, s) in row.iter_mut().zip(src) {
                        *dst += v * s;
                    }
                }
            }
        };

        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            if self.num_nodes > SPMM_ROW_BLOCK {
                crate::parallel::run(|| {
                    out.as_mut_slice()
                        .par_chunks_mut(SPMM_ROW_BLOCK * cols)
                        .enumerate()
                        .for_each(|(block, chunk)| fill_rows(block * SPMM_ROW_BLOCK, chunk));
                });
                return Ok(out);
            }
        }

        fill_rows(0, out.as_mut_slice());
        Ok(out)
    }

    /// `A^T * dense`, used by reverse-mode differentiation of [`Self::matmul`].
    pub fn transpose_matmul(&self, dense: &Matrix) -> Result<Matrix, NumericError> {
        if dense.rows() != self.num_nodes {
            return Err(NumericError::DimensionMismatch {
                op: "sparse_dense_matmul_t",
                lhs_rows: self.num_nodes,
                lhs_cols: self.num_nodes,
                rhs_rows: dense.rows(),
                rhs_cols: dense.cols(),
            });
        }
        let cols = dense.cols();
        let mut out = Matrix::zeros(self.num_nodes, cols);
        for r in 0..self.num_nodes {
            let src = dense.row(r);
            for (c, v) in self.row_entries(r) {
                let dst = out.row_mut(c);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }
}

/// An incomplete graph plus the held-out positive and sampled negative pairs.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub incomplete_graph: Graph,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Removes `round(holdout_fraction * |E|)` random edges as positives and
/// samples `negatives_per_positive` times as many non-edges of the original
/// graph as negatives, uniformly without replacement.
pub fn split_edges(
    g: &Graph,
    holdout_fraction: f64,
    negatives_per_positive: f64,
    rng: &mut impl Rng,
) -> Result<EdgeSplit, GraphError> {
    assert!(
        (0.0..=1.0).contains(&holdout_fraction),
        "holdout fraction {holdout_fraction} outside [0, 1]"
    );
    let mut edges = g.edges();
    let num_holdout = (holdout_fraction * edges.len() as f64).round() as usize;
    let picked = rand::seq::index::sample(rng, edges.len(), num_holdout);
    let mut positives: Vec<(usize, usize)> = picked.iter().map(|i| edges[i]).collect();
    positives.sort_unstable();
    let removed: HashSet<(usize, usize)> = positives.iter().copied().collect();
    edges.retain(|e| !removed.contains(e));
    let incomplete_graph = Graph::from_canonical(g.num_nodes(), &edges.into_iter().collect());

    let num_negatives = (negatives_per_positive * positives.len() as f64).round() as usize;
    let negatives = sample_non_edges(g, num_negatives, rng, &HashSet::new())?;

    Ok(EdgeSplit {
        incomplete_graph,
        positives,
        negatives,
    })
}

/// Uniform sample of `count` distinct non-edges of `g` (canonical `i < j`
/// pairs that are neither edges, self pairs, nor members of `exclude`).
pub(crate) fn sample_non_edges(
    g: &Graph,
    count: usize,
    rng: &mut impl Rng,
    exclude: &HashSet<(usize, usize)>,
) -> Result<Vec<(usize, usize)>, GraphError> {
    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let excluded_non_edges = exclude.iter().filter(|&&(i, j)| !g.has_edge(i, j)).count();
    let available = total_pairs
        .saturating_sub(g.num_edges())
        .saturating_sub(excluded_non_edges);
    if count > available {
        return Err(GraphError::InsufficientNegatives {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }

    // Rejection sampling while the pool is sparse enough, else enumerate.
    if count * 2 <= available {
        let mut chosen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let pair = (a.min(b), a.max(b));
            if g.has_edge(pair.0, pair.1) || exclude.contains(&pair) || !chosen.insert(pair) {
                continue;
            }
            out.push(pair);
        }
        Ok(out)
    } else {
        let mut pool = Vec::with_capacity(available);
        for i in 0..n {
            for j in (i + 1)..n {
                if !g.has_edge(i, j) && !exclude.contains(&(i, j)) {
                    pool.push((i, j));
                }
            }
        }
        let picked = rand::seq::index::sample(rng, pool.len(), count);
        Ok(picked.iter().map(|i| pool[i]).collect())
    }
}

/// Independently marks each node dropped with probability `p_drop`; an edge
/// survives only if neither endpoint is dropped. The node count is unchanged.
pub fn node_edge_dropout(g: &Graph, p_drop: f64, rng: &mut impl Rng) -> Graph {
    assert!(
        (0.0..=1.0).contains(&p_drop),
        "p_drop {p_drop} outside [0, 1]"
    );
    let n = g.num_nodes();
    if p_drop == 0.0 {
        return g.clone();
    }
    let dropped: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < p_drop).collect();
    let kept: BTreeSet<(usize, usize)> = g
        .edges()
        .into_iter()
        .filter(|&(i, j)| !dropped[i] && !dropped[j])
        .collect();
    Graph::from_canonical(n, &kept)
}
