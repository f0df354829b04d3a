//! Simple undirected graphs, aggregation matrices and propagated features.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Simple undirected graph on nodes `0..n`. Edges are stored once as
/// `(min, max)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph, folding `(v, u)` onto `(u, v)` and dropping
    /// duplicates and self-loops. Out-of-range endpoints are an error.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        let mut self_loops = 0usize;
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Argument(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            set.insert((u.min(v), u.max(v)));
        }
        if self_loops > 0 {
            log::warn!("dropped {self_loops} self-loop(s); aggregation adds them back");
        }
        Ok(Graph { n, edges: set })
    }

    pub fn empty(n: usize) -> Self {
        Graph {
            n,
            edges: BTreeSet::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }
}

/// Strictly increasing node ids that carry training labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TrainIndex(Vec<usize>);

impl TrainIndex {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "train indices must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!(
                "train index {bad} out of range for {n} nodes"
            )));
        }
        Ok(TrainIndex(indices))
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, n)
    }

    pub fn all(n: usize) -> Self {
        TrainIndex((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn max_node(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl TryFrom<Vec<usize>> for TrainIndex {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        let n = v.last().map_or(0, |&m| m + 1);
        TrainIndex::new(v, n)
    }
}

impl From<TrainIndex> for Vec<usize> {
    fn from(t: TrainIndex) -> Vec<usize> {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    /// `S = A + I`.
    Gin,
    /// `S = D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degrees of `A + I`.
    Gcn,
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationKind::Gin => "gin",
            AggregationKind::Gcn => "gcn",
        })
    }
}

impl FromStr for AggregationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gin" => Ok(AggregationKind::Gin),
            "gcn" => Ok(AggregationKind::Gcn),
            other => Err(Error::Argument(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Dense `n × n` aggregation matrix. Isolated nodes get degree 1 from the
/// self-loop, so GCN never divides by zero.
pub fn aggregation_matrix(g: &Graph, kind: AggregationKind) -> Matrix {
    let n = g.num_nodes();
    let mut s = g.adjacency();
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    if kind == AggregationKind::Gcn {
        let inv_sqrt: Vec<f64> = g
            .degrees()
            .into_iter()
            .map(|d| 1.0 / ((d + 1) as f64).sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    s
}

fn check_shapes(op: &'static str, x: &Matrix, s: &Matrix, idx: &TrainIndex) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::dim(op, format!("S is {}x{}", s.rows(), s.cols())));
    }
    if x.cols() != s.rows() {
        return Err(Error::dim(
            op,
            format!(
                "X has {} columns but S is {}x{}",
                x.cols(),
                s.rows(),
                s.cols()
            ),
        ));
    }
    if let Some(m) = idx.max_node() {
        if m >= s.rows() {
            return Err(Error::dim(
                op,
                format!("train index {m} out of range for {} nodes", s.rows()),
            ));
        }
    }
    Ok(())
}

/// Memoized powers `X·S^l` over all nodes.
///
/// The products are built by repeated right multiplication, so every level
/// is computed once per cache and both single-level and stacked queries see
/// bit-identical blocks.
#[derive(Debug, Clone)]
pub struct PowerCache {
    s: Matrix,
    powers: Vec<Matrix>,
}

impl PowerCache {
    pub fn new(x: &Matrix, s: &Matrix) -> Result<Self> {
        check_shapes("PowerCache::new", x, s, &TrainIndex(Vec::new()))?;
        Ok(PowerCache {
            s: s.clone(),
            powers: vec![x.clone()],
        })
    }

    pub fn aggregation(&self) -> &Matrix {
        &self.s
    }

    /// `X·S^l` over all `n` nodes.
    pub fn power(&mut self, l: usize) -> &Matrix {
        while self.powers.len() <= l {
            let next = self.powers.last().expect("level 0 present").matmul(&self.s);
            self.powers.push(next);
        }
        &self.powers[l]
    }

    /// `X·(S^l)_{*I}`.
    pub fn restricted(&mut self, l: usize, idx: &TrainIndex) -> Matrix {
        self.power(l).select_columns(idx.as_slice())
    }
}

/// `X·(S^l)_{*I}`; `l = 0` gives `X_{*I}`.
pub fn propagated_features(x: &Matrix, s: &Matrix, l: usize, idx: &TrainIndex) -> Result<Matrix> {
    check_shapes("propagated_features", x, s, idx)?;
    let mut cache = PowerCache::new(x, s)?;
    Ok(cache.restricted(l, idx))
}

/// `(G_H)_{*I}`: vertical stack of `X·(S^l)_{*I}` for `l = 0..=H`.
pub fn stacked_features(x: &Matrix, s: &Matrix, depth: usize, idx: &TrainIndex) -> Result<Matrix> {
    check_shapes("stacked_features", x, s, idx)?;
    let feats = GraphFeatures::new(x, s, idx, depth)?;
    feats.stacked(depth)
}

/// Per-level propagated features `P_l = X·(S^l)_{*I}` for `l = 0..=H`.
///
/// Linear architectures only ever see the data through these blocks, so the
/// trainer and all theory routines work from this precomputed set.
#[derive(Debug, Clone)]
pub struct GraphFeatures {
    levels: Vec<Matrix>,
}

impl GraphFeatures {
    pub fn new(x: &Matrix, s: &Matrix, idx: &TrainIndex, depth: usize) -> Result<Self> {
        check_shapes("GraphFeatures::new", x, s, idx)?;
        let mut cache = PowerCache::new(x, s)?;
        Ok(Self::from_cache(&mut cache, idx, depth))
    }

    pub fn from_cache(cache: &mut PowerCache, idx: &TrainIndex, depth: usize) -> Self {
        let levels = (0..=depth).map(|l| cache.restricted(l, idx)).collect();
        GraphFeatures { levels }
    }

    /// Wraps explicit blocks; all must share shape.
    pub fn from_levels(levels: Vec<Matrix>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Argument(
                "at least one feature level required".into(),
            ));
        }
        let shape = levels[0].shape();
        if levels.iter().any(|m| m.shape() != shape) {
            return Err(Error::dim(
                "GraphFeatures::from_levels",
                "levels differ in shape",
            ));
        }
        Ok(GraphFeatures { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn num_train(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn level(&self, l: usize) -> &Matrix {
        &self.levels[l]
    }

    pub fn stacked(&self, depth: usize) -> Result<Matrix> {
        if depth > self.depth() {
            return Err(Error::Argument(format!(
                "stacked depth {depth} exceeds cached depth {}",
                self.depth()
            )));
        }
        Matrix::vstack(&self.levels[..=depth])
    }
}
