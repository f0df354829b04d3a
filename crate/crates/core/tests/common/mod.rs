#![allow(dead_code)]

use gnnflow::graph::aggregation_matrix;
use gnnflow::theory::TheoryData;
use gnnflow::{AggregationKind, Architecture, GnnParams, Graph, Matrix, TrainIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, edges).unwrap()
}

pub fn random_subset(rng: &mut impl Rng, n: usize, k: usize) -> TrainIndex {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.truncate(k);
    TrainIndex::from_unsorted(ids, n).unwrap()
}

/// One-hot labels with random classes, `m_y × n̄`.
pub fn one_hot(rng: &mut impl Rng, m_y: usize, n_train: usize) -> Matrix {
    let mut y = Matrix::zeros(m_y, n_train);
    for j in 0..n_train {
        y[(rng.random_range(0..m_y), j)] = 1.0;
    }
    y
}

/// Gaussian network with entries scaled by `1/√fan_in`.
pub fn random_params(
    rng: &mut impl Rng,
    arch: Architecture,
    m_x: usize,
    hidden: &[usize],
    m_y: usize,
) -> GnnParams {
    let mut dims = vec![m_x];
    dims.extend_from_slice(hidden);
    let b: Vec<Matrix> = (1..dims.len())
        .map(|l| gaussian(rng, dims[l], dims[l - 1], 1.0 / (dims[l - 1] as f64).sqrt()))
        .collect();
    let levels: Vec<usize> = if arch.is_multiscale() {
        (0..dims.len()).collect()
    } else {
        vec![dims.len() - 1]
    };
    let w: Vec<Matrix> = levels
        .iter()
        .map(|&l| gaussian(rng, m_y, dims[l], 1.0 / (dims[l] as f64).sqrt()))
        .collect();
    GnnParams::new(arch, b, w).unwrap()
}

pub struct Instance {
    pub x: Matrix,
    pub s: Matrix,
    pub idx: TrainIndex,
    pub params: GnnParams,
}

/// Small random graph problem: `n ≤ 8`, hidden widths and `m_x` in `1..=4`.
pub fn small_instance(seed: u64, arch: Architecture, depth: usize, m_y: usize) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(3..=8);
    let m_x = r.random_range(1..=4);
    let kind = if r.random_bool(0.5) {
        AggregationKind::Gcn
    } else {
        AggregationKind::Gin
    };
    let g = random_graph(&mut r, n, 0.4);
    let s = aggregation_matrix(&g, kind);
    let n_train = r.random_range(1..=n);
    let idx = random_subset(&mut r, n, n_train);
    let x = gaussian(&mut r, m_x, n, 1.0);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..=4)).collect();
    let params = random_params(&mut r, arch, m_x, &hidden, m_y);
    Instance { x, s, idx, params }
}

/// Solves `A·z = b` for square nonsingular `A` by Gaussian elimination with
/// partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|k| m[i][k] * z[k]).sum();
        z[i] = (m[i][n] - tail) / m[i][i];
    }
    z
}

/// `min_Z ‖Z·A − Y‖²` through the normal equations `Z·(A·Aᵀ) = Y·Aᵀ`,
/// for `A` with full row rank. Returns the residual and `Z`.
pub fn normal_equation_residual(a: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let gram = a.matmul_t(a).to_rows();
    let rhs = y.matmul_t(a);
    let mut z = Matrix::zeros(y.rows(), a.rows());
    for i in 0..y.rows() {
        let zi = solve(&gram, rhs.row(i));
        for (k, v) in zi.into_iter().enumerate() {
            z[(i, k)] = v;
        }
    }
    (z.matmul(a).sub(y).frobenius_sq(), z)
}

pub struct TheoryParts {
    pub graph: Graph,
    pub s: Matrix,
    pub x: Matrix,
    pub idx: TrainIndex,
    pub y: Matrix,
    pub params: GnnParams,
}

/// Random graph problem with hidden widths at least `m_x`, so the weight
/// condition can hold.
pub fn theory_parts(
    seed: u64,
    arch: Architecture,
    agg: AggregationKind,
    depth: usize,
) -> TheoryParts {
    let mut r = rng(seed);
    let n = r.random_range(4..=8);
    let m_x = r.random_range(2..=4);
    let m_y = r.random_range(1..=3);
    let graph = random_graph(&mut r, n, 0.4);
    let s = aggregation_matrix(&graph, agg);
    let n_train = r.random_range(1..=n);
    let idx = random_subset(&mut r, n, n_train);
    let x = gaussian(&mut r, m_x, n, 1.0);
    let y = gaussian(&mut r, m_y, n_train, 1.0);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(m_x..=m_x + 2)).collect();
    let params = random_params(&mut r, arch, m_x, &hidden, m_y);
    TheoryParts {
        graph,
        s,
        x,
        idx,
        y,
        params,
    }
}

pub fn theory_instance(
    seed: u64,
    arch: Architecture,
    agg: AggregationKind,
    depth: usize,
) -> (TheoryData, GnnParams) {
    let p = theory_parts(seed, arch, agg, depth);
    (
        TheoryData::new(&p.x, &p.s, &p.idx, &p.y, depth).unwrap(),
        p.params,
    )
}
