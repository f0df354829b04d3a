//! Linear, multiscale and ReLU graph networks: parameters, initialization and
//! forward evaluation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphFeatures, TrainIndex};
use crate::linalg::{semi_orthogonal, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Multiscale,
    Relu,
    MultiscaleRelu,
}

impl Architecture {
    pub fn is_multiscale(self) -> bool {
        matches!(
            self,
            Architecture::Multiscale | Architecture::MultiscaleRelu
        )
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Architecture::Linear | Architecture::Multiscale)
    }

    /// The architecture with the same skip pattern and the other activation.
    pub fn with_relu(self, relu: bool) -> Architecture {
        match (self.is_multiscale(), relu) {
            (false, false) => Architecture::Linear,
            (true, false) => Architecture::Multiscale,
            (false, true) => Architecture::Relu,
            (true, true) => Architecture::MultiscaleRelu,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Linear => "linear",
            Architecture::Multiscale => "multiscale",
            Architecture::Relu => "relu",
            Architecture::MultiscaleRelu => "multiscale_relu",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "multiscale" => Ok(Architecture::Multiscale),
            "relu" => Ok(Architecture::Relu),
            "multiscale_relu" => Ok(Architecture::MultiscaleRelu),
            other => Err(Error::Argument(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Network weights.
///
/// `b[l - 1]` is `B_(l)` with shape `m_l × m_{l−1}`. `w` holds a single
/// `m_y × m_H` matrix for non-multiscale networks and the heads
/// `W_(0), …, W_(H)` (shape `m_y × m_l`) for multiscale ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct GnnParams {
    arch: Architecture,
    dims: Vec<usize>,
    m_y: usize,
    b: Vec<Matrix>,
    w: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    arch: Architecture,
    #[serde(rename = "H")]
    depth: usize,
    dims: Vec<usize>,
    m_y: usize,
    #[serde(rename = "B")]
    b: Vec<Matrix>,
    #[serde(rename = "W")]
    w: Vec<Matrix>,
}

impl TryFrom<RawParams> for GnnParams {
    type Error = Error;
    fn try_from(raw: RawParams) -> Result<Self> {
        if raw.dims.len() != raw.depth + 1 {
            return Err(Error::Config(format!(
                "H = {} needs {} dims, got {}",
                raw.depth,
                raw.depth + 1,
                raw.dims.len()
            )));
        }
        let p = GnnParams::new(raw.arch, raw.b, raw.w)?;
        if p.dims != raw.dims || p.m_y != raw.m_y {
            return Err(Error::Config(
                "declared dims or m_y disagree with matrix shapes".into(),
            ));
        }
        Ok(p)
    }
}

impl From<GnnParams> for RawParams {
    fn from(p: GnnParams) -> Self {
        RawParams {
            arch: p.arch,
            depth: p.b.len(),
            dims: p.dims,
            m_y: p.m_y,
            b: p.b,
            w: p.w,
        }
    }
}

impl GnnParams {
    /// Validates the shape chain and infers `dims` and `m_y`.
    pub fn new(arch: Architecture, b: Vec<Matrix>, w: Vec<Matrix>) -> Result<Self> {
        let depth = b.len();
        let heads = if arch.is_multiscale() { depth + 1 } else { 1 };
        if w.len() != heads {
            return Err(Error::Config(format!(
                "{arch} with H = {depth} needs {heads} output matrices, got {}",
                w.len()
            )));
        }
        let m_x = match b.first() {
            Some(b1) => b1.cols(),
            None => w[0].cols(),
        };
        let mut dims = vec![m_x];
        for (l, bl) in b.iter().enumerate() {
            if bl.cols() != dims[l] {
                return Err(Error::dim(
                    "GnnParams::new",
                    format!(
                        "B_({}) has {} columns, expected {}",
                        l + 1,
                        bl.cols(),
                        dims[l]
                    ),
                ));
            }
            dims.push(bl.rows());
        }
        let m_y = w[0].rows();
        for (k, wk) in w.iter().enumerate() {
            let level = if arch.is_multiscale() { k } else { depth };
            if wk.rows() != m_y || wk.cols() != dims[level] {
                return Err(Error::dim(
                    "GnnParams::new",
                    format!(
                        "output matrix for level {level} is {}x{}, expected {m_y}x{}",
                        wk.rows(),
                        wk.cols(),
                        dims[level]
                    ),
                ));
            }
        }
        if b.iter().chain(&w).any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("GnnParams::new"));
        }
        Ok(GnnParams {
            arch,
            dims,
            m_y,
            b,
            w,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn depth(&self) -> usize {
        self.b.len()
    }

    /// `m_0 = m_x, m_1, …, m_H`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.m_y
    }

    pub fn b_mats(&self) -> &[Matrix] {
        &self.b
    }

    pub fn w_mats(&self) -> &[Matrix] {
        &self.w
    }

    /// `B_(l)` for `1 ≤ l ≤ H`.
    pub fn b(&self, l: usize) -> &Matrix {
        &self.b[l - 1]
    }

    /// Levels carrying an output head: `[H]`, or `0..=H` when multiscale.
    pub fn head_levels(&self) -> Vec<usize> {
        if self.arch.is_multiscale() {
            (0..=self.depth()).collect()
        } else {
            vec![self.depth()]
        }
    }

    /// Output head attached to level `l`, if any.
    pub fn head(&self, l: usize) -> Option<&Matrix> {
        if self.arch.is_multiscale() {
            self.w.get(l)
        } else if l == self.depth() {
            Some(&self.w[0])
        } else {
            None
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.b
            .iter()
            .chain(&self.w)
            .map(|m| m.rows() * m.cols())
            .sum()
    }

    /// Same weights under another architecture tag with the same skip
    /// pattern (used to switch activations).
    pub fn with_arch(&self, arch: Architecture) -> Result<GnnParams> {
        GnnParams::new(arch, self.b.clone(), self.w.clone())
    }

    /// `self + alpha · (db, dw)` with shape-matched increments.
    pub fn offset(&self, alpha: f64, db: &[Matrix], dw: &[Matrix]) -> GnnParams {
        assert_eq!(db.len(), self.b.len(), "B increment count");
        assert_eq!(dw.len(), self.w.len(), "W increment count");
        let step = |m: &Matrix, d: &Matrix| {
            let mut out = m.clone();
            out.axpy(alpha, d);
            out
        };
        GnnParams {
            arch: self.arch,
            dims: self.dims.clone(),
            m_y: self.m_y,
            b: self.b.iter().zip(db).map(|(m, d)| step(m, d)).collect(),
            w: self.w.iter().zip(dw).map(|(m, d)| step(m, d)).collect(),
        }
    }

    pub(crate) fn mats_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.b.iter_mut().chain(self.w.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.b.iter().chain(&self.w).all(Matrix::is_finite)
    }

    /// `B̄^{(from:to)} = B_(to)···B_(from)`; the identity of size `m_to`
    /// when `from > to`. Requires `1 ≤ from ≤ H + 1` and `to ≤ H`.
    pub fn layer_products(&self, from: usize, to: usize) -> Result<Matrix> {
        let h = self.depth();
        if from == 0 || from > h + 1 || to > h {
            return Err(Error::Argument(format!(
                "layer range ({from}:{to}) outside 1..={h}"
            )));
        }
        if from > to {
            return Ok(Matrix::identity(self.dims[to]));
        }
        let mut acc = self.b(from).clone();
        for l in from + 1..=to {
            acc = self.b(l).matmul(&acc);
        }
        Ok(acc)
    }

    /// Prefix products `B̄^{(1:l)}` for `l = 0..=H`.
    pub fn prefix_products(&self) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.depth() + 1);
        out.push(Matrix::identity(self.input_dim()));
        for l in 1..=self.depth() {
            let next = self.b(l).matmul(&out[l - 1]);
            out.push(next);
        }
        out
    }

    /// End-to-end matrices `Z_(l) = W_(l)·B̄^{(1:l)}`, one per head level.
    pub fn end_to_end(&self) -> EndToEndState {
        let prefix = self.prefix_products();
        let levels = self.head_levels();
        let z = levels
            .iter()
            .map(|&l| self.head(l).expect("head level").matmul(&prefix[l]))
            .collect();
        EndToEndState { levels, z }
    }

    /// `Ŷ = f(X, W, B)_{*I}` evaluated layer by layer over all nodes.
    pub fn forward(&self, x: &Matrix, s: &Matrix, idx: &TrainIndex) -> Result<Matrix> {
        self.check_inputs("forward", x, s, idx)?;
        let relu = !self.arch.is_linear();
        let mut out = Matrix::zeros(self.m_y, x.cols());
        let mut h = x.clone();
        if let Some(w0) = self.head(0) {
            out.axpy(1.0, &w0.matmul(&h));
        }
        for l in 1..=self.depth() {
            let mut next = self.b(l).matmul(&h).matmul(s);
            if relu {
                next = next.map(|v| v.max(0.0));
            }
            h = next;
            if let Some(wl) = self.head(l) {
                out.axpy(1.0, &wl.matmul(&h));
            }
        }
        Ok(out.select_columns(idx.as_slice()))
    }

    /// Linear-architecture output `Σ_l Z_(l)·P_l` from precomputed features.
    pub fn forward_features(&self, feats: &GraphFeatures) -> Result<Matrix> {
        if !self.arch.is_linear() {
            return Err(Error::Unsupported(format!(
                "feature-space evaluation needs a linear architecture, got {}",
                self.arch
            )));
        }
        self.check_features("forward_features", feats)?;
        let state = self.end_to_end();
        let mut out = Matrix::zeros(self.m_y, feats.num_train());
        for (&l, z) in state.levels.iter().zip(&state.z) {
            out.axpy(1.0, &z.matmul(feats.level(l)));
        }
        Ok(out)
    }

    pub(crate) fn check_inputs(
        &self,
        op: &'static str,
        x: &Matrix,
        s: &Matrix,
        idx: &TrainIndex,
    ) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::dim(
                op,
                format!(
                    "X has {} rows, network expects {}",
                    x.rows(),
                    self.input_dim()
                ),
            ));
        }
        if s.rows() != s.cols() || s.rows() != x.cols() {
            return Err(Error::dim(
                op,
                format!("S is {}x{} for {} nodes", s.rows(), s.cols(), x.cols()),
            ));
        }
        if idx.max_node().is_some_and(|m| m >= x.cols()) {
            return Err(Error::dim(op, "train index exceeds node count"));
        }
        Ok(())
    }

    pub(crate) fn check_features(&self, op: &'static str, feats: &GraphFeatures) -> Result<()> {
        if feats.input_dim() != self.input_dim() {
            return Err(Error::dim(
                op,
                format!(
                    "features have {} rows, network expects {}",
                    feats.input_dim(),
                    self.input_dim()
                ),
            ));
        }
        if feats.depth() < self.depth() {
            return Err(Error::dim(
                op,
                format!(
                    "features cover depth {}, network has {}",
                    feats.depth(),
                    self.depth()
                ),
            ));
        }
        Ok(())
    }
}

/// End-to-end matrices `Z_(l)` (each `m_y × m_x`) for the listed levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndState {
    pub levels: Vec<usize>,
    pub z: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Entries uniform in `±1/√fan_in`.
    #[default]
    UniformFanIn,
    Identity,
    /// QR of a Gaussian draw: orthonormal rows or columns.
    Orthogonal,
    Gaussian {
        sigma: f64,
    },
    Zeros,
}

/// Deterministic initialization. `hidden` lists `m_1, …, m_H`.
///
/// Draw order is fixed: `B_(1), …, B_(H)` then the output matrices, each
/// row-major, from one ChaCha8 stream seeded with `seed`.
pub fn init_params(
    arch: Architecture,
    depth: usize,
    m_x: usize,
    hidden: &[usize],
    m_y: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<GnnParams> {
    if hidden.len() != depth {
        return Err(Error::Config(format!(
            "{} hidden widths given for H = {depth}",
            hidden.len()
        )));
    }
    let mut dims = vec![m_x];
    dims.extend_from_slice(hidden);
    if m_y == 0 || dims.contains(&0) {
        return Err(Error::Config("layer dimensions must be positive".into()));
    }
    if let Some(l) = hidden.iter().position(|&m| m < m_x) {
        log::warn!(
            "hidden width m_{} = {} is below m_x = {m_x}; convergence conditions cannot hold",
            l + 1,
            hidden[l]
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize, is_top: bool| -> Result<Matrix> {
        match scheme {
            InitScheme::UniformFanIn => {
                let a = 1.0 / (cols as f64).sqrt();
                Ok(Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..=a)))
            }
            InitScheme::Identity => {
                if rows != cols && !is_top {
                    return Err(Error::Config(format!(
                        "identity initialization needs square layers, got {rows}x{cols}"
                    )));
                }
                Ok(Matrix::eye(rows, cols))
            }
            InitScheme::Orthogonal => {
                let g = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
                Ok(semi_orthogonal(&g))
            }
            InitScheme::Gaussian { sigma } => {
                let dist = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Config(format!("gaussian sigma {sigma}: {e}")))?;
                Ok(Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng)))
            }
            InitScheme::Zeros => Ok(Matrix::zeros(rows, cols)),
        }
    };
    let mut b = Vec::with_capacity(depth);
    for l in 1..=depth {
        b.push(draw(dims[l], dims[l - 1], false)?);
    }
    let w = if arch.is_multiscale() {
        let mut heads = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let head = draw(m_y, dims[l], true)?;
            // Identity starts from the plain deep network: only the top head.
            if scheme == InitScheme::Identity && l < depth {
                heads.push(Matrix::zeros(m_y, dims[l]));
            } else {
                heads.push(head);
            }
        }
        heads
    } else {
        vec![draw(m_y, dims[depth], true)?]
    };
    GnnParams::new(arch, b, w)
}
