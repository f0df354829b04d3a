//! Losses, closed-form gradients for linear architectures, backpropagation for
//! the ReLU variants and a central-difference oracle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphFeatures, TrainIndex};
use crate::linalg::Matrix;
use crate::model::GnnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖Ŷ − Y‖²_F`, no `1/n̄` factor.
    Squared,
    /// Softmax cross-entropy summed over training nodes. `Y` is one-hot.
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq" | "squared" => Ok(LossKind::Squared),
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Argument(format!("unknown loss {other:?}"))),
        }
    }
}

/// Loss value and `V = ∂L/∂Ŷ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGrad {
    pub loss: f64,
    pub v: Matrix,
}

/// Class index of every one-hot column.
pub fn one_hot_classes(y: &Matrix) -> Result<Vec<usize>> {
    (0..y.cols())
        .map(|j| {
            let mut class = None;
            for i in 0..y.rows() {
                match y[(i, j)] {
                    v if v == 1.0 && class.is_none() => class = Some(i),
                    0.0 => {}
                    _ => return Err(Error::Argument(format!("label column {j} is not one-hot"))),
                }
            }
            class.ok_or_else(|| Error::Argument(format!("label column {j} is not one-hot")))
        })
        .collect()
}

pub fn loss_and_residual_grad(yhat: &Matrix, y: &Matrix, kind: LossKind) -> Result<ResidualGrad> {
    if yhat.shape() != y.shape() {
        return Err(Error::dim(
            "loss_and_residual_grad",
            format!("prediction {:?} vs labels {:?}", yhat.shape(), y.shape()),
        ));
    }
    match kind {
        LossKind::Squared => {
            let diff = yhat.sub(y);
            Ok(ResidualGrad {
                loss: diff.frobenius_sq(),
                v: diff.scale(2.0),
            })
        }
        LossKind::CrossEntropy => {
            let classes = one_hot_classes(y)?;
            let mut v = Matrix::zeros(y.rows(), y.cols());
            let mut loss = 0.0;
            for (j, &c) in classes.iter().enumerate() {
                let max = (0..y.rows())
                    .map(|i| yhat[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..y.rows()).map(|i| (yhat[(i, j)] - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - yhat[(c, j)];
                for i in 0..y.rows() {
                    v[(i, j)] = (yhat[(i, j)] - log_z).exp() - if i == c { 1.0 } else { 0.0 };
                }
            }
            Ok(ResidualGrad { loss, v })
        }
    }
}

/// Gradients shaped like the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// `dB_(1), …, dB_(H)`.
    pub db: Vec<Matrix>,
    /// `dW` (one entry) or `dW_(0), …, dW_(H)`.
    pub dw: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(p: &GnnParams) -> Self {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        GradientSet {
            db: p.b_mats().iter().map(zero).collect(),
            dw: p.w_mats().iter().map(zero).collect(),
        }
    }

    /// `Σ ‖dW‖²_F + Σ ‖dB‖²_F`.
    pub fn norm_sq(&self) -> f64 {
        self.db
            .iter()
            .chain(&self.dw)
            .map(Matrix::frobenius_sq)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.db
            .iter()
            .chain(&self.dw)
            .map(Matrix::max_abs)
            .fold(0.0, f64::max)
    }

    /// `max |a − b| / max(max |a|, 1e-12)`.
    pub fn max_relative_error(&self, other: &GradientSet) -> f64 {
        let diff = self
            .db
            .iter()
            .chain(&self.dw)
            .zip(other.db.iter().chain(&other.dw))
            .map(|(a, b)| a.sub(b).max_abs())
            .fold(0.0, f64::max);
        diff / self.max_abs().max(1e-12)
    }
}

pub fn evaluate_loss(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    kind: LossKind,
) -> Result<f64> {
    let yhat = params.forward(x, s, idx)?;
    Ok(loss_and_residual_grad(&yhat, y, kind)?.loss)
}

/// Exact gradients of the configured loss. Linear architectures use the
/// closed forms; ReLU architectures use reverse mode.
pub fn analytic_gradients(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    rg: &ResidualGrad,
) -> Result<GradientSet> {
    params.check_inputs("analytic_gradients", x, s, idx)?;
    if rg.v.shape() != (params.output_dim(), idx.len()) {
        return Err(Error::dim(
            "analytic_gradients",
            format!(
                "V is {:?}, expected ({}, {})",
                rg.v.shape(),
                params.output_dim(),
                idx.len()
            ),
        ));
    }
    if params.arch().is_linear() {
        let feats = GraphFeatures::new(x, s, idx, params.depth())?;
        linear_gradients(params, &feats, &rg.v)
    } else {
        relu_gradients(params, x, s, idx, &rg.v)
    }
}

/// `M_l = V·P_lᵀ` for every level `0..=depth`.
pub(crate) fn residual_products(v: &Matrix, feats: &GraphFeatures, depth: usize) -> Vec<Matrix> {
    (0..=depth).map(|l| v.matmul_t(feats.level(l))).collect()
}

/// Closed-form gradients of a linear or multiscale linear network.
///
/// With `M_l = V·P_lᵀ`:
/// `dW_(l) = M_l·(B̄^{(1:l)})ᵀ` and
/// `dB_(i) = Σ_{k ≥ i} (W_(k)·B̄^{(i+1:k)})ᵀ·M_k·(B̄^{(1:i−1)})ᵀ`,
/// where only `k = H` appears without skip connections. The sum over `k` is
/// accumulated from the top, `C_i = W_(i)ᵀM_i + B_(i+1)ᵀC_{i+1}`.
pub fn linear_gradients(
    params: &GnnParams,
    feats: &GraphFeatures,
    v: &Matrix,
) -> Result<GradientSet> {
    if !params.arch().is_linear() {
        return Err(Error::Unsupported(format!(
            "closed-form gradients need a linear architecture, got {}",
            params.arch()
        )));
    }
    params.check_features("linear_gradients", feats)?;
    if v.shape() != (params.output_dim(), feats.num_train()) {
        return Err(Error::dim(
            "linear_gradients",
            "V shape does not match features",
        ));
    }
    let h = params.depth();
    let m = residual_products(v, feats, h);
    let prefix = params.prefix_products();

    let dw = params
        .head_levels()
        .into_iter()
        .map(|l| m[l].matmul_t(&prefix[l]))
        .collect();

    let mut db = vec![Matrix::zeros(0, 0); h];
    let mut carry: Option<Matrix> = None;
    for i in (1..=h).rev() {
        let mut c = match carry.take() {
            Some(above) => params.b(i + 1).t_matmul(&above),
            None => Matrix::zeros(params.dims()[i], params.input_dim()),
        };
        if let Some(wi) = params.head(i) {
            c.axpy(1.0, &wi.t_matmul(&m[i]));
        }
        db[i - 1] = c.matmul_t(&prefix[i - 1]);
        carry = Some(c);
    }
    Ok(GradientSet { db, dw })
}

fn relu_gradients(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    v: &Matrix,
) -> Result<GradientSet> {
    let h = params.depth();
    let n = x.cols();
    // Forward pass keeping inputs X_(l−1)·S and pre-activations A_(l).
    let mut hidden = vec![x.clone()];
    let mut agg_inputs = Vec::with_capacity(h);
    let mut pre = Vec::with_capacity(h);
    for l in 1..=h {
        let xs = hidden[l - 1].matmul(s);
        let a = params.b(l).matmul(&xs);
        hidden.push(a.map(|t| t.max(0.0)));
        agg_inputs.push(xs);
        pre.push(a);
    }

    let v_full = v.scatter_columns(idx.as_slice(), n);
    let mut dw = Vec::with_capacity(params.w_mats().len());
    for l in params.head_levels() {
        dw.push(v_full.matmul_t(&hidden[l]));
    }

    let mut db = vec![Matrix::zeros(0, 0); h];
    let mut dx: Option<Matrix> = None;
    for l in (1..=h).rev() {
        let mut g = dx
            .take()
            .unwrap_or_else(|| Matrix::zeros(params.dims()[l], n));
        if let Some(wl) = params.head(l) {
            g.axpy(1.0, &wl.t_matmul(&v_full));
        }
        // Subgradient 0 at a pre-activation of exactly 0.
        let da = g.zip_with(&pre[l - 1], |gv, av| if av > 0.0 { gv } else { 0.0 });
        db[l - 1] = da.matmul_t(&agg_inputs[l - 1]);
        dx = Some(params.b(l).t_matmul(&da).matmul_t(s));
    }
    Ok(GradientSet { db, dw })
}

/// Central differences `(L(θ + εe) − L(θ − εe)) / 2ε` for every scalar.
pub fn finite_difference_gradients(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    kind: LossKind,
    eps: f64,
) -> Result<GradientSet> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    let targets: Vec<&mut Matrix> = grads.db.iter_mut().chain(grads.dw.iter_mut()).collect();
    for (slot, target) in targets.into_iter().enumerate() {
        for k in 0..target.as_slice().len() {
            let orig = nth_mat(&mut probe, slot).as_slice()[k];
            nth_mat(&mut probe, slot).as_mut_slice()[k] = orig + eps;
            let up = evaluate_loss(&probe, x, s, idx, y, kind)?;
            nth_mat(&mut probe, slot).as_mut_slice()[k] = orig - eps;
            let down = evaluate_loss(&probe, x, s, idx, y, kind)?;
            nth_mat(&mut probe, slot).as_mut_slice()[k] = orig;
            target.as_mut_slice()[k] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

fn nth_mat(p: &mut GnnParams, k: usize) -> &mut Matrix {
    p.mats_mut().nth(k).expect("matrix slot")
}
