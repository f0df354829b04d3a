//! Spectral conditions, global minima, loss-reduction decompositions and
//! checks of the convergence and acceleration inequalities.
//!
//! The quadratic forms in `F_(l) = (B̄^{(1:l)})ᵀB̄^{(1:l)} ⊗ I` and the maps
//! `J_(i,l)` are never materialized; they are applied through
//! `‖vec M‖²_{F_(l)} = ‖B̄^{(1:l)}·Mᵀ‖²_F` and
//! `J_(i,l) vec M = vec[(W_(l)·B̄^{(i+1:l)})ᵀ·M·(B̄^{(1:i−1)})ᵀ]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{linear_gradients, residual_products, LossKind, ResidualGrad};
use crate::graph::{GraphFeatures, TrainIndex};
use crate::linalg::{
    least_squares_residual, smallest_gram_eigenvalue, smallest_singular_value, Matrix,
};
use crate::model::{Architecture, GnnParams};
use crate::trainer::TrajectoryRecord;

/// Slack on pointwise differential inequalities.
pub const POINTWISE_TOL: f64 = 1e-8;
/// Tolerance on the monotonicity chain of global minima.
pub const PREMISE_TOL: f64 = 1e-9;
/// Multiplicative slack on integrated bounds (Euler discretization).
pub const INTEGRATED_SLACK: f64 = 1.05;
/// Round-off floor on integrated bounds, relative to `1 + L₀ − L*`.
pub const INTEGRATED_FLOOR: f64 = 1e-12;

/// `λ_min((B̄^{(1:l)})ᵀB̄^{(1:l)})` for `l = 0..=H` (`λ_0 = 1`).
pub fn layer_lambdas(params: &GnnParams) -> Vec<f64> {
    params
        .prefix_products()
        .iter()
        .map(|p| smallest_gram_eigenvalue(p).expect("nonempty layer product"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCondition {
    pub depth: usize,
    /// `σ²_min(X(S^l)_{*I})`.
    pub sigma_sq_linear: f64,
    /// `L*_l`.
    pub global_min_linear: f64,
    /// `σ²_min((G_l)_{*I})`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_sq_multiscale: Option<f64>,
    /// `L*_{1:l}`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub global_min_multiscale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub num_train: usize,
    pub input_dim: usize,
    pub levels: Vec<LevelCondition>,
}

pub fn condition_report(
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    h_max: usize,
    multiscale: bool,
) -> Result<ConditionReport> {
    let feats = GraphFeatures::new(x, s, idx, h_max)?;
    check_labels(&feats, y)?;
    let mut levels = Vec::with_capacity(h_max + 1);
    for l in 0..=h_max {
        let p = feats.level(l);
        let sigma = smallest_singular_value(p)?;
        let global_min_linear = least_squares_residual(p, y)?.residual;
        let (sigma_sq_multiscale, global_min_multiscale) = if multiscale {
            let g = feats.stacked(l)?;
            let sg = smallest_singular_value(&g)?;
            (Some(sg * sg), Some(least_squares_residual(&g, y)?.residual))
        } else {
            (None, None)
        };
        levels.push(LevelCondition {
            depth: l,
            sigma_sq_linear: sigma * sigma,
            global_min_linear,
            sigma_sq_multiscale,
            global_min_multiscale,
        });
    }
    Ok(ConditionReport {
        num_train: idx.len(),
        input_dim: x.rows(),
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalMinScope {
    /// `L*_l`: linear network of depth `l`.
    LinearAtDepth(usize),
    /// `L*_{1:H}`: multiscale network of depth `H`.
    MultiscaleUpTo(usize),
}

/// Unconstrained least-squares residual of `Y` on the relevant features.
/// Hidden widths below `min(m_x, m_y)` make this a lower bound only.
pub fn global_minimum(
    scope: GlobalMinScope,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
) -> Result<f64> {
    let depth = match scope {
        GlobalMinScope::LinearAtDepth(l) | GlobalMinScope::MultiscaleUpTo(l) => l,
    };
    let feats = GraphFeatures::new(x, s, idx, depth)?;
    check_labels(&feats, y)?;
    let a = match scope {
        GlobalMinScope::LinearAtDepth(l) => feats.level(l).clone(),
        GlobalMinScope::MultiscaleUpTo(h) => feats.stacked(h)?,
    };
    Ok(least_squares_residual(&a, y)?.residual)
}

fn check_labels(feats: &GraphFeatures, y: &Matrix) -> Result<()> {
    if y.cols() != feats.num_train() {
        return Err(Error::dim(
            "labels",
            format!(
                "Y has {} columns for {} training nodes",
                y.cols(),
                feats.num_train()
            ),
        ));
    }
    Ok(())
}

/// `‖vec M‖²_{F_(l)} = ‖B̄^{(1:l)}·Mᵀ‖²_F`.
pub fn f_norm_sq(prefix_l: &Matrix, m: &Matrix) -> f64 {
    prefix_l.matmul_t(m).frobenius_sq()
}

/// `J_(i,l) vec M` as the matrix `(W_(l)·B̄^{(i+1:l)})ᵀ·M·(B̄^{(1:i−1)})ᵀ`
/// (shape `m_i × m_{i−1}`), for `1 ≤ i ≤ l`.
pub fn j_apply(params: &GnnParams, i: usize, l: usize, m: &Matrix) -> Result<Matrix> {
    let head = params
        .head(l)
        .ok_or_else(|| Error::Argument(format!("no output head at level {l}")))?;
    if i == 0 || i > l {
        return Err(Error::Argument(format!(
            "J index ({i}, {l}) needs 1 ≤ i ≤ l"
        )));
    }
    let left = head.matmul(&params.layer_products(i + 1, l)?);
    let right = params.layer_products(1, i - 1)?;
    Ok(left.t_matmul(m).matmul_t(&right))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTerms {
    /// Head levels the first terms refer to.
    pub levels: Vec<usize>,
    /// `‖vec[V(X(S^l)_{*I})ᵀ]‖²_{F_(l)}` per head level.
    pub first_terms: Vec<f64>,
    /// `‖Σ_{l ≥ i} J_(i,l) vec[V(X(S^l)_{*I})ᵀ]‖²` for `i = 1..=H`.
    pub second_terms: Vec<f64>,
    pub dldt_analytic: f64,
}

impl DecompositionTerms {
    pub fn sum_first(&self) -> f64 {
        self.first_terms.iter().sum()
    }

    pub fn sum_second(&self) -> f64 {
        self.second_terms.iter().sum()
    }
}

/// Exact split of `dL/dt` under gradient flow into per-scale and per-layer
/// terms. Linear architectures only.
pub fn loss_reduction_decomposition(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    rg: &ResidualGrad,
) -> Result<DecompositionTerms> {
    require_linear(params)?;
    let feats = GraphFeatures::new(x, s, idx, params.depth())?;
    decompose(params, &feats, &rg.v)
}

pub fn decompose(
    params: &GnnParams,
    feats: &GraphFeatures,
    v: &Matrix,
) -> Result<DecompositionTerms> {
    require_linear(params)?;
    params.check_features("decompose", feats)?;
    let h = params.depth();
    let m = residual_products(v, feats, h);
    let prefix = params.prefix_products();
    let levels = params.head_levels();
    let first_terms: Vec<f64> = levels
        .iter()
        .map(|&l| f_norm_sq(&prefix[l], &m[l]))
        .collect();
    let mut second_terms = Vec::with_capacity(h);
    for i in 1..=h {
        let mut acc = Matrix::zeros(params.dims()[i], params.dims()[i - 1]);
        for &l in levels.iter().filter(|&&l| l >= i) {
            acc.axpy(1.0, &j_apply(params, i, l, &m[l])?);
        }
        second_terms.push(acc.frobenius_sq());
    }
    let dldt_analytic = -(first_terms.iter().sum::<f64>() + second_terms.iter().sum::<f64>());
    Ok(DecompositionTerms {
        levels,
        first_terms,
        second_terms,
        dldt_analytic,
    })
}

fn require_linear(params: &GnnParams) -> Result<()> {
    if params.arch().is_linear() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "decomposition is defined for linear architectures, got {}",
            params.arch()
        )))
    }
}

/// Which convergence inequality to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InequalityCase {
    /// Linear network, rate `λ^{(H)}·σ²_min(X(S^H)_{*I})`, target `L*_H`.
    Thm6,
    /// Multiscale, rate `min_l λ^{(l)}·σ²_min((G_H)_{*I})`, target `L*_{1:H}`.
    Thm1I,
    /// Multiscale, rate `λ^{(H')}·σ²_min(X(S^{H'})_{*I})`, target `L*_{H'}`.
    Thm1Ii(usize),
    /// Multiscale with a monotone chain `L*_l, …, L*_{l'}`; summed rate.
    Thm1Iii(usize, usize),
}

impl fmt::Display for InequalityCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InequalityCase::Thm6 => write!(f, "thm6"),
            InequalityCase::Thm1I => write!(f, "thm1i"),
            InequalityCase::Thm1Ii(h) => write!(f, "thm1ii:{h}"),
            InequalityCase::Thm1Iii(l, lp) => write!(f, "thm1iii:{l},{lp}"),
        }
    }
}

impl FromStr for InequalityCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown case {s:?}"));
        if s == "thm6" {
            return Ok(InequalityCase::Thm6);
        }
        if s == "thm1i" {
            return Ok(InequalityCase::Thm1I);
        }
        if let Some(rest) = s.strip_prefix("thm1iii:") {
            let (a, b) = rest.split_once(',').ok_or_else(bad)?;
            let l = a.trim().parse().map_err(|_| bad())?;
            let lp = b.trim().parse().map_err(|_| bad())?;
            if l >= lp {
                return Err(Error::Argument(format!(
                    "thm1iii needs l < l', got {l},{lp}"
                )));
            }
            return Ok(InequalityCase::Thm1Iii(l, lp));
        }
        if let Some(rest) = s.strip_prefix("thm1ii:") {
            return Ok(InequalityCase::Thm1Ii(
                rest.trim().parse().map_err(|_| bad())?,
            ));
        }
        Err(bad())
    }
}

impl Serialize for InequalityCase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Per-dataset quantities shared by every inequality check at a given depth.
#[derive(Debug, Clone)]
pub struct TheoryData {
    pub feats: GraphFeatures,
    pub y: Matrix,
    /// `σ²_min(X(S^l)_{*I})`, `l = 0..=H`.
    pub sigma_sq: Vec<f64>,
    /// `σ²_min((G_H)_{*I})`.
    pub sigma_sq_stacked: f64,
    /// `L*_l`, `l = 0..=H`.
    pub global_min: Vec<f64>,
    /// `L*_{1:H}`.
    pub global_min_stacked: f64,
}

impl TheoryData {
    pub fn new(x: &Matrix, s: &Matrix, idx: &TrainIndex, y: &Matrix, depth: usize) -> Result<Self> {
        let feats = GraphFeatures::new(x, s, idx, depth)?;
        Self::from_features(feats, y.clone())
    }

    pub fn from_features(feats: GraphFeatures, y: Matrix) -> Result<Self> {
        check_labels(&feats, &y)?;
        let depth = feats.depth();
        let mut sigma_sq = Vec::with_capacity(depth + 1);
        let mut global_min = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let sv = smallest_singular_value(feats.level(l))?;
            sigma_sq.push(sv * sv);
            global_min.push(least_squares_residual(feats.level(l), &y)?.residual);
        }
        let g = feats.stacked(depth)?;
        let sg = smallest_singular_value(&g)?;
        let global_min_stacked = least_squares_residual(&g, &y)?.residual;
        Ok(TheoryData {
            feats,
            y,
            sigma_sq,
            sigma_sq_stacked: sg * sg,
            global_min,
            global_min_stacked,
        })
    }

    pub fn depth(&self) -> usize {
        self.feats.depth()
    }

    pub fn loss(&self, params: &GnnParams) -> Result<ResidualGrad> {
        let yhat = params.forward_features(&self.feats)?;
        crate::gradients::loss_and_residual_grad(&yhat, &self.y, LossKind::Squared)
    }

    /// Target `L*` and rate for `case` given per-level λ values, or `None`
    /// when the monotonicity premise of `Thm1Iii` fails.
    pub fn target_and_rate(
        &self,
        case: InequalityCase,
        lambdas: &[f64],
    ) -> Result<Option<(f64, f64)>> {
        let h = self.depth();
        let check_level = |l: usize| {
            if l > h {
                Err(Error::Argument(format!("level {l} exceeds depth {h}")))
            } else {
                Ok(())
            }
        };
        Ok(match case {
            InequalityCase::Thm6 => Some((self.global_min[h], lambdas[h] * self.sigma_sq[h])),
            InequalityCase::Thm1I => {
                let lam = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
                Some((self.global_min_stacked, lam * self.sigma_sq_stacked))
            }
            InequalityCase::Thm1Ii(hp) => {
                check_level(hp)?;
                Some((self.global_min[hp], lambdas[hp] * self.sigma_sq[hp]))
            }
            InequalityCase::Thm1Iii(l, lp) => {
                check_level(lp)?;
                if l >= lp {
                    return Err(Error::Argument(format!(
                        "thm1iii needs l < l', got {l},{lp}"
                    )));
                }
                let chain = &self.global_min[l..=lp];
                let tol = |a: f64, b: f64| PREMISE_TOL * (1.0 + a.abs().max(b.abs()));
                let decreasing = chain.windows(2).all(|w| w[1] <= w[0] + tol(w[0], w[1]));
                let increasing = chain.windows(2).all(|w| w[1] + tol(w[0], w[1]) >= w[0]);
                let target = if decreasing {
                    self.global_min[l]
                } else if increasing {
                    self.global_min[lp]
                } else {
                    return Ok(None);
                };
                let rate = (l..=lp).map(|k| lambdas[k] * self.sigma_sq[k]).sum();
                Some((target, rate))
            }
        })
    }

    /// Pointwise `dL/dt ≤ −4·rate·(L − L*)` at `params`, squared loss.
    pub fn check(&self, params: &GnnParams, case: InequalityCase) -> Result<InequalityReport> {
        check_case_arch(params, case)?;
        if params.depth() != self.depth() {
            return Err(Error::dim(
                "differential_inequality_check",
                format!(
                    "network depth {} vs data depth {}",
                    params.depth(),
                    self.depth()
                ),
            ));
        }
        warn_narrow(params);
        let rg = self.loss(params)?;
        let terms = decompose(params, &self.feats, &rg.v)?;
        let lambdas = layer_lambdas(params);
        let lhs = terms.dldt_analytic;
        Ok(match self.target_and_rate(case, &lambdas)? {
            Some((global_min, rate)) => {
                let rhs = -4.0 * rate * (rg.loss - global_min);
                InequalityReport {
                    case,
                    loss: rg.loss,
                    global_min: Some(global_min),
                    rate: Some(rate),
                    lhs,
                    rhs: Some(rhs),
                    premise_holds: true,
                    satisfied: lhs <= rhs + POINTWISE_TOL * (1.0 + rhs.abs()),
                }
            }
            None => InequalityReport {
                case,
                loss: rg.loss,
                global_min: None,
                rate: None,
                lhs,
                rhs: None,
                premise_holds: false,
                satisfied: true,
            },
        })
    }
}

fn check_case_arch(params: &GnnParams, case: InequalityCase) -> Result<()> {
    let want = match case {
        InequalityCase::Thm6 => Architecture::Linear,
        _ => Architecture::Multiscale,
    };
    if params.arch() != want {
        return Err(Error::Unsupported(format!(
            "case {case} applies to {want} networks, got {}",
            params.arch()
        )));
    }
    Ok(())
}

fn warn_narrow(params: &GnnParams) {
    let floor = params.input_dim().min(params.output_dim());
    if params.dims()[1..].iter().any(|&m| m < floor) {
        log::warn!("hidden width below min(m_x, m_y); L* is only a lower bound");
    }
}

/// Both sides of a pointwise differential inequality. When the premise of
/// the monotone case fails, `rhs` is absent and the report is vacuously
/// satisfied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub case: InequalityCase,
    pub loss: f64,
    pub global_min: Option<f64>,
    pub rate: Option<f64>,
    pub lhs: f64,
    pub rhs: Option<f64>,
    pub premise_holds: bool,
    pub satisfied: bool,
}

pub fn differential_inequality_check(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    case: InequalityCase,
) -> Result<InequalityReport> {
    check_case_arch(params, case)?;
    TheoryData::new(x, s, idx, y, params.depth())?.check(params, case)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// Integrated bound `L(t) − L* ≤ (L₀ − L*)·exp(−4·rate_t·t)` at every
/// checkpoint, with `λ_T` the running minimum over recorded snapshots.
pub fn convergence_bound_trace(
    traj: &TrajectoryRecord,
    data: &TheoryData,
    case: InequalityCase,
) -> Result<Vec<BoundRow>> {
    if traj.loss != LossKind::Squared {
        return Err(Error::Unsupported(
            "bounds are stated for the squared loss".into(),
        ));
    }
    let first = traj
        .checkpoints
        .first()
        .ok_or_else(|| Error::Trajectory("empty trajectory".into()))?;
    let mut running: Option<Vec<f64>> = None;
    let mut rows = Vec::with_capacity(traj.checkpoints.len());
    let mut l0 = None;
    for cp in &traj.checkpoints {
        let params = cp.params.as_ref().ok_or_else(|| {
            Error::Trajectory(format!(
                "checkpoint at step {} has no parameter snapshot",
                cp.step
            ))
        })?;
        check_case_arch(params, case)?;
        let lambdas = layer_lambdas(params);
        let lam_t = match running.take() {
            None => lambdas,
            Some(prev) => prev.iter().zip(&lambdas).map(|(a, b)| a.min(*b)).collect(),
        };
        let (target, rate) = data.target_and_rate(case, &lam_t)?.ok_or_else(|| {
            Error::Trajectory(format!("monotonicity premise fails for case {case}"))
        })?;
        let loss = data.loss(params)?.loss;
        let gap0 =
            *l0.get_or_insert(data.loss(first.params.as_ref().expect("checked"))?.loss - target);
        let lhs = loss - target;
        let rhs = gap0 * (-4.0 * rate * cp.t).exp();
        let satisfied = lhs <= INTEGRATED_SLACK * rhs + INTEGRATED_FLOOR * (1.0 + gap0.abs());
        rows.push(BoundRow {
            step: cp.step,
            t: cp.t,
            loss,
            lhs,
            rhs,
            satisfied,
        });
        running = Some(lam_t);
    }
    Ok(rows)
}

/// Comparison of a multiscale network against the plain network sharing its
/// `B` and top head, at a point where both emit the same output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipReport {
    pub dldt_multi: f64,
    pub dldt_nonmulti: f64,
    /// `a_i = Σ_{l=i}^{H−1} J_(i,l) vec M_l`, `i = 1..=H`, as matrices.
    pub a: Vec<Matrix>,
    /// `b_i = J_(i,H) vec M_H`.
    pub b: Vec<Matrix>,
    /// `Σ_{l<H}` first terms of the multiscale decomposition.
    pub skip_first_terms: f64,
    /// `Σ_i (‖a_i‖² + 2⟨b_i, a_i⟩)`.
    pub condition_value: f64,
    /// `dldt_multi − dldt_nonmulti ≤ −skip_first_terms` (with slack).
    pub inequality_holds: bool,
}

impl SkipReport {
    /// The implication `condition_value ≥ 0 ⇒ inequality_holds`.
    pub fn implication_holds(&self) -> bool {
        self.condition_value < 0.0 || self.inequality_holds
    }
}

/// The plain network with the same `B` and `W = W_(H)`.
pub fn top_head_network(params_multi: &GnnParams) -> Result<GnnParams> {
    if params_multi.arch() != Architecture::Multiscale {
        return Err(Error::Unsupported(format!(
            "skip comparison needs a multiscale linear network, got {}",
            params_multi.arch()
        )));
    }
    let top = params_multi.w_mats()[params_multi.depth()].clone();
    GnnParams::new(
        Architecture::Linear,
        params_multi.b_mats().to_vec(),
        vec![top],
    )
}

pub fn skip_acceleration_check(
    params_multi: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    kind: LossKind,
) -> Result<SkipReport> {
    let feats = GraphFeatures::new(x, s, idx, params_multi.depth())?;
    skip_acceleration_features(params_multi, &feats, y, kind)
}

pub fn skip_acceleration_features(
    params_multi: &GnnParams,
    feats: &GraphFeatures,
    y: &Matrix,
    kind: LossKind,
) -> Result<SkipReport> {
    let plain = top_head_network(params_multi)?;
    let h = params_multi.depth();
    let yhat_multi = params_multi.forward_features(feats)?;
    let yhat_plain = plain.forward_features(feats)?;
    let gap = yhat_multi.sub(&yhat_plain).frobenius();
    if gap > 1e-9 * (1.0 + yhat_multi.frobenius()) {
        return Err(Error::ComparisonUndefined(format!(
            "outputs differ by {gap:e}; the skip heads must cancel"
        )));
    }
    let rg = crate::gradients::loss_and_residual_grad(&yhat_multi, y, kind)?;
    let multi = decompose(params_multi, feats, &rg.v)?;
    let single = decompose(&plain, feats, &rg.v)?;
    let m = residual_products(&rg.v, feats, h);

    let mut a = Vec::with_capacity(h);
    let mut b = Vec::with_capacity(h);
    let mut condition_value = 0.0;
    for i in 1..=h {
        let mut ai = Matrix::zeros(params_multi.dims()[i], params_multi.dims()[i - 1]);
        for l in i..h {
            ai.axpy(1.0, &j_apply(params_multi, i, l, &m[l])?);
        }
        let bi = j_apply(params_multi, i, h, &m[h])?;
        condition_value += ai.frobenius_sq() + 2.0 * bi.dot(&ai);
        a.push(ai);
        b.push(bi);
    }
    let skip_first_terms: f64 = multi.first_terms[..h].iter().sum();
    let inequality_holds =
        multi.dldt_analytic - single.dldt_analytic <= -skip_first_terms + POINTWISE_TOL;
    Ok(SkipReport {
        dldt_multi: multi.dldt_analytic,
        dldt_nonmulti: single.dldt_analytic,
        a,
        b,
        skip_first_terms,
        condition_value,
        inequality_holds,
    })
}

/// Replaces `W_(0)` so that the skip heads `W_(0..H−1)` contribute nothing
/// to the output on the training nodes. Exact when `X_{*I}` has full column
/// rank; otherwise the residual contribution is least-squares minimal.
pub fn cancel_skip_heads(params_multi: &GnnParams, feats: &GraphFeatures) -> Result<GnnParams> {
    top_head_network(params_multi)?;
    let h = params_multi.depth();
    let state = params_multi.end_to_end();
    let mut skip_out = Matrix::zeros(params_multi.output_dim(), feats.num_train());
    for l in 1..h {
        skip_out.axpy(1.0, &state.z[l].matmul(feats.level(l)));
    }
    let ls = least_squares_residual(feats.level(0), &skip_out.scale(-1.0))?;
    let mut w = params_multi.w_mats().to_vec();
    w[0] = ls.minimizer;
    GnnParams::new(Architecture::Multiscale, params_multi.b_mats().to_vec(), w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub layer: usize,
    /// Smallest `σ_min(B̄^{(1:l)})` over recorded states with `L ≤ L₀`.
    pub gamma_empirical: f64,
    /// Running minimum of `λ_min((B̄^{(1:l)})ᵀB̄^{(1:l)})` per checkpoint.
    pub lambda_t_path: Vec<f64>,
    pub lambda_t: f64,
    pub satisfied: bool,
}

/// Empirical singular margin along a recorded run.
pub fn margin_trace(traj: &TrajectoryRecord, layer: usize) -> Result<MarginReport> {
    let first = traj
        .checkpoints
        .first()
        .ok_or_else(|| Error::Trajectory("empty trajectory".into()))?;
    let lambda_t_path = crate::trainer::lambda_t_path(traj, layer)?
        .into_iter()
        .map(|(_, v)| v)
        .collect::<Vec<_>>();
    let l0 = first.loss;
    let mut gamma = f64::INFINITY;
    for cp in traj.checkpoints.iter().filter(|cp| cp.loss <= l0) {
        let sigma = match &cp.params {
            Some(p) => smallest_singular_value(&p.layer_products(1, layer)?)?,
            None => cp.lambdas[layer].max(0.0).sqrt(),
        };
        gamma = gamma.min(sigma);
    }
    let lambda_t = *lambda_t_path.last().expect("nonempty");
    let tol = 1e-10 * (1.0 + gamma * gamma);
    Ok(MarginReport {
        layer,
        gamma_empirical: gamma,
        satisfied: lambda_t >= gamma * gamma - tol,
        lambda_t_path,
        lambda_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndToEndReport {
    pub levels: Vec<usize>,
    /// Formula value of `dZ_(l)/dt`.
    pub predicted: Vec<Matrix>,
    /// `(Z(θ − step·∇L) − Z(θ)) / step`.
    pub measured: Vec<Matrix>,
    pub max_deviation: f64,
    /// `max |pred − meas| / (1 + |pred|)` over entries.
    pub max_scaled_deviation: f64,
}

/// Predicted flow of the end-to-end matrices
/// `dZ_(l)/dt = −∇_l·(B̄^{(1:l)})ᵀB̄^{(1:l)}
///   − Σ_{i ≤ l} Σ_{k ≥ i} (W_(l)B̄^{(i+1:l)})(W_(k)B̄^{(i+1:k)})ᵀ ∇_k (B̄^{(1:i−1)})ᵀB̄^{(1:i−1)}`
/// with `∇_k = V·P_kᵀ`, compared with a forward difference of one GD step.
pub fn end_to_end_dynamics_check(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    step: f64,
) -> Result<EndToEndReport> {
    require_linear(params)?;
    let feats = GraphFeatures::new(x, s, idx, params.depth())?;
    check_labels(&feats, y)?;
    let yhat = params.forward_features(&feats)?;
    let rg = crate::gradients::loss_and_residual_grad(&yhat, y, LossKind::Squared)?;
    let h = params.depth();
    let grad_z = residual_products(&rg.v, &feats, h);
    let levels = params.head_levels();

    let mut predicted = Vec::with_capacity(levels.len());
    for &l in &levels {
        let prefix_l = params.layer_products(1, l)?;
        let mut dz = grad_z[l].matmul(&prefix_l.t_matmul(&prefix_l)).scale(-1.0);
        let wl = params.head(l).expect("head level");
        for i in 1..=l {
            let left = wl.matmul(&params.layer_products(i + 1, l)?);
            let below = params.layer_products(1, i - 1)?;
            let gram_below = below.t_matmul(&below);
            for &k in levels.iter().filter(|&&k| k >= i) {
                let wk = params.head(k).expect("head level");
                let right = wk.matmul(&params.layer_products(i + 1, k)?);
                let term = left.matmul_t(&right).matmul(&grad_z[k]).matmul(&gram_below);
                dz.axpy(-1.0, &term);
            }
        }
        predicted.push(dz);
    }

    let grads = linear_gradients(params, &feats, &rg.v)?;
    let moved = params.offset(-step, &grads.db, &grads.dw);
    let before = params.end_to_end();
    let after = moved.end_to_end();
    let measured: Vec<Matrix> = after
        .z
        .iter()
        .zip(&before.z)
        .map(|(za, zb)| za.sub(zb).scale(1.0 / step))
        .collect();

    let mut max_deviation = 0.0f64;
    let mut max_scaled_deviation = 0.0f64;
    for (p, m) in predicted.iter().zip(&measured) {
        for (a, b) in p.as_slice().iter().zip(m.as_slice()) {
            let d = (a - b).abs();
            max_deviation = max_deviation.max(d);
            max_scaled_deviation = max_scaled_deviation.max(d / (1.0 + a.abs()));
        }
    }
    Ok(EndToEndReport {
        levels,
        predicted,
        measured,
        max_deviation,
        max_scaled_deviation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalRow {
    pub step: usize,
    pub t: f64,
    pub sum_first_terms: f64,
    pub sum_second_terms: f64,
}

/// First- and second-term sums at every checkpoint carrying a recorded
/// decomposition.
pub fn signal_term_report(traj: &TrajectoryRecord) -> Vec<SignalRow> {
    traj.checkpoints
        .iter()
        .filter_map(|cp| {
            cp.decomposition.as_ref().map(|d| SignalRow {
                step: cp.step,
                t: cp.t,
                sum_first_terms: d.sum_first(),
                sum_second_terms: d.sum_second(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::analytic_gradients;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[[v]]).unwrap()
    }

    fn scalar_net(w: f64, b: f64) -> GnnParams {
        GnnParams::new(Architecture::Linear, vec![scalar(b)], vec![scalar(w)]).unwrap()
    }

    #[test]
    fn condition_report_identity_and_scalar() {
        let x = Matrix::identity(2);
        let r =
            condition_report(&x, &x, &TrainIndex::all(2), &Matrix::zeros(1, 2), 3, true).unwrap();
        for lvl in &r.levels {
            assert_relative_eq!(lvl.sigma_sq_linear, 1.0, epsilon = 1e-14);
        }
        let r = condition_report(
            &scalar(3.0),
            &scalar(1.0),
            &TrainIndex::all(1),
            &scalar(0.0),
            0,
            false,
        )
        .unwrap();
        assert_relative_eq!(r.levels[0].sigma_sq_linear, 9.0, epsilon = 1e-13);
        assert!(r.levels[0].sigma_sq_multiscale.is_none());
    }

    #[test]
    fn global_minimum_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]]).unwrap();
        let idx = TrainIndex::all(3);
        let w = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let y = w.matmul(&x);
        let s = Matrix::identity(3);
        let r = global_minimum(GlobalMinScope::LinearAtDepth(0), &x, &s, &idx, &y).unwrap();
        assert!(r < 1e-24);

        let nil = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let r = global_minimum(
            GlobalMinScope::LinearAtDepth(2),
            &Matrix::identity(2),
            &nil,
            &TrainIndex::all(2),
            &y,
        )
        .unwrap();
        assert_eq!(r, 5.0);
    }

    #[test]
    fn scalar_decomposition() {
        let (w, b, y) = (0.6, 1.7, -0.3);
        let p = scalar_net(w, b);
        let one = scalar(1.0);
        let idx = TrainIndex::all(1);
        let yhat = p.forward(&one, &one, &idx).unwrap();
        let rg =
            crate::gradients::loss_and_residual_grad(&yhat, &scalar(y), LossKind::Squared).unwrap();
        let d = loss_reduction_decomposition(&p, &one, &one, &idx, &rg).unwrap();
        let r2 = (w * b - y).powi(2);
        assert_relative_eq!(d.first_terms[0], 4.0 * r2 * b * b, max_relative = 1e-14);
        assert_relative_eq!(d.second_terms[0], 4.0 * r2 * w * w, max_relative = 1e-14);
        assert_relative_eq!(
            d.dldt_analytic,
            -4.0 * r2 * (b * b + w * w),
            max_relative = 1e-14
        );

        let g = analytic_gradients(&p, &one, &one, &idx, &rg).unwrap();
        assert_relative_eq!(-d.dldt_analytic, g.norm_sq(), max_relative = 1e-14);
    }

    #[test]
    fn decomposition_rejects_relu() {
        let p = scalar_net(1.0, 1.0).with_arch(Architecture::Relu).unwrap();
        let one = scalar(1.0);
        let rg = ResidualGrad {
            loss: 0.0,
            v: Matrix::zeros(1, 1),
        };
        let r = loss_reduction_decomposition(&p, &one, &one, &TrainIndex::all(1), &rg);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn scalar_inequality_slack() {
        let (w, b, y) = (0.9, -0.4, 1.1);
        let p = scalar_net(w, b);
        let one = scalar(1.0);
        let rep = differential_inequality_check(
            &p,
            &one,
            &one,
            &TrainIndex::all(1),
            &scalar(y),
            InequalityCase::Thm6,
        )
        .unwrap();
        let r2 = (w * b - y).powi(2);
        assert_relative_eq!(rep.lhs, -4.0 * r2 * (b * b + w * w), max_relative = 1e-13);
        assert_relative_eq!(rep.rhs.unwrap(), -4.0 * b * b * r2, max_relative = 1e-13);
        assert!(rep.satisfied);
    }

    #[test]
    fn inequality_at_optimum() {
        let p = scalar_net(2.0, 0.5);
        let one = scalar(1.0);
        let rep = differential_inequality_check(
            &p,
            &one,
            &one,
            &TrainIndex::all(1),
            &one,
            InequalityCase::Thm6,
        )
        .unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert!(rep.satisfied);
    }

    #[test]
    fn case_parsing() {
        assert_eq!(
            "thm6".parse::<InequalityCase>().unwrap(),
            InequalityCase::Thm6
        );
        assert_eq!(
            "thm1i".parse::<InequalityCase>().unwrap(),
            InequalityCase::Thm1I
        );
        assert_eq!(
            "thm1ii:2".parse::<InequalityCase>().unwrap(),
            InequalityCase::Thm1Ii(2)
        );
        assert_eq!(
            "thm1iii:0,3".parse::<InequalityCase>().unwrap(),
            InequalityCase::Thm1Iii(0, 3)
        );
        assert!("thm1iii:3,1".parse::<InequalityCase>().is_err());
        assert!("thm2".parse::<InequalityCase>().is_err());
        for c in ["thm6", "thm1i", "thm1ii:4", "thm1iii:1,2"] {
            assert_eq!(c.parse::<InequalityCase>().unwrap().to_string(), c);
        }
    }

    #[test]
    fn scalar_skip_comparison() {
        // H = 1, W_(0) = 0: the gap is exactly the level-0 first term.
        let (w1, b, y, x) = (0.8, 1.3, 0.2, 1.5);
        let p = GnnParams::new(
            Architecture::Multiscale,
            vec![scalar(b)],
            vec![scalar(0.0), scalar(w1)],
        )
        .unwrap();
        let one = scalar(1.0);
        let rep = skip_acceleration_check(
            &p,
            &scalar(x),
            &one,
            &TrainIndex::all(1),
            &scalar(y),
            LossKind::Squared,
        )
        .unwrap();
        let v = 2.0 * (w1 * b * x - y);
        assert_relative_eq!(
            rep.dldt_multi - rep.dldt_nonmulti,
            -(v * x).powi(2),
            max_relative = 1e-12
        );
        assert_eq!(rep.condition_value, 0.0);
        assert!(rep.inequality_holds);
    }

    #[test]
    fn skip_comparison_requires_matching_outputs() {
        let one = scalar(1.0);
        let p = GnnParams::new(
            Architecture::Multiscale,
            vec![one.clone()],
            vec![one.clone(), one.clone()],
        )
        .unwrap();
        let r =
            skip_acceleration_check(&p, &one, &one, &TrainIndex::all(1), &one, LossKind::Squared);
        assert!(matches!(r, Err(Error::ComparisonUndefined(_))));
    }

    #[test]
    fn scalar_end_to_end_dynamics() {
        let (w, b, y) = (0.7, 1.2, -0.5);
        let p = scalar_net(w, b);
        let one = scalar(1.0);
        let expected = -(b * b + w * w) * 2.0 * (w * b - y);
        let mut last = f64::INFINITY;
        for step in [1e-3, 1e-4, 1e-5] {
            let rep =
                end_to_end_dynamics_check(&p, &one, &one, &TrainIndex::all(1), &scalar(y), step)
                    .unwrap();
            assert_relative_eq!(rep.predicted[0][(0, 0)], expected, max_relative = 1e-14);
            assert!(rep.max_deviation < last);
            last = rep.max_deviation;
        }
        assert!(last < 1e-4);

        let stationary = scalar_net(1.0, 0.5);
        let rep = end_to_end_dynamics_check(
            &stationary,
            &one,
            &one,
            &TrainIndex::all(1),
            &scalar(0.5),
            1e-6,
        )
        .unwrap();
        assert_eq!(rep.max_deviation, 0.0);
    }
}
