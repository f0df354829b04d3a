//! Full-batch gradient descent (Euler or RK4 steps of the gradient flow, or
//! Adam) with trajectory recording.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{
    analytic_gradients, linear_gradients, loss_and_residual_grad, GradientSet, LossKind,
    ResidualGrad,
};
use crate::graph::{GraphFeatures, TrainIndex};
use crate::linalg::Matrix;
use crate::model::GnnParams;
use crate::theory::{decompose, layer_lambdas, DecompositionTerms};

/// Losses above this abort a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Gd,
    Adam,
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Carried for provenance; full-batch training draws no randomness.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub compute_decomposition: bool,
    #[serde(default)]
    pub snapshot_params: bool,
}

impl TrainConfig {
    pub fn gd(loss: LossKind, lr: f64, steps: usize) -> Self {
        TrainConfig {
            loss,
            lr,
            steps,
            record_every: 1,
            integrator: Integrator::Euler,
            optimizer: Optimizer::Gd,
            seed: 0,
            compute_decomposition: false,
            snapshot_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if self.optimizer == Optimizer::Adam && self.integrator == Integrator::Rk4 {
            return Err(Error::Config(
                "RK4 integrates the gradient flow; use it with gd".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    /// Loss exceeded the divergence threshold (or became non-finite) when
    /// evaluated at `step`.
    Diverged {
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    /// `step · lr`.
    pub t: f64,
    pub loss: f64,
    /// `λ_min((B̄^{(1:l)})ᵀB̄^{(1:l)})` for `l = 0..=H`.
    pub lambdas: Vec<f64>,
    pub decomposition: Option<DecompositionTerms>,
    pub params: Option<GnnParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub loss: LossKind,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub integrator: Integrator,
    pub depth: usize,
    pub status: RunStatus,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrajectoryRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.loss)
    }
}

/// Loss and gradients, with linear networks evaluated in feature space.
struct Objective<'a> {
    x: &'a Matrix,
    s: &'a Matrix,
    idx: &'a TrainIndex,
    y: &'a Matrix,
    kind: LossKind,
    feats: Option<GraphFeatures>,
}

impl<'a> Objective<'a> {
    fn residual(&self, p: &GnnParams) -> Result<ResidualGrad> {
        let yhat = match &self.feats {
            Some(f) => p.forward_features(f)?,
            None => p.forward(self.x, self.s, self.idx)?,
        };
        loss_and_residual_grad(&yhat, self.y, self.kind)
    }

    fn gradients(&self, p: &GnnParams, rg: &ResidualGrad) -> Result<GradientSet> {
        match &self.feats {
            Some(f) => linear_gradients(p, f, &rg.v),
            None => analytic_gradients(p, self.x, self.s, self.idx, rg),
        }
    }
}

/// Trains from `params` and returns the final parameters with the recorded
/// trajectory. Checkpoints fall on step 0, every multiple of `record_every`
/// and the final step.
pub fn train(
    params: &GnnParams,
    x: &Matrix,
    s: &Matrix,
    idx: &TrainIndex,
    y: &Matrix,
    cfg: &TrainConfig,
) -> Result<(GnnParams, TrajectoryRecord)> {
    cfg.validate()?;
    params.check_inputs("train", x, s, idx)?;
    if y.shape() != (params.output_dim(), idx.len()) {
        return Err(Error::dim(
            "train",
            format!(
                "Y is {:?}, expected ({}, {})",
                y.shape(),
                params.output_dim(),
                idx.len()
            ),
        ));
    }
    if cfg.compute_decomposition && !params.arch().is_linear() {
        return Err(Error::Unsupported(format!(
            "loss decomposition needs a linear architecture, got {}",
            params.arch()
        )));
    }
    let feats = if params.arch().is_linear() {
        Some(GraphFeatures::new(x, s, idx, params.depth())?)
    } else {
        None
    };
    let obj = Objective {
        x,
        s,
        idx,
        y,
        kind: cfg.loss,
        feats,
    };

    let mut record = TrajectoryRecord {
        loss: cfg.loss,
        lr: cfg.lr,
        optimizer: cfg.optimizer,
        integrator: cfg.integrator,
        depth: params.depth(),
        status: RunStatus::Completed,
        checkpoints: Vec::new(),
    };
    let mut theta = params.clone();
    let mut adam = AdamState::new(params);

    for step in 0..=cfg.steps {
        let rg = obj.residual(&theta)?;
        if !rg.loss.is_finite() || rg.loss > DIVERGENCE_THRESHOLD {
            log::warn!("loss {:e} at step {step}; stopping", rg.loss);
            record.status = RunStatus::Diverged { step };
            break;
        }
        if step % cfg.record_every == 0 || step == cfg.steps {
            let decomposition = match (&obj.feats, cfg.compute_decomposition) {
                (Some(f), true) => Some(decompose(&theta, f, &rg.v)?),
                _ => None,
            };
            record.checkpoints.push(Checkpoint {
                step,
                t: step as f64 * cfg.lr,
                loss: rg.loss,
                lambdas: layer_lambdas(&theta),
                decomposition,
                params: cfg.snapshot_params.then(|| theta.clone()),
            });
        }
        if step == cfg.steps {
            break;
        }
        let next = match (cfg.optimizer, cfg.integrator) {
            (Optimizer::Gd, Integrator::Euler) => {
                let g = obj.gradients(&theta, &rg)?;
                theta.offset(-cfg.lr, &g.db, &g.dw)
            }
            (Optimizer::Gd, Integrator::Rk4) => rk4_step(&obj, &theta, &rg, cfg.lr)?,
            (Optimizer::Adam, _) => {
                let g = obj.gradients(&theta, &rg)?;
                adam.step(&theta, &g, cfg.lr)
            }
        };
        if !next.is_finite() {
            log::warn!("non-finite parameters after step {step}; stopping");
            record.status = RunStatus::Diverged { step: step + 1 };
            break;
        }
        theta = next;
    }
    Ok((theta, record))
}

fn rk4_step(
    obj: &Objective<'_>,
    theta: &GnnParams,
    rg: &ResidualGrad,
    h: f64,
) -> Result<GnnParams> {
    let field = |p: &GnnParams| -> Result<GradientSet> {
        let r = obj.residual(p)?;
        obj.gradients(p, &r)
    };
    let k1 = obj.gradients(theta, rg)?;
    let k2 = field(&theta.offset(-h / 2.0, &k1.db, &k1.dw))?;
    let k3 = field(&theta.offset(-h / 2.0, &k2.db, &k2.dw))?;
    let k4 = field(&theta.offset(-h, &k3.db, &k3.dw))?;
    let combine = |a: &[Matrix], b: &[Matrix], c: &[Matrix], d: &[Matrix]| -> Vec<Matrix> {
        (0..a.len())
            .map(|i| {
                let mut m = a[i].clone();
                m.axpy(2.0, &b[i]);
                m.axpy(2.0, &c[i]);
                m.axpy(1.0, &d[i]);
                m
            })
            .collect()
    };
    let db = combine(&k1.db, &k2.db, &k3.db, &k4.db);
    let dw = combine(&k1.dw, &k2.dw, &k3.dw, &k4.dw);
    Ok(theta.offset(-h / 6.0, &db, &dw))
}

struct AdamState {
    t: i32,
    m: GradientSet,
    v: GradientSet,
}

impl AdamState {
    fn new(p: &GnnParams) -> Self {
        AdamState {
            t: 0,
            m: GradientSet::zeros_like(p),
            v: GradientSet::zeros_like(p),
        }
    }

    fn step(&mut self, theta: &GnnParams, g: &GradientSet, lr: f64) -> GnnParams {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let update = |m: &mut Matrix, v: &mut Matrix, g: &Matrix| -> Matrix {
            *m = m.zip_with(g, |mv, gv| ADAM_BETA1 * mv + (1.0 - ADAM_BETA1) * gv);
            *v = v.zip_with(g, |vv, gv| ADAM_BETA2 * vv + (1.0 - ADAM_BETA2) * gv * gv);
            m.zip_with(v, |mv, vv| (mv / c1) / ((vv / c2).sqrt() + ADAM_EPS))
        };
        let db: Vec<Matrix> = (0..g.db.len())
            .map(|i| update(&mut self.m.db[i], &mut self.v.db[i], &g.db[i]))
            .collect();
        let dw: Vec<Matrix> = (0..g.dw.len())
            .map(|i| update(&mut self.m.dw[i], &mut self.v.dw[i], &g.dw[i]))
            .collect();
        theta.offset(-lr, &db, &dw)
    }
}

/// Running minimum `λ_T^{(l)}` over checkpoints, paired with `T`.
pub fn lambda_t_path(traj: &TrajectoryRecord, layer: usize) -> Result<Vec<(f64, f64)>> {
    if traj.checkpoints.is_empty() {
        return Err(Error::Trajectory("empty trajectory".into()));
    }
    if layer > traj.depth {
        return Err(Error::Argument(format!(
            "layer {layer} exceeds depth {}",
            traj.depth
        )));
    }
    let mut current = f64::INFINITY;
    Ok(traj
        .checkpoints
        .iter()
        .map(|cp| {
            current = current.min(cp.lambdas[layer]);
            (cp.t, current)
        })
        .collect())
}
