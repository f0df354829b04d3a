mod common;

use common::*;
use gnnflow::gradients::{analytic_gradients, finite_difference_gradients, loss_and_residual_grad};
use gnnflow::theory::{
    decompose, end_to_end_dynamics_check, signal_term_report, InequalityCase, TheoryData,
};
use gnnflow::trainer::{train, Integrator, Optimizer, RunStatus};
use gnnflow::{
    Architecture, Error, GnnParams, GraphFeatures, LossKind, Matrix, TrainConfig, TrainIndex,
};

#[test]
fn relu_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for arch in [Architecture::Relu, Architecture::MultiscaleRelu] {
            for kind in [LossKind::Squared, LossKind::CrossEntropy] {
                let inst = small_instance(seed, arch, 1 + (seed as usize % 3), 3);
                let mut r = rng(seed + 7);
                let y = match kind {
                    LossKind::Squared => gaussian(&mut r, 3, inst.idx.len(), 1.0),
                    LossKind::CrossEntropy => one_hot(&mut r, 3, inst.idx.len()),
                };
                let yhat = inst.params.forward(&inst.x, &inst.s, &inst.idx).unwrap();
                let rg = loss_and_residual_grad(&yhat, &y, kind).unwrap();
                let exact =
                    analytic_gradients(&inst.params, &inst.x, &inst.s, &inst.idx, &rg).unwrap();
                let fd = finite_difference_gradients(
                    &inst.params,
                    &inst.x,
                    &inst.s,
                    &inst.idx,
                    &y,
                    kind,
                    1e-6,
                )
                .unwrap();
                worst = worst.max(exact.max_relative_error(&fd));
            }
        }
    }
    // Random draws keep pre-activations away from the kink at this step size.
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

fn euler_problem() -> (Instance, Matrix) {
    let inst = small_instance(3, Architecture::Linear, 2, 2);
    let mut r = rng(99);
    let y = gaussian(&mut r, 2, inst.idx.len(), 1.0);
    (inst, y)
}

fn loss_at(inst: &Instance, y: &Matrix, lr: f64, steps: usize, integrator: Integrator) -> f64 {
    let mut cfg = TrainConfig::gd(LossKind::Squared, lr, steps);
    cfg.record_every = steps;
    cfg.integrator = integrator;
    let (_, traj) = train(&inst.params, &inst.x, &inst.s, &inst.idx, y, &cfg).unwrap();
    traj.final_loss().unwrap()
}

#[test]
fn integrators_converge_to_the_flow_at_their_order() {
    let (inst, y) = euler_problem();
    let horizon = 0.4;
    let reference = loss_at(&inst, &y, horizon / 4096.0, 4096, Integrator::Rk4);
    let err = |lr: f64, integ| {
        (loss_at(&inst, &y, lr, (horizon / lr).round() as usize, integ) - reference).abs()
    };
    let euler_ratio = err(0.02, Integrator::Euler) / err(0.01, Integrator::Euler);
    let rk4_ratio = err(0.1, Integrator::Rk4) / err(0.05, Integrator::Rk4);
    assert!(euler_ratio >= 1.8, "Euler ratio {euler_ratio}");
    assert!(
        rk4_ratio >= 1.8 && rk4_ratio > euler_ratio,
        "RK4 ratio {rk4_ratio}"
    );
}

#[test]
fn small_steps_decrease_the_loss() {
    let (inst, y) = euler_problem();
    for integrator in [Integrator::Euler, Integrator::Rk4] {
        let mut cfg = TrainConfig::gd(LossKind::Squared, 1e-3, 300);
        cfg.integrator = integrator;
        let (_, traj) = train(&inst.params, &inst.x, &inst.s, &inst.idx, &y, &cfg).unwrap();
        assert_eq!(traj.checkpoints.len(), 301);
        assert!(traj.checkpoints.windows(2).all(|w| w[1].loss <= w[0].loss));
    }
}

#[test]
fn checkpoint_cadence_includes_first_and_last_step() {
    let (inst, y) = euler_problem();
    let mut cfg = TrainConfig::gd(LossKind::Squared, 1e-3, 25);
    cfg.record_every = 10;
    let (_, traj) = train(&inst.params, &inst.x, &inst.s, &inst.idx, &y, &cfg).unwrap();
    let steps: Vec<usize> = traj.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 25]);
    assert!((traj.checkpoints[3].t - 0.025).abs() < 1e-15);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let (inst, y) = euler_problem();
    let cfg = TrainConfig::gd(LossKind::Squared, 50.0, 200);
    let (_, traj) = train(&inst.params, &inst.x, &inst.s, &inst.idx, &y, &cfg).unwrap();
    match traj.status {
        RunStatus::Diverged { step } => assert!(step <= 200),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn adam_with_rk4_is_rejected() {
    let (inst, y) = euler_problem();
    let mut cfg = TrainConfig::gd(LossKind::Squared, 1e-3, 5);
    cfg.optimizer = Optimizer::Adam;
    cfg.integrator = Integrator::Rk4;
    let err = train(&inst.params, &inst.x, &inst.s, &inst.idx, &y, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn recorded_decompositions_match_recomputation() {
    let inst = small_instance(8, Architecture::Multiscale, 2, 2);
    let mut r = rng(8);
    let y = gaussian(&mut r, 2, inst.idx.len(), 1.0);
    let mut cfg = TrainConfig::gd(LossKind::Squared, 5e-3, 30);
    cfg.record_every = 5;
    cfg.compute_decomposition = true;
    cfg.snapshot_params = true;
    let (_, traj) = train(&inst.params, &inst.x, &inst.s, &inst.idx, &y, &cfg).unwrap();
    let rows = signal_term_report(&traj);
    assert_eq!(rows.len(), traj.checkpoints.len());
    let feats = GraphFeatures::new(&inst.x, &inst.s, &inst.idx, 2).unwrap();
    for (row, cp) in rows.iter().zip(&traj.checkpoints) {
        let p = cp.params.as_ref().unwrap();
        let rg =
            loss_and_residual_grad(&p.forward_features(&feats).unwrap(), &y, LossKind::Squared)
                .unwrap();
        let d = decompose(p, &feats, &rg.v).unwrap();
        assert_eq!(row.step, cp.step);
        assert!((row.sum_first_terms - d.sum_first()).abs() <= 1e-12 * (1.0 + d.sum_first()));
        assert!((row.sum_second_terms - d.sum_second()).abs() <= 1e-12 * (1.0 + d.sum_second()));
        assert!((rg.loss - cp.loss).abs() <= 1e-12 * (1.0 + cp.loss));
    }
}

#[test]
fn end_to_end_flow_matches_a_small_step() {
    for seed in 0..10u64 {
        let arch = if seed % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::Multiscale
        };
        let inst = small_instance(seed, arch, 1 + seed as usize % 3, 2);
        let mut r = rng(seed);
        let y = gaussian(&mut r, 2, inst.idx.len(), 1.0);
        let rep =
            end_to_end_dynamics_check(&inst.params, &inst.x, &inst.s, &inst.idx, &y, 1e-7).unwrap();
        assert!(
            rep.max_scaled_deviation < 1e-5,
            "seed {seed}: {}",
            rep.max_scaled_deviation
        );
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_rows(&[[v]]).unwrap()
}

/// One node feature on a two-node swap graph. The loss sits entirely on the
/// level-0 head, outside the row space of the level-1 features, while the
/// level-1 rate grows with `B²`.
#[test]
fn per_scale_rate_fails_outside_the_feature_row_space() {
    let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let s = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let idx = TrainIndex::all(2);
    let y = Matrix::zeros(1, 2);
    let params = GnnParams::new(
        Architecture::Multiscale,
        vec![scalar(2.0)],
        vec![scalar(1.0), scalar(0.0)],
    )
    .unwrap();
    let data = TheoryData::new(&x, &s, &idx, &y, 1).unwrap();
    let rep = data.check(&params, InequalityCase::Thm1Ii(1)).unwrap();
    assert!((rep.loss - 1.0).abs() < 1e-15);
    assert!((rep.lhs + 4.0).abs() < 1e-14);
    assert!((rep.rhs.unwrap() + 16.0).abs() < 1e-14);
    assert!(!rep.satisfied);
    // With B below one the same point satisfies the bound.
    let small = GnnParams::new(
        Architecture::Multiscale,
        vec![scalar(0.9)],
        vec![scalar(1.0), scalar(0.0)],
    )
    .unwrap();
    assert!(
        data.check(&small, InequalityCase::Thm1Ii(1))
            .unwrap()
            .satisfied
    );
    // The joint-scale rate holds at the violating point.
    assert!(
        data.check(&params, InequalityCase::Thm1I)
            .unwrap()
            .satisfied
    );
}
