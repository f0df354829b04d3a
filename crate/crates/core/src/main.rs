use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gnnflow::graph::aggregation_matrix;
use gnnflow::harness::{gen_synthetic, run_experiment, ExperimentSpec, SyntheticSpec};
use gnnflow::io::{
    bound_trace_csv, read_dataset, read_json, read_params, read_snapshots, to_json_string,
    trajectory_csv, write_dataset, write_json, write_snapshots, Dataset,
};
use gnnflow::model::init_params;
use gnnflow::theory::{
    condition_report, convergence_bound_trace, loss_reduction_decomposition,
    skip_acceleration_check, InequalityCase, TheoryData,
};
use gnnflow::trainer::{train, RunStatus, TrainConfig};
use gnnflow::{gradients, AggregationKind, Architecture, Error, InitScheme, LossKind, Matrix};

#[derive(Parser)]
#[command(
    name = "gnnflow",
    version,
    about = "Linear and multiscale GNN training and convergence checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report σ² conditions and global minima per depth.
    Check {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gcn")]
        agg: AggregationKind,
        #[arg(long)]
        max_depth: usize,
        #[arg(long)]
        multiscale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network and write its trajectory CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store one parameter file per checkpoint here.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Start from these parameters instead of the configured init.
        #[arg(long)]
        init_params: Option<PathBuf>,
        /// Write the final parameters here.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Check a convergence bound along a stored trajectory.
    Verify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traj_snapshots: PathBuf,
        #[arg(long)]
        case: InequalityCase,
        /// Check the differential inequality at N snapshot states instead
        /// of the integrated bound.
        #[arg(long)]
        pointwise: Option<usize>,
        /// Overrides the aggregation recorded with the snapshots.
        #[arg(long)]
        agg: Option<AggregationKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss-reduction decomposition at given parameters.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "sq")]
        loss: LossKind,
        #[arg(long, default_value = "gcn")]
        agg: AggregationKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a multiscale network with its skip-free counterpart.
    CompareSkip {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "sq")]
        loss: LossKind,
        #[arg(long, default_value = "gcn")]
        agg: AggregationKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid and write the long-format CSV report.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_aggregation() -> AggregationKind {
    AggregationKind::Gcn
}

/// `train` configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    arch: Architecture,
    #[serde(default = "default_aggregation")]
    aggregation: AggregationKind,
    depth: usize,
    hidden: usize,
    #[serde(default)]
    init: InitScheme,
    #[serde(default)]
    seed: u64,
    train: TrainConfig,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    VerificationFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn labels_for(data: &Dataset, loss: LossKind) -> Result<Matrix, Error> {
    match loss {
        LossKind::Squared => data.y(),
        LossKind::CrossEntropy => data.y_one_hot(),
    }
}

fn run(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::Gen { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            write_dataset(&out, &gen_synthetic(&spec)?)?;
            Ok(Outcome::Ok)
        }
        Command::Check {
            data,
            agg,
            max_depth,
            multiscale,
            out,
        } => {
            let d = read_dataset(&data)?;
            let s = aggregation_matrix(&d.graph, agg);
            let report =
                condition_report(&d.features, &s, &d.train, &d.y()?, max_depth, multiscale)?;
            emit(out.as_deref(), &to_json_string(&report)?)?;
            Ok(Outcome::Ok)
        }
        Command::Train {
            data,
            config,
            out,
            snapshots,
            init_params: init_path,
            params_out,
        } => {
            let d = read_dataset(&data)?;
            let mut cfg: RunConfig = read_json(&config)?;
            if snapshots.is_some() {
                cfg.train.snapshot_params = true;
            }
            let y = labels_for(&d, cfg.train.loss)?;
            let s = aggregation_matrix(&d.graph, cfg.aggregation);
            let params = match init_path {
                Some(p) => read_params(&p)?,
                None => init_params(
                    cfg.arch,
                    cfg.depth,
                    d.features.rows(),
                    &vec![cfg.hidden; cfg.depth],
                    y.rows(),
                    cfg.init,
                    cfg.seed,
                )?,
            };
            let (final_params, traj) = train(&params, &d.features, &s, &d.train, &y, &cfg.train)?;
            if let RunStatus::Diverged { step } = traj.status {
                log::warn!("training diverged at step {step}");
            }
            std::fs::write(&out, trajectory_csv(&traj)).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            if let Some(dir) = snapshots {
                write_snapshots(&dir, &traj, Some(cfg.aggregation))?;
            }
            if let Some(p) = params_out {
                write_json(&p, &final_params)?;
            }
            Ok(Outcome::Ok)
        }
        Command::Verify {
            data,
            traj_snapshots,
            case,
            pointwise,
            agg,
            out,
        } => {
            let d = read_dataset(&data)?;
            let (traj, recorded_agg) = read_snapshots(&traj_snapshots)?;
            let agg = agg.or(recorded_agg).unwrap_or(AggregationKind::Gcn);
            let s = aggregation_matrix(&d.graph, agg);
            let theory = TheoryData::new(&d.features, &s, &d.train, &d.y()?, traj.depth)?;
            match pointwise {
                None => {
                    let rows = convergence_bound_trace(&traj, &theory, case)?;
                    emit(out.as_deref(), &bound_trace_csv(&rows))?;
                    Ok(if rows.iter().all(|r| r.satisfied) {
                        Outcome::Ok
                    } else {
                        Outcome::VerificationFailed
                    })
                }
                Some(count) => {
                    let cps = &traj.checkpoints;
                    let count = count.clamp(1, cps.len());
                    let picks: Vec<usize> = (0..count)
                        .map(|k| {
                            if count == 1 {
                                0
                            } else {
                                k * (cps.len() - 1) / (count - 1)
                            }
                        })
                        .collect();
                    let mut reports = Vec::with_capacity(picks.len());
                    for &k in &picks {
                        let params = cps[k].params.as_ref().expect("snapshots carry params");
                        reports.push(theory.check(params, case)?);
                    }
                    emit(out.as_deref(), &to_json_string(&reports)?)?;
                    Ok(if reports.iter().all(|r| r.satisfied) {
                        Outcome::Ok
                    } else {
                        Outcome::VerificationFailed
                    })
                }
            }
        }
        Command::Decompose {
            data,
            params,
            loss,
            agg,
            out,
        } => {
            let d = read_dataset(&data)?;
            let p = read_params(&params)?;
            let s = aggregation_matrix(&d.graph, agg);
            let y = labels_for(&d, loss)?;
            let yhat = p.forward(&d.features, &s, &d.train)?;
            let rg = gradients::loss_and_residual_grad(&yhat, &y, loss)?;
            let terms = loss_reduction_decomposition(&p, &d.features, &s, &d.train, &rg)?;
            emit(out.as_deref(), &to_json_string(&terms)?)?;
            Ok(Outcome::Ok)
        }
        Command::CompareSkip {
            data,
            params,
            loss,
            agg,
            out,
        } => {
            let d = read_dataset(&data)?;
            let p = read_params(&params)?;
            let s = aggregation_matrix(&d.graph, agg);
            let y = labels_for(&d, loss)?;
            let report = skip_acceleration_check(&p, &d.features, &s, &d.train, &y, loss)?;
            emit(out.as_deref(), &to_json_string(&report)?)?;
            Ok(if report.implication_holds() {
                Outcome::Ok
            } else {
                Outcome::VerificationFailed
            })
        }
        Command::Experiment { spec, out } => {
            let spec: ExperimentSpec = read_json(&spec)?;
            let report = run_experiment(&spec)?;
            emit(Some(&out), &report.to_csv())?;
            let mut summary = out.into_os_string();
            summary.push(".summary.json");
            write_json(Path::new(&summary), &report)?;
            Ok(Outcome::Ok)
        }
    }
}
