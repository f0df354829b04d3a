//! Synthetic graphs and labels, and the experiment families: skip vs. plain,
//! depth sweeps, signal vs. noise labels and condition scans.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::LossKind;
use crate::graph::{aggregation_matrix, AggregationKind, Graph, PowerCache, TrainIndex};
use crate::io::{fmt_float, read_dataset, Dataset, Targets};
use crate::linalg::Matrix;
use crate::model::{init_params, Architecture, GnnParams, InitScheme};
use crate::theory::{condition_report, ConditionReport};
use crate::trainer::{train, RunStatus, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphKind {
    Path,
    Cycle,
    Star,
    ErdosRenyi { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelMode {
    /// `Y = W*·X(S^depth) + N(0, noise_sigma²)`.
    Signal { depth: usize, noise_sigma: f64 },
    /// Classes drawn uniformly at random.
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Real-valued signal targets.
    Regression,
    /// Argmax class of the signal targets.
    #[default]
    OneHot,
}

fn default_train_fraction() -> f64 {
    0.1
}

fn default_aggregation() -> AggregationKind {
    AggregationKind::Gcn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub graph: GraphKind,
    pub n: usize,
    pub m_x: usize,
    pub m_y: usize,
    pub labels: LabelMode,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
    /// Aggregation used to build signal labels.
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationKind,
    #[serde(default)]
    pub targets: TargetKind,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m_x == 0 || self.m_y == 0 {
            return Err(Error::Config("n, m_x and m_y must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        if let GraphKind::ErdosRenyi { p } = self.graph {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "edge probability {p} outside [0, 1]"
                )));
            }
        }
        if let LabelMode::Signal { noise_sigma, .. } = self.labels {
            if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "noise sigma {noise_sigma} must be ≥ 0"
                )));
            }
        }
        Ok(())
    }
}

pub fn make_graph(kind: GraphKind, n: usize, rng: &mut impl Rng) -> Graph {
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        GraphKind::Cycle if n >= 3 => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        GraphKind::Cycle => (1..n).map(|i| (i - 1, i)).collect(),
        GraphKind::Star => (1..n).map(|i| (0, i)).collect(),
        GraphKind::ErdosRenyi { p } => {
            let mut e = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < p {
                        e.push((u, v));
                    }
                }
            }
            e
        }
    };
    Graph::new(n, edges).expect("generated edges are in range")
}

/// Deterministic synthetic dataset. Draw order: graph, features, label
/// model, label noise or classes, training split.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let graph = make_graph(spec.graph, spec.n, &mut rng);
    let n = spec.n;
    let x = Matrix::from_fn(spec.m_x, n, |_, _| StandardNormal.sample(&mut rng));

    let targets = match spec.labels {
        LabelMode::Signal { depth, noise_sigma } => {
            let w_star =
                Matrix::from_fn(spec.m_y, spec.m_x, |_, _| StandardNormal.sample(&mut rng));
            let s = aggregation_matrix(&graph, spec.aggregation);
            let mut cache = PowerCache::new(&x, &s)?;
            let mut y = w_star.matmul(cache.power(depth));
            if noise_sigma > 0.0 {
                let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
                for v in y.as_mut_slice() {
                    *v += noise.sample(&mut rng);
                }
            }
            match spec.targets {
                TargetKind::Regression => Targets::Regression(y),
                TargetKind::OneHot => Targets::Classes {
                    num_classes: spec.m_y,
                    labels: (0..n)
                        .map(|j| (0..spec.m_y).max_by(|&a, &b| y[(a, j)].total_cmp(&y[(b, j)])))
                        .collect(),
                },
            }
        }
        LabelMode::UniformNoise => Targets::Classes {
            num_classes: spec.m_y,
            labels: (0..n)
                .map(|_| Some(rng.random_range(0..spec.m_y)))
                .collect(),
        },
    };

    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    ids.truncate(n_train);
    let train = TrainIndex::from_unsorted(ids, n)?;
    let edge_lines = graph.num_edges();
    Ok(Dataset {
        graph,
        features: x,
        targets,
        train,
        edge_lines,
    })
}

/// Same graph, features and split with classes redrawn uniformly.
pub fn with_uniform_noise_labels(data: &Dataset, seed: u64) -> Dataset {
    let m_y = data.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..data.graph.num_nodes())
        .map(|_| Some(rng.random_range(0..m_y)))
        .collect();
    Dataset {
        targets: Targets::Classes {
            num_classes: m_y,
            labels,
        },
        ..data.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    SkipComparison,
    DepthSweep { depths: Vec<usize> },
    LabelComparison,
    ConditionScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }
}

fn default_aggregations() -> Vec<AggregationKind> {
    vec![AggregationKind::Gcn]
}

fn default_activations() -> Vec<Activation> {
    vec![Activation::Linear]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_depth() -> usize {
    2
}

fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub family: Family,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Dataset directory, used when `synthetic` is absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_aggregations")]
    pub aggregations: Vec<AggregationKind>,
    #[serde(default = "default_activations")]
    pub activations: Vec<Activation>,
    /// Depth for families other than the depth sweep; maximum depth of a
    /// condition scan.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Whether depth sweeps and label comparisons use skip connections.
    #[serde(default)]
    pub multiscale: bool,
    #[serde(default)]
    pub init: InitScheme,
    /// Parameter-initialization seeds; one grid cell per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for redrawn noise labels in label comparisons.
    #[serde(default)]
    pub noise_seed: u64,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.aggregations.is_empty() || self.activations.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        if let Family::DepthSweep { depths } = &self.family {
            if depths.is_empty() || depths.contains(&0) {
                return Err(Error::Config("depth sweep needs positive depths".into()));
            }
        }
        if self.synthetic.is_none() == self.dataset.is_none() {
            return Err(Error::Config(
                "give exactly one of synthetic or dataset".into(),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        self.train.validate()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match (&self.synthetic, &self.dataset) {
            (Some(spec), None) => gen_synthetic(spec),
            (None, Some(dir)) => read_dataset(dir),
            _ => Err(Error::Config(
                "give exactly one of synthetic or dataset".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub family: String,
    /// `standard` or `multiscale`.
    pub arch: String,
    pub aggregation: AggregationKind,
    pub activation: Activation,
    pub depth: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub losses: Vec<LossPoint>,
    pub initial_loss: f64,
    pub loss_at_final_step: f64,
}

impl CellResult {
    pub fn loss_drop(&self) -> f64 {
        self.initial_loss - self.loss_at_final_step
    }

    fn key(&self) -> (&str, &str, AggregationKind, Activation, usize, u64) {
        (
            &self.family,
            &self.arch,
            self.aggregation,
            self.activation,
            self.depth,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionScanEntry {
    pub aggregation: AggregationKind,
    pub report: ConditionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub conditions: Vec<ConditionScanEntry>,
}

impl ExperimentReport {
    /// Cells matching every given field.
    pub fn find(&self, family: &str, arch: &str, depth: Option<usize>) -> Vec<&CellResult> {
        self.cells
            .iter()
            .filter(|c| c.family == family && c.arch == arch && depth.is_none_or(|d| c.depth == d))
            .collect()
    }

    /// Long-format CSV: `family,arch,aggregation,activation,depth,seed,step,t,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,arch,aggregation,activation,depth,seed,step,t,loss\n");
        for c in &self.cells {
            for p in &c.losses {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    c.family,
                    c.arch,
                    c.aggregation,
                    c.activation.name(),
                    c.depth,
                    c.seed,
                    p.step,
                    fmt_float(p.t),
                    fmt_float(p.loss)
                )
                .expect("string write");
            }
        }
        out
    }
}

struct CellJob<'a> {
    family: &'static str,
    multiscale: bool,
    aggregation: AggregationKind,
    activation: Activation,
    depth: usize,
    seed: u64,
    data: &'a Dataset,
    /// Multiscale networks start from the plain network with zero skip heads.
    shared_init: bool,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let data = spec.load_data()?;

    if let Family::ConditionScan = spec.family {
        let y = data.y()?;
        let mut conditions = Vec::new();
        for &agg in &spec.aggregations {
            let s = aggregation_matrix(&data.graph, agg);
            let report = condition_report(&data.features, &s, &data.train, &y, spec.depth, true)?;
            conditions.push(ConditionScanEntry {
                aggregation: agg,
                report,
            });
        }
        return Ok(ExperimentReport {
            cells: Vec::new(),
            conditions,
        });
    }

    let noise_data = match spec.family {
        Family::LabelComparison => Some(with_uniform_noise_labels(&data, spec.noise_seed)),
        _ => None,
    };
    let mut jobs = Vec::new();
    for &aggregation in &spec.aggregations {
        for &activation in &spec.activations {
            for &seed in &spec.seeds {
                let job = |family, multiscale, depth, data, shared_init| CellJob {
                    family,
                    multiscale,
                    aggregation,
                    activation,
                    depth,
                    seed,
                    data,
                    shared_init,
                };
                match &spec.family {
                    Family::SkipComparison => {
                        jobs.push(job("skip_comparison", false, spec.depth, &data, true));
                        jobs.push(job("skip_comparison", true, spec.depth, &data, true));
                    }
                    Family::DepthSweep { depths } => {
                        for &d in depths {
                            jobs.push(job("depth_sweep", spec.multiscale, d, &data, false));
                        }
                    }
                    Family::LabelComparison => {
                        let noise = noise_data.as_ref().expect("built above");
                        jobs.push(job(
                            "label_signal",
                            spec.multiscale,
                            spec.depth,
                            &data,
                            false,
                        ));
                        jobs.push(job(
                            "label_noise",
                            spec.multiscale,
                            spec.depth,
                            noise,
                            false,
                        ));
                    }
                    Family::ConditionScan => unreachable!("handled above"),
                }
            }
        }
    }

    let mut cells = jobs
        .par_iter()
        .map(|job| run_cell(spec, job))
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(ExperimentReport {
        cells,
        conditions: Vec::new(),
    })
}

fn run_cell(spec: &ExperimentSpec, job: &CellJob<'_>) -> Result<CellResult> {
    let data = job.data;
    let s = aggregation_matrix(&data.graph, job.aggregation);
    let y = match spec.train.loss {
        LossKind::Squared => data.y()?,
        LossKind::CrossEntropy => data.y_one_hot()?,
    };
    let relu = job.activation == Activation::Relu;
    let hidden = vec![spec.hidden; job.depth];
    let m_x = data.features.rows();
    let params = if job.shared_init {
        let plain = init_params(
            Architecture::Linear.with_relu(relu),
            job.depth,
            m_x,
            &hidden,
            y.rows(),
            spec.init,
            job.seed,
        )?;
        if job.multiscale {
            zero_skip_heads(&plain)?
        } else {
            plain
        }
    } else {
        let arch = if job.multiscale {
            Architecture::Multiscale
        } else {
            Architecture::Linear
        };
        init_params(
            arch.with_relu(relu),
            job.depth,
            m_x,
            &hidden,
            y.rows(),
            spec.init,
            job.seed,
        )?
    };
    let mut cfg = spec.train.clone();
    cfg.snapshot_params = false;
    cfg.compute_decomposition = false;
    let (_, traj) = train(&params, &data.features, &s, &data.train, &y, &cfg)?;
    let losses: Vec<LossPoint> = traj
        .checkpoints
        .iter()
        .map(|c| LossPoint {
            step: c.step,
            t: c.t,
            loss: c.loss,
        })
        .collect();
    let initial_loss = losses.first().map_or(f64::NAN, |p| p.loss);
    let loss_at_final_step = losses.last().map_or(f64::NAN, |p| p.loss);
    Ok(CellResult {
        family: job.family.to_string(),
        arch: if job.multiscale {
            "multiscale"
        } else {
            "standard"
        }
        .to_string(),
        aggregation: job.aggregation,
        activation: job.activation,
        depth: job.depth,
        seed: job.seed,
        status: traj.status,
        losses,
        initial_loss,
        loss_at_final_step,
    })
}

/// Multiscale network with the plain network's `B` and top head, and zero
/// heads below the top.
pub fn zero_skip_heads(plain: &GnnParams) -> Result<GnnParams> {
    if plain.arch().is_multiscale() {
        return Err(Error::Argument(
            "expected a network without skip heads".into(),
        ));
    }
    let h = plain.depth();
    let mut w: Vec<Matrix> = (0..h)
        .map(|l| Matrix::zeros(plain.output_dim(), plain.dims()[l]))
        .collect();
    w.push(plain.w_mats()[0].clone());
    let arch = if plain.arch().is_linear() {
        Architecture::Multiscale
    } else {
        Architecture::MultiscaleRelu
    };
    GnnParams::new(arch, plain.b_mats().to_vec(), w)
}
