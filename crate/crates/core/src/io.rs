//! Plain-text dataset files, parameter and trajectory serialization, and
//! byte-stable report writers.
//!
//! A dataset directory holds:
//! - `edges.txt`: whitespace-separated node pairs, one per line, `#` comments;
//! - `features.csv`: comma-separated floats, row `i` is node `i`;
//! - `labels.csv`: `node_id,class_index` rows (optional header
//!   `node_id,class_index`);
//! - `mask.txt`: one training node id per line;
//! - `targets.csv` (optional): `node_id,v_1,…,v_m` real-valued targets that
//!   replace the one-hot class labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::gradients::LossKind;
use crate::graph::AggregationKind;
use crate::graph::{Graph, TrainIndex};
use crate::linalg::Matrix;
use crate::model::GnnParams;
use crate::theory::BoundRow;
use crate::trainer::{
    lambda_t_path, Checkpoint, Integrator, Optimizer, RunStatus, TrajectoryRecord,
};

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MASK_FILE: &str = "mask.txt";
pub const TARGETS_FILE: &str = "targets.csv";
const LABELS_HEADER: &str = "node_id,class_index";
const MANIFEST_FILE: &str = "manifest.json";

/// Fixed float format: 17 significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class per node (`None` for unlabeled nodes).
    Classes {
        num_classes: usize,
        labels: Vec<Option<usize>>,
    },
    /// Real-valued targets, `m_y × n`.
    Regression(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    /// `m_x × n`.
    pub features: Matrix,
    pub targets: Targets,
    pub train: TrainIndex,
    /// Non-comment lines of the edge file as read; equals the number of
    /// undirected edges for generated data.
    pub edge_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub nodes: usize,
    pub edge_lines: usize,
    pub undirected_edges: usize,
    pub features: usize,
    pub outputs: usize,
    pub train_nodes: usize,
}

impl Dataset {
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Regression(m) => m.rows(),
        }
    }

    /// Training targets `Y` (`m_y × n̄`): one-hot columns or regression
    /// values restricted to the mask.
    pub fn y(&self) -> Result<Matrix> {
        let idx = self.train.as_slice();
        match &self.targets {
            Targets::Classes {
                num_classes,
                labels,
            } => {
                let mut y = Matrix::zeros(*num_classes, idx.len());
                for (j, &node) in idx.iter().enumerate() {
                    let c = labels[node].ok_or_else(|| {
                        Error::Argument(format!("training node {node} has no label"))
                    })?;
                    y[(c, j)] = 1.0;
                }
                Ok(y)
            }
            Targets::Regression(m) => Ok(m.select_columns(idx)),
        }
    }

    /// One-hot training labels; regression targets are mapped to the
    /// argmax coordinate.
    pub fn y_one_hot(&self) -> Result<Matrix> {
        match &self.targets {
            Targets::Classes { .. } => self.y(),
            Targets::Regression(m) => {
                let idx = self.train.as_slice();
                let mut y = Matrix::zeros(m.rows(), idx.len());
                for (j, &node) in idx.iter().enumerate() {
                    let best = (0..m.rows())
                        .max_by(|&a, &b| m[(a, node)].total_cmp(&m[(b, node)]))
                        .expect("m_y ≥ 1");
                    y[(best, j)] = 1.0;
                }
                Ok(y)
            }
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            nodes: self.graph.num_nodes(),
            edge_lines: self.edge_lines,
            undirected_edges: self.graph.num_edges(),
            features: self.features.rows(),
            outputs: self.output_dim(),
            train_nodes: self.train.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub mask: PathBuf,
    pub targets: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn from_dir(dir: &Path) -> Self {
        let targets = dir.join(TARGETS_FILE);
        DatasetPaths {
            edges: dir.join(EDGES_FILE),
            features: dir.join(FEATURES_FILE),
            labels: dir.join(LABELS_FILE),
            mask: dir.join(MASK_FILE),
            targets: targets.exists().then_some(targets),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    parse_dataset(&DatasetPaths::from_dir(dir))
}

pub fn parse_dataset(paths: &DatasetPaths) -> Result<Dataset> {
    let features = parse_features(&read_text(&paths.features)?, &file_label(&paths.features))?;
    let n = features.cols();
    let (edges, edge_lines) = parse_edges(&read_text(&paths.edges)?, &file_label(&paths.edges), n)?;
    let graph = Graph::new(n, edges)?;
    let train = parse_mask(&read_text(&paths.mask)?, &file_label(&paths.mask), n)?;
    let targets = match &paths.targets {
        Some(t) => Targets::Regression(parse_targets(&read_text(t)?, &file_label(t), n)?),
        None => parse_labels(&read_text(&paths.labels)?, &file_label(&paths.labels), n)?,
    };
    if let Targets::Classes { labels, .. } = &targets {
        if let Some(&node) = train.as_slice().iter().find(|&&i| labels[i].is_none()) {
            return Err(ParseError::Malformed {
                file: file_label(&paths.mask),
                line: 0,
                message: format!("training node {node} has no label"),
            }
            .into());
        }
    }
    Ok(Dataset {
        graph,
        features,
        targets,
        train,
        edge_lines,
    })
}

/// Lines with their 1-based numbers, comments and blanks removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_id(token: &str, file: &str, line: usize) -> std::result::Result<usize, ParseError> {
    token
        .trim()
        .parse::<usize>()
        .map_err(|_| ParseError::NonNumeric {
            file: file.to_string(),
            line,
            token: token.trim().to_string(),
        })
}

fn parse_f64(token: &str, file: &str, line: usize) -> std::result::Result<f64, ParseError> {
    match token.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::NonNumeric {
            file: file.to_string(),
            line,
            token: token.trim().to_string(),
        }),
    }
}

/// Edge pairs and the number of edge lines read.
pub fn parse_edges(
    text: &str,
    file: &str,
    n: usize,
) -> std::result::Result<(Vec<(usize, usize)>, usize), ParseError> {
    let mut edges = Vec::new();
    for (line, content) in content_lines(text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(ParseError::Malformed {
                file: file.to_string(),
                line,
                message: format!("expected two node ids, found {}", tokens.len()),
            });
        }
        let mut pair = [0usize; 2];
        for (slot, tok) in pair.iter_mut().zip(&tokens) {
            let id = parse_id(tok, file, line)?;
            if id >= n {
                return Err(ParseError::NodeOutOfRange {
                    file: file.to_string(),
                    line,
                    id,
                    n,
                });
            }
            *slot = id;
        }
        edges.push((pair[0], pair[1]));
    }
    let count = edges.len();
    Ok((edges, count))
}

/// Feature rows per node, returned transposed as `m_x × n`.
pub fn parse_features(text: &str, file: &str) -> std::result::Result<Matrix, ParseError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, content) in content_lines(text) {
        let row = content
            .split(',')
            .map(|t| parse_f64(t, file, line))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(ParseError::Malformed {
                    file: file.to_string(),
                    line,
                    message: format!("{} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ParseError::Malformed {
            file: file.to_string(),
            line: 0,
            message: "no feature rows".into(),
        });
    }
    let m_x = rows[0].len();
    Ok(Matrix::from_fn(m_x, rows.len(), |i, j| rows[j][i]))
}

pub fn parse_labels(text: &str, file: &str, n: usize) -> std::result::Result<Targets, ParseError> {
    let mut labels = vec![None; n];
    let mut max_class = None;
    for (line, content) in content_lines(text) {
        if line == 1 && content.replace(' ', "") == LABELS_HEADER {
            continue;
        }
        let (a, b) = content
            .split_once(',')
            .ok_or_else(|| ParseError::Malformed {
                file: file.to_string(),
                line,
                message: "expected node_id,class_index".into(),
            })?;
        let id = parse_id(a, file, line)?;
        let class = parse_id(b, file, line)?;
        if id >= n {
            return Err(ParseError::UnknownNode {
                file: file.to_string(),
                line,
                id,
                n,
            });
        }
        if labels[id].is_some_and(|c| c != class) {
            return Err(ParseError::Malformed {
                file: file.to_string(),
                line,
                message: format!("conflicting labels for node {id}"),
            });
        }
        labels[id] = Some(class);
        max_class = max_class.max(Some(class));
    }
    let num_classes = max_class.map_or(0, |c| c + 1);
    if num_classes == 0 {
        return Err(ParseError::Malformed {
            file: file.to_string(),
            line: 0,
            message: "no labels".into(),
        });
    }
    Ok(Targets::Classes {
        num_classes,
        labels,
    })
}

pub fn parse_targets(text: &str, file: &str, n: usize) -> std::result::Result<Matrix, ParseError> {
    let mut values: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut width = None;
    for (line, content) in content_lines(text) {
        let mut parts = content.split(',');
        let id = parse_id(parts.next().unwrap_or(""), file, line)?;
        if id >= n {
            return Err(ParseError::UnknownNode {
                file: file.to_string(),
                line,
                id,
                n,
            });
        }
        let row = parts
            .map(|t| parse_f64(t, file, line))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if row.is_empty() || width.is_some_and(|w| w != row.len()) {
            return Err(ParseError::Malformed {
                file: file.to_string(),
                line,
                message: "inconsistent target width".into(),
            });
        }
        width = Some(row.len());
        values.insert(id, row);
    }
    let m_y = width.ok_or_else(|| ParseError::Malformed {
        file: file.to_string(),
        line: 0,
        message: "no targets".into(),
    })?;
    let mut y = Matrix::zeros(m_y, n);
    for (id, row) in values {
        for (i, v) in row.into_iter().enumerate() {
            y[(i, id)] = v;
        }
    }
    Ok(y)
}

pub fn parse_mask(text: &str, file: &str, n: usize) -> std::result::Result<TrainIndex, ParseError> {
    let mut ids = Vec::new();
    for (line, content) in content_lines(text) {
        let id = parse_id(content, file, line)?;
        if id >= n {
            return Err(ParseError::NodeOutOfRange {
                file: file.to_string(),
                line,
                id,
                n,
            });
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(ParseError::EmptyMask {
            file: file.to_string(),
        });
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(TrainIndex::new(ids, n).expect("validated mask"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for (u, v) in data.graph.edges() {
        writeln!(edges, "{u} {v}").expect("string write");
    }
    write_text(&dir.join(EDGES_FILE), &edges)?;

    let x = &data.features;
    let mut feats = String::new();
    for node in 0..x.cols() {
        let row: Vec<String> = (0..x.rows()).map(|i| fmt_float(x[(i, node)])).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write_text(&dir.join(FEATURES_FILE), &feats)?;

    let mut labels = format!("{LABELS_HEADER}\n");
    match &data.targets {
        Targets::Classes { labels: l, .. } => {
            for (node, c) in l.iter().enumerate() {
                if let Some(c) = c {
                    writeln!(labels, "{node},{c}").expect("string write");
                }
            }
            let stale = dir.join(TARGETS_FILE);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        Targets::Regression(m) => {
            // Class file carries the argmax so classification tools still work.
            let mut targets = String::new();
            for node in 0..m.cols() {
                let best = (0..m.rows())
                    .max_by(|&a, &b| m[(a, node)].total_cmp(&m[(b, node)]))
                    .expect("m_y ≥ 1");
                writeln!(labels, "{node},{best}").expect("string write");
                let row: Vec<String> = (0..m.rows()).map(|i| fmt_float(m[(i, node)])).collect();
                writeln!(targets, "{node},{}", row.join(",")).expect("string write");
            }
            write_text(&dir.join(TARGETS_FILE), &targets)?;
        }
    }
    write_text(&dir.join(LABELS_FILE), &labels)?;

    let mut mask = String::new();
    for i in data.train.as_slice() {
        writeln!(mask, "{i}").expect("string write");
    }
    write_text(&dir.join(MASK_FILE), &mask)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

pub fn read_params(path: &Path) -> Result<GnnParams> {
    read_json(path)
}

pub fn trajectory_csv(traj: &TrajectoryRecord) -> String {
    let mut out = String::from("step,t,loss");
    for l in 0..=traj.depth {
        write!(out, ",lambda_l{l}").expect("string write");
    }
    out.push_str(",first_terms_sum,second_terms_sum\n");
    for cp in &traj.checkpoints {
        write!(
            out,
            "{},{},{}",
            cp.step,
            fmt_float(cp.t),
            fmt_float(cp.loss)
        )
        .expect("string write");
        for v in &cp.lambdas {
            write!(out, ",{}", fmt_float(*v)).expect("string write");
        }
        match &cp.decomposition {
            Some(d) => write!(
                out,
                ",{},{}",
                fmt_float(d.sum_first()),
                fmt_float(d.sum_second())
            ),
            None => write!(out, ",,"),
        }
        .expect("string write");
        out.push('\n');
    }
    out
}

pub fn bound_trace_csv(rows: &[BoundRow]) -> String {
    let mut out = String::from("step,t,loss,lhs,rhs,satisfied\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            fmt_float(r.t),
            fmt_float(r.loss),
            fmt_float(r.lhs),
            fmt_float(r.rhs),
            r.satisfied
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotEntry {
    step: usize,
    t: f64,
    loss: f64,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotManifest {
    loss: LossKind,
    lr: f64,
    optimizer: Optimizer,
    integrator: Integrator,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    aggregation: Option<AggregationKind>,
    status: RunStatus,
    checkpoints: Vec<SnapshotEntry>,
}

/// One parameter file per checkpoint plus `manifest.json`.
pub fn write_snapshots(
    dir: &Path,
    traj: &TrajectoryRecord,
    aggregation: Option<AggregationKind>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(traj.checkpoints.len());
    for cp in &traj.checkpoints {
        let params = cp.params.as_ref().ok_or_else(|| {
            Error::Trajectory(format!(
                "checkpoint at step {} has no parameter snapshot",
                cp.step
            ))
        })?;
        let file = format!("step_{:08}.json", cp.step);
        write_json(&dir.join(&file), params)?;
        entries.push(SnapshotEntry {
            step: cp.step,
            t: cp.t,
            loss: cp.loss,
            file,
        });
    }
    let manifest = SnapshotManifest {
        loss: traj.loss,
        lr: traj.lr,
        optimizer: traj.optimizer,
        integrator: traj.integrator,
        aggregation,
        status: traj.status.clone(),
        checkpoints: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Rebuilds a trajectory from a snapshot directory. Per-layer λ values are
/// recomputed from the stored parameters.
pub fn read_snapshots(dir: &Path) -> Result<(TrajectoryRecord, Option<AggregationKind>)> {
    let manifest: SnapshotManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut checkpoints = Vec::with_capacity(manifest.checkpoints.len());
    let mut depth = None;
    for e in &manifest.checkpoints {
        let params = read_params(&dir.join(&e.file))?;
        if depth.is_some_and(|d| d != params.depth()) {
            return Err(Error::Trajectory("snapshots disagree on depth".into()));
        }
        depth = Some(params.depth());
        checkpoints.push(Checkpoint {
            step: e.step,
            t: e.t,
            loss: e.loss,
            lambdas: crate::theory::layer_lambdas(&params),
            decomposition: None,
            params: Some(params),
        });
    }
    if checkpoints.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::Trajectory(
            "snapshot steps are not increasing".into(),
        ));
    }
    let traj = TrajectoryRecord {
        loss: manifest.loss,
        lr: manifest.lr,
        optimizer: manifest.optimizer,
        integrator: manifest.integrator,
        depth: depth.ok_or_else(|| Error::Trajectory("no snapshots in manifest".into()))?,
        status: manifest.status,
        checkpoints,
    };
    // Validates the recorded λ values form a proper path.
    lambda_t_path(&traj, traj.depth)?;
    Ok((traj, manifest.aggregation))
}
