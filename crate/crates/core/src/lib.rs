//! Linear and multiscale graph neural networks with closed-form gradients,
//! gradient-flow training and numerical checks of the convergence theory.

pub mod error;
pub mod gradients;
pub mod graph;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod theory;
pub mod trainer;

pub use error::{Error, ParseError, Result};
pub use gradients::{GradientSet, LossKind, ResidualGrad};
pub use graph::{AggregationKind, Graph, GraphFeatures, TrainIndex};
pub use linalg::Matrix;
pub use model::{Architecture, GnnParams, InitScheme};
pub use trainer::{TrainConfig, TrajectoryRecord};
