//! Statistical learners and numerical fitters.

mod forest;
mod tree;
mod unrolling;

use thiserror::Error;

pub use forest::{ForestHyper, ForestModel, EFFICIENCY_FLOOR};
pub use tree::{Dataset, Node, NodeKind, Task, TreeHyper, TreeModel};
pub use unrolling::{
    efficiency_mse, fit_unrolling, TimedLayer, UnrollingFit, UnrollingOptions, DEFAULT_S_CANDIDATES,
    MAX_AXES, MIN_DISTINCT_VALUES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("no training data")]
    EmptyData,
    #[error("insufficient data: {rows} rows, at least {needed} needed")]
    InsufficientData { rows: usize, needed: usize },
    #[error("insufficient sweep coverage on axis `{axis}`: {distinct} distinct values, {needed} needed")]
    InsufficientCoverage {
        axis: String,
        distinct: usize,
        needed: usize,
    },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schema error: {0}")]
    Schema(String),
}

/// Fits a single CART tree.
pub fn fit_tree(data: Dataset<'_>, hyper: TreeHyper, task: Task) -> Result<TreeModel, LearnError> {
    TreeModel::fit(data, hyper, task)
}

/// Fits a bagged regression forest.
pub fn fit_forest(data: Dataset<'_>, hyper: ForestHyper) -> Result<ForestModel, LearnError> {
    ForestModel::fit(data, hyper)
}
