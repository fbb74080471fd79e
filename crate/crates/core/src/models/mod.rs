//! Execution-time models and the fitted platform description.

mod analytic;
mod platform;

use thiserror::Error;

use crate::graph::GraphError;
use crate::learn::LearnError;

pub use analytic::{
    bound_with_efficiency, fragmentation, fuse_adjust, mixed_time, refined_time, roofline_time, statistical_time,
    u_eff, Axis, Bound, FusedTerms, Peaks, Regime, Unrolling,
};
pub use platform::{
    fusion_features, load_platform_model, predict_fusion, save_platform_model, FusionDecision, FusionModel,
    FusionPair, HardwareConstants, Metadata, PlatformModel, DEFAULT_HARD_FUSION, FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("malformed model file: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(String),
}
