use std::io;
use std::path::{Path, PathBuf};

use stacked_latency::bench::BenchError;
use stacked_latency::campaign::CampaignError;
use stacked_latency::estimate::EstimateError;
use stacked_latency::evaluate::EvalError;
use stacked_latency::generator::FitError;
use stacked_latency::graph::GraphError;
use stacked_latency::learn::LearnError;
use stacked_latency::models::ModelError;
use stacked_latency::oracle::DeviceError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Learn(LearnError),
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InsufficientData(m) => CliError::InsufficientData(m),
            FitError::Learn(LearnError::EmptyData) => CliError::InsufficientData("no training data".into()),
            FitError::Learn(LearnError::InsufficientData { rows, needed }) => {
                CliError::InsufficientData(format!("{rows} rows, at least {needed} needed"))
            }
            FitError::Learn(e) => CliError::Learn(e),
            FitError::Model(e) => CliError::Model(e),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::InsufficientData(_) => "insufficient-data",
            CliError::Input(_) | CliError::Graph(_) | CliError::Bench(BenchError::Table(_)) => "input",
            CliError::Model(ModelError::VersionMismatch { .. } | ModelError::Schema(_)) => "schema",
            CliError::Model(_) | CliError::Learn(_) => "model",
            CliError::Device(_) | CliError::Campaign(_) | CliError::Bench(_) => "device",
            CliError::Estimate(_) => "estimate",
            CliError::Eval(_) => "evaluate",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "usage" => 2,
            "io" => 3,
            "input" | "schema" => 4,
            "insufficient-data" => 5,
            "device" => 6,
            _ => 1,
        }
    }
}
