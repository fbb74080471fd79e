pub mod graph;
pub mod learn;
pub mod models;
pub mod oracle;
pub mod bench;
pub mod estimate;
pub mod metrics;
pub mod generator;
pub mod campaign;
pub mod synth;
pub mod evaluate;
