//! Side-by-side evaluation of the model families against a device.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{apply_mapping, estimate_network, EstimateError, Family};
use crate::graph::{LayerKind, NetworkGraph};
use crate::metrics::{accuracy, f1, mape_time_weighted, mcc, Accuracy, Confusion, MetricError, Pair, Score};
use crate::models::{FusionPair, PlatformModel};
use crate::oracle::{Device, DeviceError, FusedFlag};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no networks to evaluate")]
    Empty,
    #[error("network `{network}`: {source}")]
    Estimate {
        network: String,
        #[source]
        source: EstimateError,
    },
    #[error("network `{network}`: {source}")]
    Device {
        network: String,
        #[source]
        source: DeviceError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEval {
    pub name: String,
    pub measured_sec: f64,
    pub estimated_sec: BTreeMap<Family, f64>,
    pub fallback_count: usize,
}

/// A kernel that the device and the mapping model agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub network: String,
    pub name: String,
    pub kind: LayerKind,
    pub measured_sec: f64,
    pub estimated_sec: BTreeMap<Family, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAggregate {
    pub family: Family,
    pub network: Accuracy,
    pub layer: Option<Accuracy>,
    /// Layer MAPE weighted by measured time.
    pub layer_mape_weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEval {
    pub confusion: Confusion,
    pub f1: Score,
    pub mcc: Score,
}

impl FusionEval {
    pub fn from_confusion(confusion: Confusion) -> Self {
        FusionEval {
            confusion,
            f1: f1(&confusion),
            mcc: mcc(&confusion),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub device: String,
    pub networks: Vec<NetworkEval>,
    pub layers: Vec<LayerEval>,
    /// Kernels whose fused layer set differed between device and model.
    pub unmatched_kernels: usize,
    pub aggregates: Vec<FamilyAggregate>,
    /// Learned fusion decisions against the device, when any were made.
    pub fusion: Option<FusionEval>,
}

struct NetworkOutcome {
    network: NetworkEval,
    layers: Vec<LayerEval>,
    unmatched: usize,
    confusion: Confusion,
}

fn evaluate_one(
    name: &str,
    graph: &NetworkGraph,
    device: &dyn Device,
    model: &PlatformModel,
    families: &[Family],
    n_iter: u32,
    seed: u64,
) -> Result<NetworkOutcome, EvalError> {
    let est_err = |source| EvalError::Estimate {
        network: name.to_string(),
        source,
    };
    let measured = device.profile(graph, n_iter, seed).map_err(|source| EvalError::Device {
        network: name.to_string(),
        source,
    })?;
    let reports = families
        .iter()
        .map(|&f| estimate_network(graph, model, f).map(|r| (f, r)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(est_err)?;
    let mapping = apply_mapping(graph, model).map_err(est_err)?;

    // kernel membership on both sides, keyed by anchor name
    let predicted: BTreeMap<&str, BTreeSet<&str>> = mapping
        .units
        .iter()
        .map(|u| {
            let anchor = graph.layer(u.anchor_index).name.as_str();
            let members = u.followers.iter().map(|&i| graph.layer(i).name.as_str()).collect();
            (anchor, members)
        })
        .collect();
    let mut layers = Vec::new();
    let mut unmatched = 0;
    let mut confusion = Confusion::default();
    for m in &measured {
        let absorbed: BTreeSet<&str> = m
            .fused_flags
            .iter()
            .filter(|(_, f)| **f == FusedFlag::Fused)
            .map(|(n, _)| n.as_str())
            .collect();
        let Some(pred) = predicted.get(m.name.as_str()) else {
            unmatched += 1;
            continue;
        };
        if let Some(anchor) = graph.get(&m.name) {
            for (follower, flag) in &m.fused_flags {
                let Some(fl) = graph.get(follower) else { continue };
                let pair = FusionPair {
                    anchor: anchor.kind,
                    follower: fl.kind,
                };
                if *flag == FusedFlag::PossiblyFused || model.hard_fusion.contains(&pair) {
                    continue;
                }
                let truth = [*flag == FusedFlag::Fused];
                let guess = [pred.contains(follower.as_str())];
                let c = Confusion::from_labels(&truth, &guess);
                confusion.tp += c.tp;
                confusion.fp += c.fp;
                confusion.fn_ += c.fn_;
                confusion.tn += c.tn;
            }
        }
        if *pred != absorbed {
            unmatched += 1;
            continue;
        }
        let estimated_sec = reports
            .iter()
            .filter_map(|(f, r)| r.layers.iter().find(|l| l.name == m.name).map(|l| (*f, l.t_hat_sec)))
            .collect();
        layers.push(LayerEval {
            network: name.to_string(),
            name: m.name.clone(),
            kind: m.kind,
            measured_sec: m.time_sec,
            estimated_sec,
        });
    }
    let network = NetworkEval {
        name: name.to_string(),
        measured_sec: measured.iter().map(|m| m.time_sec).sum(),
        estimated_sec: reports.iter().map(|(f, r)| (*f, r.total_sec)).collect(),
        fallback_count: reports.first().map_or(0, |(_, r)| r.fallback_count),
    };
    Ok(NetworkOutcome {
        network,
        layers,
        unmatched,
        confusion,
    })
}

/// Profiles every network on the device and estimates it with each family.
/// Network `i` is profiled with seed `seed + i`.
pub fn evaluate(
    networks: &[(String, NetworkGraph)],
    device: &dyn Device,
    model: &PlatformModel,
    families: &[Family],
    n_iter: u32,
    seed: u64,
) -> Result<EvalResult, EvalError> {
    if networks.is_empty() {
        return Err(EvalError::Empty);
    }
    let outcomes = networks
        .par_iter()
        .enumerate()
        .map(|(i, (name, g))| evaluate_one(name, g, device, model, families, n_iter, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut result = EvalResult {
        device: device.name().to_string(),
        networks: Vec::new(),
        layers: Vec::new(),
        unmatched_kernels: 0,
        aggregates: Vec::new(),
        fusion: None,
    };
    let mut confusion = Confusion::default();
    for o in outcomes {
        result.networks.push(o.network);
        result.layers.extend(o.layers);
        result.unmatched_kernels += o.unmatched;
        confusion.tp += o.confusion.tp;
        confusion.fp += o.confusion.fp;
        confusion.fn_ += o.confusion.fn_;
        confusion.tn += o.confusion.tn;
    }
    for &family in families {
        let net: Vec<Pair> = result
            .networks
            .iter()
            .map(|n| (n.measured_sec, n.estimated_sec[&family]))
            .collect();
        let lay: Vec<Pair> = result
            .layers
            .iter()
            .filter_map(|l| l.estimated_sec.get(&family).map(|e| (l.measured_sec, *e)))
            .collect();
        result.aggregates.push(FamilyAggregate {
            family,
            network: accuracy(&net)?,
            layer: accuracy(&lay).ok(),
            layer_mape_weighted: mape_time_weighted(&lay).ok(),
        });
    }
    if confusion.total() > 0 {
        result.fusion = Some(FusionEval::from_confusion(confusion));
    }
    Ok(result)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl EvalResult {
    pub fn aggregate(&self, family: Family) -> Option<&FamilyAggregate> {
        self.aggregates.iter().find(|a| a.family == family)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation results serialize")
    }

    /// One row per network and family, then the aggregate block.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<12} {:>12} {:>12} {:>9}",
            "network", "family", "measured_ms", "estimated_ms", "error_%"
        );
        for n in &self.networks {
            for (family, e) in &n.estimated_sec {
                let _ = writeln!(
                    s,
                    "{:<24} {:<12} {:>12.4} {:>12.4} {:>9.2}",
                    n.name,
                    family.as_str(),
                    1e3 * n.measured_sec,
                    1e3 * e,
                    100.0 * (e - n.measured_sec) / n.measured_sec
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>10} {:>8} {:>8} {:>8} | {:>6} {:>8} {:>8} {:>10}",
            "family", "nets", "mae_ms", "mape_%", "rmspe_%", "rho", "layers", "mape_%", "rmspe_%", "wmape_%"
        );
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>10.4} {:>8.2} {:>8.2} {:>8} | {:>6} {:>8} {:>8} {:>10}",
                a.family.as_str(),
                a.network.n,
                a.network.mae_ms,
                a.network.mape,
                a.network.rmspe,
                fmt_opt(a.network.spearman, 4),
                a.layer.map_or(0, |l| l.n),
                fmt_opt(a.layer.map(|l| l.mape), 2),
                fmt_opt(a.layer.map(|l| l.rmspe), 2),
                fmt_opt(a.layer_mape_weighted, 2),
            );
        }
        if let Some(f) = &self.fusion {
            let c = f.confusion;
            let _ = writeln!(
                s,
                "fusion: tp {} fp {} fn {} tn {}  f1 {:.4}  mcc {:.4}{}",
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                f.f1.value,
                f.mcc.value,
                if f.mcc.degenerate { " (degenerate)" } else { "" }
            );
        }
        if self.unmatched_kernels > 0 {
            let _ = writeln!(s, "kernels with differing fusion: {}", self.unmatched_kernels);
        }
        s
    }

    /// Plot data: one row per network and family, then one per layer and
    /// family.
    pub fn write_plot_csv<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        writeln!(out, "level,network,layer,kind,family,measured_ms,estimated_ms")?;
        for n in &self.networks {
            for (family, e) in &n.estimated_sec {
                writeln!(
                    out,
                    "network,{},,,{},{},{}",
                    n.name,
                    family.as_str(),
                    1e3 * n.measured_sec,
                    1e3 * e
                )?;
            }
        }
        for l in &self.layers {
            for (family, e) in &l.estimated_sec {
                writeln!(
                    out,
                    "layer,{},{},{},{},{},{}",
                    l.network,
                    l.name,
                    l.kind,
                    family.as_str(),
                    1e3 * l.measured_sec,
                    1e3 * e
                )?;
            }
        }
        Ok(())
    }
}
