//! Whole-network estimation: fusion reconstruction, per-layer estimates and
//! the summed total.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{layer_features, op_count, GraphDocument, GraphError, LayerKind, LayerSpec, NetworkGraph, PoolKind};
use crate::models::{bound_with_efficiency, fuse_adjust, FusedTerms, ModelError, Peaks, PlatformModel, Regime};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Roofline,
    Refined,
    Statistical,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Roofline, Family::Refined, Family::Statistical, Family::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Roofline => "roofline",
            Family::Refined => "refined",
            Family::Statistical => "statistical",
            Family::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown model family `{s}` (roofline|refined|statistical|mixed)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelUsed {
    Roofline,
    Refined,
    Statistical,
    Mixed,
    FallbackRoofline,
}

impl ModelUsed {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelUsed::Roofline => "roofline",
            ModelUsed::Refined => "refined",
            ModelUsed::Statistical => "statistical",
            ModelUsed::Mixed => "mixed",
            ModelUsed::FallbackRoofline => "fallback-roofline",
        }
    }
}

impl fmt::Display for ModelUsed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A post-fusion kernel: an anchor and the followers it absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecUnit {
    pub anchor_index: usize,
    pub followers: Vec<usize>,
    pub terms: FusedTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub units: Vec<ExecUnit>,
    /// Data inputs plus one layer per unit, edges remapped onto anchors.
    pub graph: NetworkGraph,
}

/// Greedy left-to-right fusion in topological order. A follower is absorbed
/// only over a single-link edge and when the hard rules or the pair's
/// classifier say so.
pub fn apply_mapping(graph: &NetworkGraph, model: &PlatformModel) -> Result<Mapping, EstimateError> {
    let bw = model.constants.byte_width;
    let p_peak = model.constants.peaks.p_peak;
    let mut owner: Vec<Option<usize>> = vec![None; graph.len()];
    let mut units = Vec::new();
    for &i in graph.topo_order() {
        let layer = graph.layer(i);
        if owner[i].is_some() || layer.kind == LayerKind::DataInput {
            continue;
        }
        let mut terms = FusedTerms::start(layer, bw)?;
        let mut followers = Vec::new();
        let mut tail = i;
        loop {
            let next = graph.consumers(tail);
            if next.len() != 1 || !graph.is_single_link(tail, next[0]) {
                break;
            }
            let j = next[0];
            let follower = graph.layer(j);
            if follower.kind == LayerKind::DataInput || owner[j].is_some() {
                break;
            }
            if PoolKind::from_layer_kind(follower.kind).is_some()
                && (!terms.anchor.kind.accepts_fused_pool() || terms.anchor.pool.is_some())
            {
                break;
            }
            let decision = model.fusion_decision(
                terms.anchor.kind,
                follower.kind,
                &layer_features(&terms.anchor),
                &layer_features(follower),
            );
            if !decision.fuses() {
                break;
            }
            match fuse_adjust(&terms, follower, bw, p_peak) {
                Ok(t) => terms = t,
                Err(ModelError::IncompatibleShapes(_)) => break,
                Err(e) => return Err(e.into()),
            }
            owner[j] = Some(i);
            followers.push(j);
            tail = j;
        }
        owner[i] = Some(i);
        units.push(ExecUnit {
            anchor_index: i,
            followers,
            terms,
        });
    }

    let by_anchor: BTreeMap<usize, &ExecUnit> = units.iter().map(|u| (u.anchor_index, u)).collect();
    let mut layers: Vec<LayerSpec> = Vec::new();
    for (i, l) in graph.layers().iter().enumerate() {
        if l.kind == LayerKind::DataInput {
            layers.push(l.clone());
        } else if let Some(u) = by_anchor.get(&i) {
            layers.push(u.terms.anchor.clone());
        }
    }
    let rep = |i: usize| owner[i].unwrap_or(i);
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for (a, b) in graph.edges() {
        let ia = rep(graph.index_of(a).expect("validated edge"));
        let ib = rep(graph.index_of(b).expect("validated edge"));
        if ia != ib && seen.insert((ia, ib)) {
            edges.push((graph.layer(ia).name.clone(), graph.layer(ib).name.clone()));
        }
    }
    let fused = NetworkGraph::new(layers, edges)?;
    Ok(Mapping { units, graph: fused })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub name: String,
    pub kind: LayerKind,
    pub model_used: ModelUsed,
    pub t_hat_sec: f64,
    pub u_eff: f64,
    pub u_stat: f64,
    /// Effective performance of the kernel, ops/sec.
    pub p_eff: f64,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fused: Vec<String>,
}

/// Estimates one post-fusion kernel, degrading to simpler families when the
/// platform model lacks the needed component.
pub fn estimate_layer(terms: &FusedTerms, model: &PlatformModel, family: Family) -> Result<LayerEstimate, EstimateError> {
    let c = &model.constants;
    let anchor = &terms.anchor;
    let kind = anchor.kind;
    let x = layer_features(anchor);
    let unrolling = c.unrolling.as_ref().filter(|_| c.is_unrolled(kind));
    let forest = model.u_stat_models.get(&kind);

    let want_u = matches!(family, Family::Refined | Family::Mixed);
    let want_s = matches!(family, Family::Statistical | Family::Mixed);
    let u_eff = match (want_u, unrolling) {
        (true, Some(u)) => Some(u.efficiency(&x)),
        _ => None,
    };
    let u_stat = match (want_s, forest) {
        (true, Some(f)) => Some(f.predict_efficiency(&x.to_array())),
        _ => None,
    };
    let covered = c.kind_peaks.contains_key(&kind) || c.is_unrolled(kind) || forest.is_some();
    let (model_used, peaks): (ModelUsed, Peaks) = match (u_eff, u_stat) {
        (Some(_), Some(_)) => (ModelUsed::Mixed, c.peaks),
        (Some(_), None) => (ModelUsed::Refined, c.peaks),
        (None, Some(_)) => (ModelUsed::Statistical, c.peaks),
        (None, None) if covered => (ModelUsed::Roofline, c.peaks_for(kind)),
        (None, None) => (ModelUsed::FallbackRoofline, c.peaks),
    };
    let efficiency = u_eff.unwrap_or(1.0) * u_stat.unwrap_or(1.0);
    let anchor_ops = op_count(anchor) as f64;
    let mut bound = bound_with_efficiency(anchor_ops, terms.bytes as f64, efficiency, &peaks)?;
    bound.compute_sec += terms.follower_compute_sec;
    let t_hat = bound.time();
    Ok(LayerEstimate {
        name: anchor.name.clone(),
        kind,
        model_used,
        t_hat_sec: t_hat,
        u_eff: u_eff.unwrap_or(1.0),
        u_stat: u_stat.unwrap_or(1.0),
        p_eff: terms.ops as f64 / t_hat,
        regime: bound.regime(),
        fused: terms.followers.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub family: Family,
    pub total_sec: f64,
    pub fallback_count: usize,
    pub layers: Vec<LayerEstimate>,
    pub execution_graph: GraphDocument,
}

impl EstimationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable per-layer table with a total line.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:<16} {:<18} {:>12} {:>7} {:>7} {:>10} {:<15}\n",
            "layer", "kind", "model", "t_hat [ms]", "u_eff", "u_stat", "GOP/s", "regime"
        );
        for l in &self.layers {
            out.push_str(&format!(
                "{:<24} {:<16} {:<18} {:>12.6} {:>7.4} {:>7.4} {:>10.2} {:<15}\n",
                l.name,
                l.kind.as_str(),
                l.model_used.as_str(),
                l.t_hat_sec * 1e3,
                l.u_eff,
                l.u_stat,
                l.p_eff / 1e9,
                l.regime.to_string()
            ));
        }
        out.push_str(&format!(
            "total ({}): {:.6} ms over {} layers, {} fallback\n",
            self.family,
            self.total_sec * 1e3,
            self.layers.len(),
            self.fallback_count
        ));
        out
    }
}

/// Fuses, estimates every kernel and sums. Graph parallelism is ignored.
pub fn estimate_network(graph: &NetworkGraph, model: &PlatformModel, family: Family) -> Result<EstimationReport, EstimateError> {
    let mapping = apply_mapping(graph, model)?;
    let layers = mapping
        .units
        .par_iter()
        .map(|u| estimate_layer(&u.terms, model, family))
        .collect::<Result<Vec<_>, _>>()?;
    let total_sec = layers.iter().map(|l| l.t_hat_sec).sum();
    let fallback_count = layers
        .iter()
        .filter(|l| l.model_used == ModelUsed::FallbackRoofline)
        .count();
    Ok(EstimationReport {
        family,
        total_sec,
        fallback_count,
        layers,
        execution_graph: mapping.graph.to_document(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::{fit_forest, Dataset, ForestHyper};
    use crate::models::{Axis, HardwareConstants, Unrolling};

    fn chain(layers: Vec<LayerSpec>) -> NetworkGraph {
        let edges = layers
            .windows(2)
            .map(|w| (w[0].name.clone(), w[1].name.clone()))
            .collect();
        NetworkGraph::new(layers, edges).unwrap()
    }

    fn model() -> PlatformModel {
        let mut c = HardwareConstants::new(Peaks { p_peak: 1e12, b_peak: 1e10 }, 1);
        c.unrolling = Some(Unrolling::new(vec![Axis::C, Axis::F], vec![16, 12], vec![0.0, 0.0]).unwrap());
        c.kind_peaks.insert(LayerKind::MaxPool, Peaks { p_peak: 5e11, b_peak: 8e9 });
        let mut m = PlatformModel::new(c);
        // always fuse pools into convs, for these tests
        m.hard_fusion.push(crate::models::FusionPair {
            anchor: LayerKind::Conv2D,
            follower: LayerKind::MaxPool,
        });
        m
    }

    fn with_forest(mut m: PlatformModel, value: f64) -> PlatformModel {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64; 11]).collect();
        let y = vec![value; 8];
        let f = fit_forest(Dataset::new(&x, &y).unwrap(), ForestHyper { n_trees: 3, ..Default::default() }).unwrap();
        m.u_stat_models.insert(LayerKind::Conv2D, f);
        m
    }

    fn block() -> NetworkGraph {
        chain(vec![
            LayerSpec::input("in", 16, 16, 20),
            LayerSpec::conv2d("conv", 16, 16, 20, 30, 3, 1),
            LayerSpec::elementwise("bn", LayerKind::BatchNorm, 16, 16, 30),
            LayerSpec::elementwise("relu", LayerKind::Activation, 16, 16, 30),
            LayerSpec::pool("pool", PoolKind::Max, 16, 16, 30, 2, 2),
        ])
    }

    #[test]
    fn full_block_fuses_into_one_layer() {
        let m = apply_mapping(&block(), &model()).unwrap();
        assert_eq!(m.units.len(), 1);
        assert_eq!(m.graph.len(), 2);
        assert_eq!(m.units[0].terms.anchor.pool.map(|p| p.stride), Some(2));
    }

    #[test]
    fn conv_conv_stays_split() {
        let g = chain(vec![
            LayerSpec::input("in", 8, 8, 16),
            LayerSpec::conv2d("a", 8, 8, 16, 16, 3, 1),
            LayerSpec::conv2d("b", 8, 8, 16, 16, 3, 1),
        ]);
        assert_eq!(apply_mapping(&g, &model()).unwrap().units.len(), 2);
    }

    #[test]
    fn residual_add_stays_standalone() {
        let layers = vec![
            LayerSpec::input("in", 8, 8, 16),
            LayerSpec::conv2d("a", 8, 8, 16, 16, 3, 1),
            LayerSpec::conv2d("b", 8, 8, 16, 16, 1, 1),
            LayerSpec::elementwise("add", LayerKind::ElemwiseAdd, 8, 8, 16),
        ];
        let edges = [("in", "a"), ("in", "b"), ("a", "add"), ("b", "add")]
            .iter()
            .map(|(x, y)| (x.to_string(), y.to_string()))
            .collect();
        let g = NetworkGraph::new(layers, edges).unwrap();
        let mut m = model();
        m.hard_fusion.push(crate::models::FusionPair {
            anchor: LayerKind::Conv2D,
            follower: LayerKind::ElemwiseAdd,
        });
        let mapping = apply_mapping(&g, &m).unwrap();
        assert_eq!(mapping.units.len(), 3);
        let r = estimate_network(&g, &m, Family::Mixed).unwrap();
        let add = r.layers.iter().find(|l| l.name == "add").unwrap();
        assert_eq!(add.model_used, ModelUsed::FallbackRoofline);
        assert_eq!(r.fallback_count, 1);
    }

    #[test]
    fn mapping_is_idempotent() {
        let m = model();
        let once = apply_mapping(&block(), &m).unwrap().graph;
        let twice = apply_mapping(&once, &m).unwrap().graph;
        assert_eq!(once, twice);
    }

    #[test]
    fn family_dispatch_and_degradation() {
        let full = with_forest(model(), 0.5);
        let conv = FusedTerms::start(&LayerSpec::conv2d("c", 32, 32, 64, 96, 3, 1), 1).unwrap();
        for (fam, used) in [
            (Family::Roofline, ModelUsed::Roofline),
            (Family::Refined, ModelUsed::Refined),
            (Family::Statistical, ModelUsed::Statistical),
            (Family::Mixed, ModelUsed::Mixed),
        ] {
            assert_eq!(estimate_layer(&conv, &full, fam).unwrap().model_used, used);
        }
        assert_eq!(
            estimate_layer(&conv, &model(), Family::Mixed).unwrap().model_used,
            ModelUsed::Refined
        );
        let pool = FusedTerms::start(&LayerSpec::pool("p", PoolKind::Max, 16, 16, 64, 2, 2), 1).unwrap();
        let e = estimate_layer(&pool, &full, Family::Mixed).unwrap();
        assert_eq!(e.model_used, ModelUsed::Roofline);
        assert_eq!(e.t_hat_sec, (16.0 * 16.0 * 64.0 + 8.0 * 8.0 * 64.0) / 8e9);
        let cat = FusedTerms::start(&LayerSpec::elementwise("x", LayerKind::Concat, 8, 8, 32), 1).unwrap();
        assert_eq!(
            estimate_layer(&cat, &full, Family::Mixed).unwrap().model_used,
            ModelUsed::FallbackRoofline
        );
    }

    #[test]
    fn statistical_half_efficiency_doubles_compute() {
        let m = with_forest(model(), 0.5);
        let conv = FusedTerms::start(&LayerSpec::conv2d("c", 32, 32, 64, 96, 3, 1), 1).unwrap();
        let r = estimate_layer(&conv, &m, Family::Roofline).unwrap();
        let s = estimate_layer(&conv, &m, Family::Statistical).unwrap();
        assert_eq!(r.regime, Regime::ComputeBound);
        assert!((s.t_hat_sec / r.t_hat_sec - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_and_deterministic() {
        let m = with_forest(model(), 0.8);
        let a = estimate_network(&block(), &m, Family::Mixed).unwrap();
        let b = estimate_network(&block(), &m, Family::Mixed).unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.layers.iter().map(|l| l.t_hat_sec).sum();
        assert_eq!(a.total_sec, sum);
        assert!(a.to_table().contains("total (mixed)"));
        let back: EstimationReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn parallel_branches_are_summed() {
        let layers = vec![
            LayerSpec::input("in", 8, 8, 16),
            LayerSpec::conv2d("a", 8, 8, 16, 16, 3, 1),
            LayerSpec::conv2d("b", 8, 8, 16, 16, 3, 1),
        ];
        let edges = vec![("in".to_string(), "a".to_string()), ("in".to_string(), "b".to_string())];
        let g = NetworkGraph::new(layers, edges).unwrap();
        let m = model();
        let r = estimate_network(&g, &m, Family::Refined).unwrap();
        let single = estimate_layer(
            &FusedTerms::start(&LayerSpec::conv2d("a", 8, 8, 16, 16, 3, 1), 1).unwrap(),
            &m,
            Family::Refined,
        )
        .unwrap();
        assert_eq!(r.total_sec, 2.0 * single.t_hat_sec);
    }
}
