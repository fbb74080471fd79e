//! Benchmark configuration, benchmark graphs, the runner and the graph
//! matcher that turns device output into training records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{
    data_volume, layer_features, FeatureVector, FusedPool, GraphError, LayerKind, LayerSpec, NetworkGraph, PoolKind,
};
use crate::models::{fusion_features, Unrolling};
use crate::oracle::{Device, DeviceError, FusedFlag, Measurement};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("efficiency-surface sweep needs a fitted unrolling")]
    UnknownUnrolling,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("executed layer `{0}` matches no layer of the original graph")]
    Unmatched(String),
    #[error("layer `{0}` was neither executed nor attributable to an executed layer")]
    Unaccounted(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("table error: {0}")]
    Table(String),
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Table(e.to_string())
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    #[default]
    FullGrid,
    AxisSweep,
    EfficiencySurface,
    NoisySurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Micro,
    Convnet,
    Fcnet,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Template::Micro => "micro",
            Template::Convnet => "convnet",
            Template::Fcnet => "fcnet",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" | "micro-kernel" => Ok(Template::Micro),
            "convnet" => Ok(Template::Convnet),
            "fcnet" => Ok(Template::Fcnet),
            other => Err(format!("unknown benchmark template `{other}`")),
        }
    }
}

/// Sets of values per parameter. Pooling layers use `k_h`, `k_w` and
/// `stride` as their window; `pool_*` describe the pool in multi-layer nets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub h: Vec<u32>,
    pub w: Vec<u32>,
    pub c: Vec<u32>,
    pub f: Vec<u32>,
    pub k_h: Vec<u32>,
    pub k_w: Vec<u32>,
    pub stride: Vec<u32>,
    pub pool_size: Vec<u32>,
    pub pool_stride: Vec<u32>,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            h: vec![16],
            w: vec![16],
            c: vec![32],
            f: vec![32],
            k_h: vec![3],
            k_w: vec![3],
            stride: vec![1],
            pool_size: vec![2],
            pool_stride: vec![2],
        }
    }
}

const AXES: [&str; 9] = ["h", "w", "c", "f", "k_h", "k_w", "stride", "pool_size", "pool_stride"];

impl ParamRanges {
    fn axis(&self, i: usize) -> &Vec<u32> {
        match i {
            0 => &self.h,
            1 => &self.w,
            2 => &self.c,
            3 => &self.f,
            4 => &self.k_h,
            5 => &self.k_w,
            6 => &self.stride,
            7 => &self.pool_size,
            _ => &self.pool_stride,
        }
    }

    fn axis_mut(&mut self, i: usize) -> &mut Vec<u32> {
        match i {
            0 => &mut self.h,
            1 => &mut self.w,
            2 => &mut self.c,
            3 => &mut self.f,
            4 => &mut self.k_h,
            5 => &mut self.k_w,
            6 => &mut self.stride,
            7 => &mut self.pool_size,
            _ => &mut self.pool_stride,
        }
    }

    fn axis_index(name: &str) -> Option<usize> {
        AXES.iter().position(|a| *a == name)
    }

    fn validate(&self) -> Result<(), BenchError> {
        for (i, name) in AXES.iter().enumerate() {
            let v = self.axis(i);
            if v.is_empty() {
                return Err(BenchError::InvalidSweep(format!("range `{name}` is empty")));
            }
            if v.contains(&0) {
                return Err(BenchError::InvalidSweep(format!("range `{name}` contains 0")));
            }
        }
        Ok(())
    }
}

/// `start, start+step, ..., <= end`.
pub fn range_step(start: u32, end: u32, step: u32) -> Vec<u32> {
    (start..=end).step_by(step.max(1) as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: LayerKind,
    pub template: Template,
    pub mode: SweepMode,
    pub ranges: ParamRanges,
    #[serde(default)]
    pub pool_kind: Option<PoolKind>,
    /// Relative spread of the parameter noise in noisy-surface mode, in
    /// units of the array dimension.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub max_configs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.5
}

impl SweepSpec {
    pub fn new(kind: LayerKind, template: Template, mode: SweepMode, ranges: ParamRanges) -> Self {
        SweepSpec {
            kind,
            template,
            mode,
            ranges,
            pool_kind: None,
            noise_sigma: default_noise(),
            max_configs: None,
            seed: 0,
        }
    }
}

/// One row of a configuration table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BenchConfig {
    pub index: usize,
    pub template: Template,
    #[serde(default)]
    pub mode: SweepMode,
    pub kind: LayerKind,
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub f: u32,
    pub k_h: u32,
    pub k_w: u32,
    pub stride: u32,
    pub pool_size: u32,
    pub pool_stride: u32,
    pub pool_kind: PoolKind,
}

impl BenchConfig {
    fn from_values(spec: &SweepSpec, v: &[u32; 9]) -> Self {
        let mut cfg = BenchConfig {
            index: 0,
            template: spec.template,
            mode: spec.mode,
            kind: spec.kind,
            h: v[0],
            w: v[1],
            c: v[2],
            f: v[3],
            k_h: v[4],
            k_w: v[5],
            stride: v[6],
            pool_size: v[7],
            pool_stride: v[8],
            pool_kind: spec
                .pool_kind
                .or_else(|| PoolKind::from_layer_kind(spec.kind))
                .unwrap_or(PoolKind::Max),
        };
        if spec.template == Template::Micro && !kind_uses_filters(spec.kind) {
            cfg.f = cfg.c;
        }
        if spec.template == Template::Micro && !spec.kind.is_windowed() {
            cfg.k_h = 1;
            cfg.k_w = 1;
            cfg.stride = 1;
        }
        cfg
    }

    fn values(&self) -> [u32; 9] {
        [
            self.h,
            self.w,
            self.c,
            self.f,
            self.k_h,
            self.k_w,
            self.stride,
            self.pool_size,
            self.pool_stride,
        ]
    }
}

fn kind_uses_filters(kind: LayerKind) -> bool {
    matches!(kind, LayerKind::Conv2D | LayerKind::FullyConnected)
}

fn dedup_sorted(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v.dedup();
    v
}

fn grid(ranges: &ParamRanges) -> Vec<[u32; 9]> {
    let mut out = vec![[0u32; 9]];
    for i in 0..9 {
        let values = dedup_sorted(ranges.axis(i).clone());
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix;
                    p[i] = v;
                    p
                })
            })
            .collect();
    }
    out
}

/// Small, medium and large pin values of a range.
fn pin_levels(values: &[u32]) -> Vec<u32> {
    let v = dedup_sorted(values.to_vec());
    dedup_sorted(vec![v[0], v[v.len() / 2], v[v.len() - 1]])
}

fn axis_sweep(ranges: &ParamRanges) -> Vec<[u32; 9]> {
    let varying: Vec<usize> = (0..9).filter(|&i| dedup_sorted(ranges.axis(i).clone()).len() > 1).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |p: [u32; 9]| {
        if seen.insert(p) {
            out.push(p);
        }
    };
    if varying.is_empty() {
        push(grid(ranges)[0]);
        return out;
    }
    for &axis in &varying {
        for level in 0..3 {
            let mut base = [0u32; 9];
            for (i, slot) in base.iter_mut().enumerate() {
                let pins = pin_levels(ranges.axis(i));
                *slot = pins[level.min(pins.len() - 1)];
            }
            for &v in &dedup_sorted(ranges.axis(axis).clone()) {
                let mut p = base;
                p[axis] = v;
                push(p);
            }
        }
    }
    out
}

fn unrolled_axis_index(unrolling: &Unrolling, i: usize) -> Result<usize, BenchError> {
    let name = unrolling.axes[i].as_str();
    ParamRanges::axis_index(name)
        .ok_or_else(|| BenchError::InvalidSweep(format!("axis `{name}` is not sweepable")))
}

/// Points with unit array efficiency: every mapped axis restricted to
/// multiples of its array dimension.
fn efficiency_surface(ranges: &ParamRanges, unrolling: &Unrolling) -> Result<Vec<[u32; 9]>, BenchError> {
    let mut r = ranges.clone();
    for (i, &s) in unrolling.s.iter().enumerate() {
        let a = unrolled_axis_index(unrolling, i)?;
        let kept: Vec<u32> = r.axis(a).iter().copied().filter(|v| v % s == 0).collect();
        if kept.is_empty() {
            return Err(BenchError::InvalidSweep(format!(
                "range `{}` has no multiple of {s}",
                AXES[a]
            )));
        }
        *r.axis_mut(a) = kept;
    }
    Ok(grid(&r))
}

/// Expands a sweep into its configuration table.
pub fn generate_configs(spec: &SweepSpec, unrolling: Option<&Unrolling>) -> Result<Vec<BenchConfig>, BenchError> {
    spec.ranges.validate()?;
    let points = match spec.mode {
        SweepMode::FullGrid => grid(&spec.ranges),
        SweepMode::AxisSweep => axis_sweep(&spec.ranges),
        SweepMode::EfficiencySurface => efficiency_surface(&spec.ranges, unrolling.ok_or(BenchError::UnknownUnrolling)?)?,
        SweepMode::NoisySurface => {
            let u = unrolling.ok_or(BenchError::UnknownUnrolling)?;
            if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
                return Err(BenchError::InvalidSweep("noise_sigma must be non-negative".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut points = efficiency_surface(&spec.ranges, u)?;
            for p in &mut points {
                for (i, &s) in u.s.iter().enumerate() {
                    if s <= 1 {
                        continue;
                    }
                    let a = unrolled_axis_index(u, i)?;
                    let normal = Normal::new(0.0, spec.noise_sigma * s as f64)
                        .map_err(|e| BenchError::InvalidSweep(e.to_string()))?;
                    let delta = normal.sample(&mut rng).round() as i64;
                    p[a] = (p[a] as i64 + delta).max(1) as u32;
                }
            }
            points
        }
    };
    let mut seen = BTreeSet::new();
    let mut configs: Vec<BenchConfig> = points
        .iter()
        .map(|p| BenchConfig::from_values(spec, p))
        .filter(|c| seen.insert(c.values()))
        .collect();
    if let Some(max) = spec.max_configs {
        if configs.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
            let mut keep = rand::seq::index::sample(&mut rng, configs.len(), max).into_vec();
            keep.sort_unstable();
            configs = keep.into_iter().map(|i| configs[i].clone()).collect();
        }
    }
    for (i, c) in configs.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(configs)
}

fn edge(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

fn micro_graph(cfg: &BenchConfig) -> Result<NetworkGraph, GraphError> {
    let (h, w, c) = (cfg.h, cfg.w, cfg.c);
    let mut layers = Vec::new();
    let mut edges = Vec::new();
    let layer = match cfg.kind {
        LayerKind::Conv2D => LayerSpec {
            kernel_h: cfg.k_h,
            kernel_w: cfg.k_w,
            ..LayerSpec::conv2d("layer", h, w, c, cfg.f, 1, cfg.stride)
        },
        LayerKind::DepthwiseConv2D => LayerSpec {
            kernel_h: cfg.k_h,
            kernel_w: cfg.k_w,
            ..LayerSpec::depthwise("layer", h, w, c, 1, cfg.stride)
        },
        LayerKind::FullyConnected => {
            layers.push(LayerSpec::input("input", 1, 1, c));
            edges.push(edge("input", "layer"));
            let fc = LayerSpec::fully_connected("layer", c, cfg.f);
            layers.push(fc);
            return NetworkGraph::new(layers, edges);
        }
        LayerKind::MaxPool | LayerKind::AvgPool => LayerSpec {
            kernel_h: cfg.k_h,
            kernel_w: cfg.k_w,
            ..LayerSpec::pool(
                "layer",
                PoolKind::from_layer_kind(cfg.kind).expect("pooling kind"),
                h,
                w,
                c,
                1,
                cfg.stride,
            )
        },
        LayerKind::GlobalAvgPool => LayerSpec::global_avg_pool("layer", h, w, c),
        LayerKind::BatchNorm | LayerKind::Activation | LayerKind::ElemwiseAdd => {
            LayerSpec::elementwise("layer", cfg.kind, h, w, c)
        }
        LayerKind::Concat => LayerSpec::elementwise("layer", cfg.kind, h, w, 2 * c),
        LayerKind::DataInput => {
            return Err(GraphError::InvalidValue {
                layer: "layer".into(),
                field: "kind",
                reason: "DataInput cannot be benchmarked".into(),
            })
        }
    };
    if matches!(cfg.kind, LayerKind::ElemwiseAdd | LayerKind::Concat) {
        layers.push(LayerSpec::input("input_a", h, w, c));
        layers.push(LayerSpec::input("input_b", h, w, c));
        edges.push(edge("input_a", "layer"));
        edges.push(edge("input_b", "layer"));
    } else {
        layers.push(LayerSpec::input("input", h, w, c));
        edges.push(edge("input", "layer"));
    }
    layers.push(layer);
    NetworkGraph::new(layers, edges)
}

fn conv_block(
    layers: &mut Vec<LayerSpec>,
    edges: &mut Vec<(String, String)>,
    from: &str,
    suffix: &str,
    conv: LayerSpec,
) -> String {
    let (oh, ow, f) = conv.output_shape();
    let names = [format!("conv{suffix}"), format!("bn{suffix}"), format!("relu{suffix}")];
    layers.push(LayerSpec {
        name: names[0].clone(),
        ..conv
    });
    layers.push(LayerSpec::elementwise(&names[1], LayerKind::BatchNorm, oh, ow, f));
    layers.push(LayerSpec::elementwise(&names[2], LayerKind::Activation, oh, ow, f));
    edges.push(edge(from, &names[0]));
    edges.push(edge(&names[0], &names[1]));
    edges.push(edge(&names[1], &names[2]));
    names[2].clone()
}

fn square_conv(h: u32, w: u32, c: u32, f: u32, kh: u32, kw: u32, stride: u32) -> LayerSpec {
    LayerSpec {
        kernel_h: kh,
        kernel_w: kw,
        ..LayerSpec::conv2d("conv", h, w, c, f, 1, stride)
    }
}

/// conv-bn-relu-pool, then two parallel conv-bn-relu branches joined by an add.
fn convnet_graph(cfg: &BenchConfig) -> Result<NetworkGraph, GraphError> {
    let mut layers = vec![LayerSpec::input("input", cfg.h, cfg.w, cfg.c)];
    let mut edges = Vec::new();
    let conv1 = square_conv(cfg.h, cfg.w, cfg.c, cfg.f, cfg.k_h, cfg.k_w, cfg.stride);
    let (oh, ow, f) = conv1.output_shape();
    let relu1 = conv_block(&mut layers, &mut edges, "input", "1", conv1);
    layers.push(LayerSpec::pool("pool1", cfg.pool_kind, oh, ow, f, cfg.pool_size, cfg.pool_stride));
    edges.push(edge(&relu1, "pool1"));
    let (ph, pw, _) = layers.last().expect("pool").output_shape();
    let a = conv_block(
        &mut layers,
        &mut edges,
        "pool1",
        "2a",
        square_conv(ph, pw, f, f, cfg.k_h, cfg.k_w, 1),
    );
    let b = conv_block(&mut layers, &mut edges, "pool1", "2b", square_conv(ph, pw, f, f, 1, 1, 1));
    layers.push(LayerSpec::elementwise("add", LayerKind::ElemwiseAdd, ph, pw, f));
    edges.push(edge(&a, "add"));
    edges.push(edge(&b, "add"));
    NetworkGraph::new(layers, edges)
}

/// conv-bn-relu, global average pooling and a dense classifier.
fn fcnet_graph(cfg: &BenchConfig) -> Result<NetworkGraph, GraphError> {
    let mut layers = vec![LayerSpec::input("input", cfg.h, cfg.w, cfg.c)];
    let mut edges = Vec::new();
    let conv1 = square_conv(cfg.h, cfg.w, cfg.c, cfg.f, cfg.k_h, cfg.k_w, cfg.stride);
    let (oh, ow, f) = conv1.output_shape();
    let relu1 = conv_block(&mut layers, &mut edges, "input", "1", conv1);
    layers.push(LayerSpec::global_avg_pool("gap", oh, ow, f));
    layers.push(LayerSpec::fully_connected("fc", f, f));
    layers.push(LayerSpec::elementwise("act", LayerKind::Activation, 1, 1, f));
    edges.push(edge(&relu1, "gap"));
    edges.push(edge("gap", "fc"));
    edges.push(edge("fc", "act"));
    NetworkGraph::new(layers, edges)
}

pub fn build_benchmark_graph(cfg: &BenchConfig) -> Result<NetworkGraph, GraphError> {
    match cfg.template {
        Template::Micro => micro_graph(cfg),
        Template::Convnet => convnet_graph(cfg),
        Template::Fcnet => fcnet_graph(cfg),
    }
}

/// Fused flags keyed by the adjacent operation's kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlagSet(pub BTreeMap<LayerKind, FusedFlag>);

impl FlagSet {
    /// Keeps the strongest flag per kind: fused > possibly-fused > not-fused.
    pub fn merge(&mut self, kind: LayerKind, flag: FusedFlag) {
        let e = self.0.entry(kind).or_insert(flag);
        *e = (*e).max(flag);
    }

    pub fn get(&self, kind: LayerKind) -> Option<FusedFlag> {
        self.0.get(&kind).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when no follower was absorbed.
    pub fn all_not_fused(&self) -> bool {
        self.0.values().all(|f| *f == FusedFlag::NotFused)
    }
}

impl std::fmt::Display for FlagSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for FlagSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = FlagSet::default();
        for part in s.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("bad flag entry `{part}`"))?;
            set.0.insert(k.parse()?, v.parse()?);
        }
        Ok(set)
    }
}

impl Serialize for FlagSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FlagSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One measured post-fusion layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub config: usize,
    pub template: Template,
    /// Sweep that produced the record.
    #[serde(default)]
    pub sweep: SweepMode,
    pub name: String,
    pub kind: LayerKind,
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub f: u32,
    pub k_h: u32,
    pub k_w: u32,
    pub stride: u32,
    pub pool_h: Option<u32>,
    pub pool_w: Option<u32>,
    pub pool_stride: Option<u32>,
    pub pool_kind: Option<PoolKind>,
    pub num_ops: u64,
    pub num_in: u64,
    pub num_out: u64,
    pub num_weights: u64,
    pub bytes: u64,
    pub flags: FlagSet,
    pub time_sec: f64,
}

impl LayerRecord {
    pub fn new(config: usize, template: Template, spec: &LayerSpec, flags: FlagSet, time_sec: f64, bw: u32) -> Result<Self, GraphError> {
        let x = layer_features(spec);
        Ok(LayerRecord {
            config,
            template,
            sweep: SweepMode::default(),
            name: spec.name.clone(),
            kind: spec.kind,
            h: spec.height,
            w: spec.width,
            c: spec.channels,
            f: spec.filters,
            k_h: spec.kernel_h,
            k_w: spec.kernel_w,
            stride: spec.stride,
            pool_h: spec.pool.map(|p| p.h),
            pool_w: spec.pool.map(|p| p.w),
            pool_stride: spec.pool.map(|p| p.stride),
            pool_kind: spec.pool.map(|p| p.kind),
            num_ops: x.num_ops,
            num_in: x.num_in,
            num_out: x.num_out,
            num_weights: x.num_weights,
            bytes: data_volume(spec, bw)?.total(),
            flags,
            time_sec,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        let pool = match (self.pool_h, self.pool_w, self.pool_stride, self.pool_kind) {
            (Some(h), Some(w), Some(stride), Some(kind)) => Some(FusedPool { h, w, stride, kind }),
            _ => None,
        };
        LayerSpec {
            name: self.name.clone(),
            kind: self.kind,
            height: self.h,
            width: self.w,
            channels: self.c,
            filters: self.f,
            kernel_h: self.k_h,
            kernel_w: self.k_w,
            stride: self.stride,
            pool,
        }
    }

    pub fn features(&self) -> FeatureVector {
        FeatureVector {
            h: self.h,
            w: self.w,
            c: self.c,
            f: self.f,
            k_h: self.k_h,
            k_w: self.k_w,
            stride: self.stride,
            num_ops: self.num_ops,
            num_in: self.num_in,
            num_out: self.num_out,
            num_weights: self.num_weights,
        }
    }

    /// A measurement of the layer alone, with nothing absorbed.
    pub fn is_standalone(&self) -> bool {
        self.flags.all_not_fused() && self.pool_kind.is_none()
    }
}

/// Labelled adjacent pair for fusion classifier training.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub config: usize,
    pub anchor_kind: LayerKind,
    pub follower_kind: LayerKind,
    /// Anchor as accumulated before this follower was considered.
    pub anchor: FeatureVector,
    pub follower: FeatureVector,
    pub label: FusedFlag,
}

impl FusionSample {
    pub fn input(&self) -> Vec<f64> {
        fusion_features(&self.anchor, &self.follower)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub records: Vec<LayerRecord>,
    pub samples: Vec<FusionSample>,
}

fn resolve_name(graph: &NetworkGraph, executed: &str) -> Option<usize> {
    if let Some(i) = graph.index_of(executed) {
        return Some(i);
    }
    // toolchains may append an op suffix, e.g. `conv1/BiasAdd`
    let mut best: Option<usize> = None;
    for (i, l) in graph.layers().iter().enumerate() {
        if executed.starts_with(&format!("{}/", l.name))
            && best.is_none_or(|b| graph.layer(b).name.len() < l.name.len())
        {
            best = Some(i);
        }
    }
    best
}

fn owners(graph: &NetworkGraph, executed: &BTreeSet<usize>, i: usize, out: &mut BTreeSet<usize>, seen: &mut BTreeSet<usize>) {
    if !seen.insert(i) {
        return;
    }
    for &p in graph.producers(i) {
        if executed.contains(&p) {
            out.insert(p);
        } else if graph.layer(p).kind != LayerKind::DataInput {
            owners(graph, executed, p, out, seen);
        }
    }
}

/// Compares the executed layers with the original graph and attributes
/// every missing layer to the executed layer(s) that absorbed it.
pub fn match_graphs(
    original: &NetworkGraph,
    measurements: &[Measurement],
    config: usize,
    template: Template,
    byte_width: u32,
) -> Result<MatchResult, BenchError> {
    let mut executed: BTreeMap<usize, &Measurement> = BTreeMap::new();
    for m in measurements {
        let i = resolve_name(original, &m.name).ok_or_else(|| BenchError::Unmatched(m.name.clone()))?;
        executed.insert(i, m);
    }
    let exec_set: BTreeSet<usize> = executed.keys().copied().collect();

    // follower -> attributed anchors
    let mut attributed: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &i in original.topo_order() {
        if exec_set.contains(&i) || original.layer(i).kind == LayerKind::DataInput {
            continue;
        }
        let mut found = BTreeSet::new();
        owners(original, &exec_set, i, &mut found, &mut BTreeSet::new());
        if found.is_empty() {
            return Err(BenchError::Unaccounted(original.layer(i).name.clone()));
        }
        attributed.insert(i, found);
    }
    let flag_for = |anchor: usize, j: usize| -> FusedFlag {
        match attributed.get(&j) {
            Some(a) if a.len() == 1 && a.contains(&anchor) => FusedFlag::Fused,
            Some(a) if a.contains(&anchor) => FusedFlag::PossiblyFused,
            _ => FusedFlag::NotFused,
        }
    };

    let mut result = MatchResult::default();
    for (&anchor, m) in &executed {
        let mut spec = original.layer(anchor).clone();
        let mut flags = FlagSet::default();
        let members: Vec<usize> = std::iter::once(anchor)
            .chain(
                attributed
                    .iter()
                    .filter(|(_, a)| a.contains(&anchor))
                    .map(|(&j, _)| j),
            )
            .collect();
        for &j in &members[1..] {
            flags.merge(original.layer(j).kind, flag_for(anchor, j));
        }
        for &mbr in &members {
            for &c in original.consumers(mbr) {
                if !members.contains(&c) {
                    flags.merge(original.layer(c).kind, FusedFlag::NotFused);
                }
            }
        }

        // walk the single-link chain in order, recording rule consultations
        let mut tail = anchor;
        loop {
            let next = original.consumers(tail);
            if next.len() != 1 {
                break;
            }
            let j = next[0];
            let follower = original.layer(j);
            if !original.is_single_link(tail, j) || follower.kind == LayerKind::DataInput {
                break;
            }
            let pool = PoolKind::from_layer_kind(follower.kind);
            if pool.is_some() && (!spec.kind.accepts_fused_pool() || spec.pool.is_some()) {
                break;
            }
            let label = flag_for(anchor, j);
            result.samples.push(FusionSample {
                config,
                anchor_kind: spec.kind,
                follower_kind: follower.kind,
                anchor: layer_features(&spec),
                follower: layer_features(follower),
                label,
            });
            if label != FusedFlag::Fused {
                break;
            }
            if let Some(kind) = pool {
                spec.pool = Some(FusedPool {
                    h: follower.kernel_h,
                    w: follower.kernel_w,
                    stride: follower.stride,
                    kind,
                });
            }
            tail = j;
        }
        // pools fused elsewhere in the chain still attach to the anchor
        for &j in &members[1..] {
            let l = original.layer(j);
            if let (Some(kind), FusedFlag::Fused, None) = (PoolKind::from_layer_kind(l.kind), flag_for(anchor, j), spec.pool) {
                if spec.kind.accepts_fused_pool() {
                    spec.pool = Some(FusedPool {
                        h: l.kernel_h,
                        w: l.kernel_w,
                        stride: l.stride,
                        kind,
                    });
                }
            }
        }
        result
            .records
            .push(LayerRecord::new(config, template, &spec, flags, m.time_sec, byte_width)?);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub config: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchRun {
    pub records: Vec<LayerRecord>,
    pub samples: Vec<FusionSample>,
    pub failures: Vec<BenchFailure>,
}

impl BenchRun {
    pub fn extend(&mut self, other: BenchRun) {
        let offset = self
            .records
            .iter()
            .map(|r| r.config + 1)
            .chain(self.samples.iter().map(|s| s.config + 1))
            .chain(self.failures.iter().map(|f| f.config + 1))
            .max()
            .unwrap_or(0);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.config += offset;
            r
        }));
        self.samples.extend(other.samples.into_iter().map(|mut s| {
            s.config += offset;
            s
        }));
        self.failures.extend(other.failures.into_iter().map(|mut f| {
            f.config += offset;
            f
        }));
    }
}

/// Per-config seed so results do not depend on evaluation order.
pub fn config_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Builds and profiles every config. Failures are logged and skipped.
pub fn run_benchmark(table: &[BenchConfig], device: &dyn Device, n_iter: u32, seed: u64, byte_width: u32) -> BenchRun {
    let outcomes: Vec<(usize, Result<MatchResult, BenchError>)> = table
        .par_iter()
        .map(|cfg| {
            let run = || -> Result<MatchResult, BenchError> {
                let graph = build_benchmark_graph(cfg)?;
                let measured = device.profile(&graph, n_iter, config_seed(seed, cfg.index))?;
                let mut m = match_graphs(&graph, &measured, cfg.index, cfg.template, byte_width)?;
                for r in &mut m.records {
                    r.sweep = cfg.mode;
                }
                Ok(m)
            };
            (cfg.index, run())
        })
        .collect();
    let mut out = BenchRun::default();
    let mut sorted = outcomes;
    sorted.sort_by_key(|(i, _)| *i);
    for (index, outcome) in sorted {
        match outcome {
            Ok(m) => {
                out.records.extend(m.records);
                out.samples.extend(m.samples);
            }
            Err(e) => {
                log::warn!("config {index} failed on {}: {e}", device.name());
                out.failures.push(BenchFailure {
                    config: index,
                    reason: e.to_string(),
                });
            }
        }
    }
    out
}

pub fn write_configs<W: Write>(configs: &[BenchConfig], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for c in configs {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_configs<R: Read>(input: R) -> Result<Vec<BenchConfig>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

pub fn write_records<W: Write>(records: &[LayerRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<LayerRecord>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let records = r.deserialize().collect::<Result<Vec<LayerRecord>, _>>()?;
    if let Some(bad) = records.iter().find(|r| !(r.time_sec > 0.0 && r.time_sec.is_finite())) {
        return Err(BenchError::Table(format!("record `{}` has non-positive time", bad.name)));
    }
    Ok(records)
}

fn sample_header() -> Vec<String> {
    let mut h = vec!["config".to_string(), "anchor_kind".into(), "follower_kind".into()];
    h.extend(FeatureVector::NAMES.iter().map(|n| format!("a_{n}")));
    h.extend(FeatureVector::NAMES.iter().map(|n| format!("f_{n}")));
    h.push("label".into());
    h
}

pub fn write_samples<W: Write>(samples: &[FusionSample], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(sample_header())?;
    for s in samples {
        let mut row = vec![s.config.to_string(), s.anchor_kind.to_string(), s.follower_kind.to_string()];
        row.extend(s.input().iter().map(|v| format!("{v}")));
        row.push(s.label.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn features_from(cells: &[u64]) -> FeatureVector {
    FeatureVector {
        h: cells[0] as u32,
        w: cells[1] as u32,
        c: cells[2] as u32,
        f: cells[3] as u32,
        k_h: cells[4] as u32,
        k_w: cells[5] as u32,
        stride: cells[6] as u32,
        num_ops: cells[7],
        num_in: cells[8],
        num_out: cells[9],
        num_weights: cells[10],
    }
}

pub fn read_samples<R: Read>(input: R) -> Result<Vec<FusionSample>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != sample_header() {
        return Err(BenchError::Table("unexpected mapping-summary header".into()));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let bad = |what: &str| BenchError::Table(format!("bad {what} in mapping summary row {:?}", row.position()));
        let config = row[0].parse().map_err(|_| bad("config"))?;
        let anchor_kind = row[1].parse().map_err(|_| bad("anchor kind"))?;
        let follower_kind = row[2].parse().map_err(|_| bad("follower kind"))?;
        let nums = (3..3 + 2 * FeatureVector::LEN)
            .map(|i| row[i].parse::<u64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>, _>>()?;
        let label = row[3 + 2 * FeatureVector::LEN].parse().map_err(|_| bad("label"))?;
        out.push(FusionSample {
            config,
            anchor_kind,
            follower_kind,
            anchor: features_from(&nums[..FeatureVector::LEN]),
            follower: features_from(&nums[FeatureVector::LEN..]),
            label,
        });
    }
    Ok(out)
}
