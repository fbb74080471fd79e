//! Network graph data model, layer parameter space and per-layer accounting.
//!
//! Graphs carry shapes only. Every layer records its input feature-map
//! dimensions (`height`, `width`, `channels`) and output channel count
//! (`filters`); spatial output size follows the SAME-padding convention,
//! `ceil(H / stride)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("edge references undeclared layer `{0}`")]
    DanglingEdge(String),
    #[error("cycle detected involving layer `{0}`")]
    Cycle(String),
    #[error("layer `{0}` has no incoming edge")]
    MissingInput(String),
    #[error("layer `{layer}`: missing required field `{field}`")]
    MissingField { layer: String, field: &'static str },
    #[error("layer `{layer}`: field `{field}` is not allowed for this kind")]
    UnexpectedField { layer: String, field: &'static str },
    #[error("layer `{layer}`: invalid `{field}`: {reason}")]
    InvalidValue {
        layer: String,
        field: &'static str,
        reason: String,
    },
    #[error("unsupported byte width {0} (expected 1, 2 or 4)")]
    UnsupportedByteWidth(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D,
    DepthwiseConv2D,
    FullyConnected,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    ElemwiseAdd,
    Concat,
    BatchNorm,
    Activation,
    DataInput,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv2D,
        LayerKind::DepthwiseConv2D,
        LayerKind::FullyConnected,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::GlobalAvgPool,
        LayerKind::ElemwiseAdd,
        LayerKind::Concat,
        LayerKind::BatchNorm,
        LayerKind::Activation,
        LayerKind::DataInput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2D => "Conv2D",
            LayerKind::DepthwiseConv2D => "DepthwiseConv2D",
            LayerKind::FullyConnected => "FullyConnected",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::AvgPool => "AvgPool",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::ElemwiseAdd => "ElemwiseAdd",
            LayerKind::Concat => "Concat",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::Activation => "Activation",
            LayerKind::DataInput => "DataInput",
        }
    }

    /// Kinds with a spatial window (`kernel_h`, `kernel_w`, `stride`).
    pub fn is_windowed(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2D | LayerKind::DepthwiseConv2D | LayerKind::MaxPool | LayerKind::AvgPool
        )
    }

    pub fn is_pooling(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::AvgPool)
    }

    /// Kinds whose output channel count is fixed by their input.
    fn filters_follow_channels(self) -> bool {
        !matches!(self, LayerKind::Conv2D | LayerKind::FullyConnected)
    }

    /// Kinds that may carry fused pooling attributes.
    pub fn accepts_fused_pool(self) -> bool {
        matches!(self, LayerKind::Conv2D | LayerKind::DepthwiseConv2D)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

impl PoolKind {
    pub fn layer_kind(self) -> LayerKind {
        match self {
            PoolKind::Max => LayerKind::MaxPool,
            PoolKind::Avg => LayerKind::AvgPool,
        }
    }

    pub fn from_layer_kind(kind: LayerKind) -> Option<Self> {
        match kind {
            LayerKind::MaxPool => Some(PoolKind::Max),
            LayerKind::AvgPool => Some(PoolKind::Avg),
            _ => None,
        }
    }
}

/// Pooling attached to an anchor layer after fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusedPool {
    pub h: u32,
    pub w: u32,
    pub stride: u32,
    pub kind: PoolKind,
}

/// One parameterized layer.
///
/// Fully connected layers are stored as `1 x 1 x neurons_in -> neurons_out`
/// so that every kind shares the same field set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub filters: u32,
    pub kernel_h: u32,
    pub kernel_w: u32,
    pub stride: u32,
    pub pool: Option<FusedPool>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, h: u32, w: u32, c: u32) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            height: h,
            width: w,
            channels: c,
            filters: c,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pool: None,
        }
    }

    pub fn input(name: &str, h: u32, w: u32, c: u32) -> Self {
        Self::base(name, LayerKind::DataInput, h, w, c)
    }

    pub fn conv2d(name: &str, h: u32, w: u32, c: u32, f: u32, k: u32, stride: u32) -> Self {
        LayerSpec {
            filters: f,
            kernel_h: k,
            kernel_w: k,
            stride,
            ..Self::base(name, LayerKind::Conv2D, h, w, c)
        }
    }

    pub fn depthwise(name: &str, h: u32, w: u32, c: u32, k: u32, stride: u32) -> Self {
        LayerSpec {
            kernel_h: k,
            kernel_w: k,
            stride,
            ..Self::base(name, LayerKind::DepthwiseConv2D, h, w, c)
        }
    }

    pub fn fully_connected(name: &str, neurons_in: u32, neurons_out: u32) -> Self {
        LayerSpec {
            filters: neurons_out,
            ..Self::base(name, LayerKind::FullyConnected, 1, 1, neurons_in)
        }
    }

    pub fn pool(name: &str, kind: PoolKind, h: u32, w: u32, c: u32, size: u32, stride: u32) -> Self {
        LayerSpec {
            kernel_h: size,
            kernel_w: size,
            stride,
            ..Self::base(name, kind.layer_kind(), h, w, c)
        }
    }

    pub fn global_avg_pool(name: &str, h: u32, w: u32, c: u32) -> Self {
        Self::base(name, LayerKind::GlobalAvgPool, h, w, c)
    }

    pub fn elementwise(name: &str, kind: LayerKind, h: u32, w: u32, c: u32) -> Self {
        debug_assert!(matches!(
            kind,
            LayerKind::ElemwiseAdd | LayerKind::Concat | LayerKind::BatchNorm | LayerKind::Activation
        ));
        Self::base(name, kind, h, w, c)
    }

    pub fn neurons_in(&self) -> u32 {
        self.channels
    }

    pub fn neurons_out(&self) -> u32 {
        self.filters
    }

    /// Output spatial size of the layer itself, before any fused pooling.
    pub fn own_output_hw(&self) -> (u32, u32) {
        match self.kind {
            LayerKind::GlobalAvgPool => (1, 1),
            _ => (self.height.div_ceil(self.stride), self.width.div_ceil(self.stride)),
        }
    }

    /// Output shape `(h, w, channels)` including a fused pooling stride.
    pub fn output_shape(&self) -> (u32, u32, u32) {
        let (oh, ow) = match (self.kind, self.pool) {
            (LayerKind::GlobalAvgPool, _) => (1, 1),
            (_, Some(p)) => {
                let total = self.stride * p.stride;
                (self.height.div_ceil(total), self.width.div_ceil(total))
            }
            (_, None) => self.own_output_hw(),
        };
        (oh, ow, self.filters)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let check = |field: &'static str, v: u32| {
            if v == 0 {
                Err(GraphError::InvalidValue {
                    layer: self.name.clone(),
                    field,
                    reason: "must be >= 1".into(),
                })
            } else {
                Ok(())
            }
        };
        check("height", self.height)?;
        check("width", self.width)?;
        check("channels", self.channels)?;
        check("filters", self.filters)?;
        check("kernel_h", self.kernel_h)?;
        check("kernel_w", self.kernel_w)?;
        check("stride", self.stride)?;
        if let Some(p) = self.pool {
            check("pool_h", p.h)?;
            check("pool_w", p.w)?;
            check("pool_stride", p.stride)?;
        }
        if self.name.is_empty() {
            return Err(GraphError::InvalidValue {
                layer: self.name.clone(),
                field: "name",
                reason: "must not be empty".into(),
            });
        }
        Ok(())
    }
}

/// Eleven-element layer descriptor used by the statistical and mapping models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub f: u32,
    pub k_h: u32,
    pub k_w: u32,
    pub stride: u32,
    pub num_ops: u64,
    pub num_in: u64,
    pub num_out: u64,
    pub num_weights: u64,
}

impl FeatureVector {
    pub const LEN: usize = 11;
    pub const NAMES: [&'static str; 11] = [
        "h", "w", "c", "f", "k_h", "k_w", "stride", "num_ops", "num_in", "num_out", "num_weights",
    ];

    pub fn to_array(&self) -> [f64; 11] {
        [
            self.h as f64,
            self.w as f64,
            self.c as f64,
            self.f as f64,
            self.k_h as f64,
            self.k_w as f64,
            self.stride as f64,
            self.num_ops as f64,
            self.num_in as f64,
            self.num_out as f64,
            self.num_weights as f64,
        ]
    }

    pub fn index_of(name: &str) -> Option<usize> {
        Self::NAMES.iter().position(|n| *n == name)
    }
}

/// Byte counts moved by one layer execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataVolume {
    pub bytes_in: u64,
    pub bytes_weights: u64,
    pub bytes_out: u64,
}

impl DataVolume {
    pub fn total(&self) -> u64 {
        self.bytes_in + self.bytes_weights + self.bytes_out
    }
}

fn output_elements(layer: &LayerSpec) -> u64 {
    let (oh, ow, c) = layer.output_shape();
    oh as u64 * ow as u64 * c as u64
}

/// Output elements of the layer's own operation (fused pooling ignored).
fn own_output_elements(layer: &LayerSpec) -> u64 {
    let (oh, ow) = layer.own_output_hw();
    oh as u64 * ow as u64 * layer.filters as u64
}

fn input_elements(layer: &LayerSpec) -> u64 {
    layer.height as u64 * layer.width as u64 * layer.channels as u64
}

pub fn weight_count(layer: &LayerSpec) -> u64 {
    let k = layer.kernel_h as u64 * layer.kernel_w as u64;
    match layer.kind {
        LayerKind::Conv2D => k * layer.channels as u64 * layer.filters as u64,
        LayerKind::DepthwiseConv2D => k * layer.channels as u64,
        LayerKind::FullyConnected => layer.channels as u64 * layer.filters as u64,
        // folded scale and shift
        LayerKind::BatchNorm => 2 * layer.channels as u64,
        _ => 0,
    }
}

/// Arithmetic operation count of the layer's own operation (2 x MACs for
/// convolutions and dense layers). Fused followers are not included.
pub fn op_count(layer: &LayerSpec) -> u64 {
    let (oh, ow) = layer.own_output_hw();
    let spatial = oh as u64 * ow as u64;
    let window = layer.kernel_h as u64 * layer.kernel_w as u64;
    match layer.kind {
        LayerKind::Conv2D => 2 * spatial * layer.channels as u64 * layer.filters as u64 * window,
        LayerKind::DepthwiseConv2D => 2 * spatial * layer.channels as u64 * window,
        LayerKind::FullyConnected => 2 * layer.channels as u64 * layer.filters as u64,
        LayerKind::MaxPool | LayerKind::AvgPool => own_output_elements(layer) * window,
        LayerKind::GlobalAvgPool => input_elements(layer),
        LayerKind::BatchNorm => 2 * own_output_elements(layer),
        LayerKind::ElemwiseAdd
        | LayerKind::Concat
        | LayerKind::Activation
        | LayerKind::DataInput => own_output_elements(layer),
    }
}

pub fn check_byte_width(byte_width: u32) -> Result<(), GraphError> {
    match byte_width {
        1 | 2 | 4 => Ok(()),
        other => Err(GraphError::UnsupportedByteWidth(other)),
    }
}

/// Bytes read and written by the layer, with a fused pooling stride shrinking
/// the output tensor.
pub fn data_volume(layer: &LayerSpec, byte_width: u32) -> Result<DataVolume, GraphError> {
    check_byte_width(byte_width)?;
    let bw = byte_width as u64;
    Ok(DataVolume {
        bytes_in: input_elements(layer) * bw,
        bytes_weights: weight_count(layer) * bw,
        bytes_out: output_elements(layer) * bw,
    })
}

pub fn layer_features(layer: &LayerSpec) -> FeatureVector {
    FeatureVector {
        h: layer.height,
        w: layer.width,
        c: layer.channels,
        f: layer.filters,
        k_h: layer.kernel_h,
        k_w: layer.kernel_w,
        stride: layer.stride,
        num_ops: op_count(layer),
        num_in: input_elements(layer),
        num_out: output_elements(layer),
        num_weights: weight_count(layer),
    }
}

/// A validated DAG of layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl NetworkGraph {
    pub fn new(layers: Vec<LayerSpec>, edges: Vec<(String, String)>) -> Result<Self, GraphError> {
        let mut index = HashMap::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if index.insert(layer.name.clone(), i).is_some() {
                return Err(GraphError::DuplicateName(layer.name.clone()));
            }
        }
        let mut producers = vec![Vec::new(); layers.len()];
        let mut consumers = vec![Vec::new(); layers.len()];
        for (from, to) in &edges {
            let &a = index
                .get(from)
                .ok_or_else(|| GraphError::DanglingEdge(from.clone()))?;
            let &b = index
                .get(to)
                .ok_or_else(|| GraphError::DanglingEdge(to.clone()))?;
            if a == b {
                return Err(GraphError::Cycle(from.clone()));
            }
            if !producers[b].contains(&a) {
                producers[b].push(a);
                consumers[a].push(b);
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.kind != LayerKind::DataInput && producers[i].is_empty() {
                return Err(GraphError::MissingInput(layer.name.clone()));
            }
        }
        // Kahn's algorithm, lowest declaration index first.
        let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(layers.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != layers.len() {
            let stuck = (0..layers.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(layers[stuck].name.clone()));
        }
        Ok(NetworkGraph {
            layers,
            edges,
            index,
            producers,
            consumers,
            order,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.layers[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.index_of(name).map(|i| &self.layers[i])
    }

    pub fn producers(&self, i: usize) -> &[usize] {
        &self.producers[i]
    }

    pub fn consumers(&self, i: usize) -> &[usize] {
        &self.consumers[i]
    }

    /// Layer indices in topological order (ties broken by declaration order).
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    /// Position of each layer within the topological order.
    pub fn topo_rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.layers.len()];
        for (pos, &i) in self.order.iter().enumerate() {
            rank[i] = pos;
        }
        rank
    }

    /// Structural precondition for absorbing `consumer` into the chain whose
    /// current tail is `tail`: the tail feeds only the consumer and the
    /// consumer reads only the tail.
    pub fn is_single_link(&self, tail: usize, consumer: usize) -> bool {
        self.consumers[tail] == [consumer] && self.producers[consumer] == [tail]
    }

    pub fn from_json(document: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument =
            serde_json::from_str(document).map_err(|e| GraphError::Malformed(e.to_string()))?;
        doc.into_graph()
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            layers: self.layers.iter().map(LayerRecordDoc::from_spec).collect(),
            edges: self.edges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph document serializes")
    }

    /// Count of layers per kind, excluding inputs.
    pub fn kind_histogram(&self) -> BTreeMap<LayerKind, usize> {
        let mut out = BTreeMap::new();
        for l in &self.layers {
            if l.kind != LayerKind::DataInput {
                *out.entry(l.kind).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Parse a graph-description document.
pub fn parse_graph(document: &str) -> Result<NetworkGraph, GraphError> {
    NetworkGraph::from_json(document)
}

/// On-disk graph description: `{"layers": [...], "edges": [["a","b"], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub layers: Vec<LayerRecordDoc>,
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecordDoc {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_stride: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_kind: Option<PoolKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neurons_in: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neurons_out: Option<u32>,
}

impl GraphDocument {
    pub fn into_graph(self) -> Result<NetworkGraph, GraphError> {
        let layers = self
            .layers
            .into_iter()
            .map(LayerRecordDoc::into_spec)
            .collect::<Result<Vec<_>, _>>()?;
        let edges = self.edges.into_iter().map(|[a, b]| (a, b)).collect();
        NetworkGraph::new(layers, edges)
    }
}

impl LayerRecordDoc {
    fn from_spec(l: &LayerSpec) -> Self {
        let mut d = LayerRecordDoc {
            name: l.name.clone(),
            kind: l.kind.as_str().to_string(),
            ..Default::default()
        };
        if l.kind == LayerKind::FullyConnected {
            d.neurons_in = Some(l.channels);
            d.neurons_out = Some(l.filters);
            return d;
        }
        d.height = Some(l.height);
        d.width = Some(l.width);
        d.channels = Some(l.channels);
        if !l.kind.filters_follow_channels() {
            d.filters = Some(l.filters);
        }
        if l.kind.is_windowed() {
            d.kernel_h = Some(l.kernel_h);
            d.kernel_w = Some(l.kernel_w);
            d.stride = Some(l.stride);
        }
        if let Some(p) = l.pool {
            d.pool_h = Some(p.h);
            d.pool_w = Some(p.w);
            d.pool_stride = Some(p.stride);
            d.pool_kind = Some(p.kind);
        }
        d
    }

    fn into_spec(self) -> Result<LayerSpec, GraphError> {
        let kind: LayerKind = self.kind.parse().map_err(|reason| GraphError::InvalidValue {
            layer: self.name.clone(),
            field: "kind",
            reason,
        })?;
        let name = self.name.clone();
        let require = |v: Option<u32>, field: &'static str| {
            v.ok_or_else(|| GraphError::MissingField {
                layer: name.clone(),
                field,
            })
        };
        let forbid = |present: bool, field: &'static str| {
            if present {
                Err(GraphError::UnexpectedField {
                    layer: name.clone(),
                    field,
                })
            } else {
                Ok(())
            }
        };

        let pool_fields = [
            self.pool_h.is_some(),
            self.pool_w.is_some(),
            self.pool_stride.is_some(),
            self.pool_kind.is_some(),
        ];
        let pool = if pool_fields.iter().any(|&p| p) {
            if !kind.accepts_fused_pool() {
                forbid(true, "pool_h")?;
            }
            Some(FusedPool {
                h: require(self.pool_h, "pool_h")?,
                w: require(self.pool_w, "pool_w")?,
                stride: require(self.pool_stride, "pool_stride")?,
                kind: self.pool_kind.ok_or_else(|| GraphError::MissingField {
                    layer: name.clone(),
                    field: "pool_kind",
                })?,
            })
        } else {
            None
        };

        let spec = if kind == LayerKind::FullyConnected {
            forbid(self.height.is_some(), "height")?;
            forbid(self.width.is_some(), "width")?;
            forbid(self.channels.is_some(), "channels")?;
            forbid(self.filters.is_some(), "filters")?;
            forbid(self.kernel_h.is_some(), "kernel_h")?;
            forbid(self.kernel_w.is_some(), "kernel_w")?;
            forbid(self.stride.is_some(), "stride")?;
            LayerSpec::fully_connected(
                &self.name,
                require(self.neurons_in, "neurons_in")?,
                require(self.neurons_out, "neurons_out")?,
            )
        } else {
            forbid(self.neurons_in.is_some(), "neurons_in")?;
            forbid(self.neurons_out.is_some(), "neurons_out")?;
            let h = require(self.height, "height")?;
            let w = require(self.width, "width")?;
            let c = require(self.channels, "channels")?;
            let f = if kind.filters_follow_channels() {
                if let Some(f) = self.filters {
                    if f != c {
                        return Err(GraphError::InvalidValue {
                            layer: name.clone(),
                            field: "filters",
                            reason: format!("must equal channels ({c}) for {kind}"),
                        });
                    }
                }
                c
            } else {
                require(self.filters, "filters")?
            };
            let (kh, kw, stride) = if kind.is_windowed() {
                (
                    require(self.kernel_h, "kernel_h")?,
                    require(self.kernel_w, "kernel_w")?,
                    self.stride.unwrap_or(1),
                )
            } else {
                forbid(self.kernel_h.is_some(), "kernel_h")?;
                forbid(self.kernel_w.is_some(), "kernel_w")?;
                forbid(self.stride.is_some(), "stride")?;
                (1, 1, 1)
            };
            LayerSpec {
                name: self.name.clone(),
                kind,
                height: h,
                width: w,
                channels: c,
                filters: f,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                pool: None,
            }
        };
        let spec = LayerSpec { pool, ..spec };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_conv() -> LayerSpec {
        LayerSpec::conv2d("c", 1, 1, 1, 1, 1, 1)
    }

    #[test]
    fn op_count_unit_conv() {
        assert_eq!(op_count(&unit_conv()), 2);
    }

    #[test]
    fn op_count_pointwise_conv() {
        let l = LayerSpec::conv2d("c", 12, 6, 128, 256, 1, 1);
        assert_eq!(op_count(&l), 4_718_592);
    }

    #[test]
    fn op_count_maxpool() {
        let l = LayerSpec::pool("p", PoolKind::Max, 4, 4, 3, 2, 2);
        assert_eq!(op_count(&l), 48);
    }

    #[test]
    fn data_volume_cases() {
        assert_eq!(data_volume(&unit_conv(), 1).unwrap().total(), 3);
        let l = LayerSpec::conv2d("c", 8, 8, 16, 16, 3, 1);
        let v = data_volume(&l, 2).unwrap();
        assert_eq!(v.bytes_weights, 4608);
        let mut fused = l.clone();
        fused.pool = Some(FusedPool { h: 2, w: 2, stride: 2, kind: PoolKind::Max });
        let vf = data_volume(&fused, 2).unwrap();
        assert_eq!(vf.bytes_out * 4, v.bytes_out);
        assert_eq!(vf.bytes_in, v.bytes_in);
        assert!(matches!(data_volume(&l, 3), Err(GraphError::UnsupportedByteWidth(3))));
    }

    #[test]
    fn features_of_unit_and_dense_layers() {
        let fv = layer_features(&unit_conv());
        assert_eq!(fv.to_array(), [1., 1., 1., 1., 1., 1., 1., 2., 1., 1., 1.]);
        let fc = layer_features(&LayerSpec::fully_connected("fc", 2048, 1000));
        assert_eq!(fc.num_ops, 4_096_000);
        assert_eq!(fc.num_weights, 2_048_000);
        assert_eq!(layer_features(&unit_conv()), layer_features(&unit_conv()));
    }

    #[test]
    fn parse_minimal_document() {
        let g = parse_graph(
            r#"{"layers":[{"name":"c","kind":"Conv2D","height":4,"width":4,"channels":3,
            "filters":8,"kernel_h":3,"kernel_w":3}], "edges": []}"#,
        );
        // A lone conv has no producer.
        assert_eq!(g.unwrap_err(), GraphError::MissingInput("c".into()));

        let g = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":4,"width":4,"channels":3}],
            "edges": []}"#,
        )
        .unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn single_conv_layer_document() {
        // Non-input layers need a producer, so a single conv declares its input.
        let g = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":4,"width":4,"channels":3},
            {"name":"c","kind":"Conv2D","height":4,"width":4,"channels":3,"filters":8,
            "kernel_h":3,"kernel_w":3}], "edges": [["in","c"]]}"#,
        )
        .unwrap();
        assert_eq!(g.get("c").unwrap().kind, LayerKind::Conv2D);
        assert_eq!(g.topo_order(), &[0, 1]);
    }

    #[test]
    fn dangling_edge_names_layer() {
        let err = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":4,"width":4,"channels":3}],
            "edges": [["in","x"]]}"#,
        )
        .unwrap_err();
        assert_eq!(err, GraphError::DanglingEdge("x".into()));
    }

    #[test]
    fn cycle_detected() {
        let layers = vec![
            LayerSpec::input("in", 4, 4, 4),
            LayerSpec::elementwise("a", LayerKind::Activation, 4, 4, 4),
            LayerSpec::elementwise("b", LayerKind::Activation, 4, 4, 4),
        ];
        let edges = vec![
            ("in".into(), "a".into()),
            ("a".into(), "b".into()),
            ("b".into(), "a".into()),
        ];
        assert!(matches!(NetworkGraph::new(layers, edges), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn kind_field_validation() {
        let missing = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":4,"width":4,"channels":3},
            {"name":"c","kind":"Conv2D","height":4,"width":4,"channels":3,"kernel_h":3,"kernel_w":3}],
            "edges":[["in","c"]]}"#,
        )
        .unwrap_err();
        assert_eq!(
            missing,
            GraphError::MissingField { layer: "c".into(), field: "filters" }
        );
        let extra = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":4,"width":4,"channels":3,
            "neurons_in":3}], "edges":[]}"#,
        )
        .unwrap_err();
        assert_eq!(
            extra,
            GraphError::UnexpectedField { layer: "in".into(), field: "neurons_in" }
        );
        let bad = parse_graph(r#"{"layers":[{"name":"in","kind":"Blob"}]}"#).unwrap_err();
        assert!(matches!(bad, GraphError::InvalidValue { field: "kind", .. }));
        let zero = parse_graph(
            r#"{"layers":[{"name":"in","kind":"DataInput","height":0,"width":4,"channels":3}]}"#,
        )
        .unwrap_err();
        assert!(matches!(zero, GraphError::InvalidValue { field: "height", .. }));
        assert!(matches!(parse_graph("{\"layers\": ["), Err(GraphError::Malformed(_))));
    }

    #[test]
    fn fully_connected_round_trip() {
        let layers = vec![
            LayerSpec::input("in", 1, 1, 64),
            LayerSpec::fully_connected("fc", 64, 10),
        ];
        let g = NetworkGraph::new(layers, vec![("in".into(), "fc".into())]).unwrap();
        let back = parse_graph(&g.to_json()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn single_link_structure() {
        let layers = vec![
            LayerSpec::input("in", 8, 8, 8),
            LayerSpec::conv2d("a", 8, 8, 8, 8, 3, 1),
            LayerSpec::conv2d("b", 8, 8, 8, 8, 3, 1),
            LayerSpec::elementwise("add", LayerKind::ElemwiseAdd, 8, 8, 8),
        ];
        let edges = vec![
            ("in".into(), "a".into()),
            ("in".into(), "b".into()),
            ("a".into(), "add".into()),
            ("b".into(), "add".into()),
        ];
        let g = NetworkGraph::new(layers, edges).unwrap();
        assert!(!g.is_single_link(1, 3));
        assert_eq!(g.producers(3), &[1, 2]);
    }
}
