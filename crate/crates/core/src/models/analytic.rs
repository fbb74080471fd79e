//! Roofline-family time models and the spatial-unrolling efficiency.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{data_volume, op_count, FeatureVector, FusedPool, LayerSpec, PoolKind};
use crate::learn::ForestModel;

use super::ModelError;

/// Feature axis that a processing-element array dimension consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    H,
    W,
    C,
    F,
    Kh,
    Kw,
}

impl Axis {
    pub fn value(self, x: &FeatureVector) -> u32 {
        match self {
            Axis::H => x.h,
            Axis::W => x.w,
            Axis::C => x.c,
            Axis::F => x.f,
            Axis::Kh => x.k_h,
            Axis::Kw => x.k_w,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::H => "h",
            Axis::W => "w",
            Axis::C => "c",
            Axis::F => "f",
            Axis::Kh => "k_h",
            Axis::Kw => "k_w",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "h" => Ok(Axis::H),
            "w" => Ok(Axis::W),
            "c" => Ok(Axis::C),
            "f" => Ok(Axis::F),
            "k_h" | "kh" => Ok(Axis::Kh),
            "k_w" | "kw" => Ok(Axis::Kw),
            other => Err(format!("unknown axis `{other}`")),
        }
    }
}

/// Per-axis fragmentation factor `ceil(x/s) / (x/s)`, always >= 1.
pub fn fragmentation(x: f64, s: u32) -> f64 {
    let ratio = x / s as f64;
    ratio.ceil() / ratio
}

/// Utilization efficiency of an array with `s[i]` PEs along dimension `i`:
/// `prod_i 1 / (alpha_i + frag_i * (1 - alpha_i))`.
pub fn u_eff(x: &[f64], s: &[u32], alpha: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), s.len());
    debug_assert_eq!(s.len(), alpha.len());
    x.iter()
        .zip(s)
        .zip(alpha)
        .map(|((&xi, &si), &ai)| 1.0 / (ai + fragmentation(xi, si) * (1.0 - ai)))
        .product()
}

/// Fitted or configured array description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unrolling {
    pub axes: Vec<Axis>,
    pub s: Vec<u32>,
    pub alpha: Vec<f64>,
}

impl Unrolling {
    pub fn new(axes: Vec<Axis>, s: Vec<u32>, alpha: Vec<f64>) -> Result<Self, ModelError> {
        let u = Unrolling { axes, s, alpha };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.axes.len() != self.s.len() || self.s.len() != self.alpha.len() {
            return Err(ModelError::Invalid("unrolling vectors differ in length".into()));
        }
        if self.s.contains(&0) {
            return Err(ModelError::Invalid("unrolling entries must be >= 1".into()));
        }
        if self.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ModelError::Invalid("alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mapped(&self, x: &FeatureVector) -> Vec<f64> {
        self.axes.iter().map(|a| a.value(x) as f64).collect()
    }

    pub fn efficiency(&self, x: &FeatureVector) -> f64 {
        u_eff(&self.mapped(x), &self.s, &self.alpha)
    }

    /// True when every mapped axis is a multiple of its array dimension.
    pub fn is_aligned(&self, x: &FeatureVector) -> bool {
        self.axes
            .iter()
            .zip(&self.s)
            .all(|(a, &s)| a.value(x) % s == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peaks {
    /// ops/sec
    pub p_peak: f64,
    /// bytes/sec
    pub b_peak: f64,
}

impl Peaks {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.p_peak > 0.0 && self.b_peak > 0.0 && self.p_peak.is_finite() && self.b_peak.is_finite() {
            Ok(())
        } else {
            Err(ModelError::Invalid(format!("peaks must be positive and finite: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    ComputeBound,
    BandwidthBound,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::ComputeBound => "compute-bound",
            Regime::BandwidthBound => "bandwidth-bound",
        })
    }
}

/// The two terms of a roofline-style bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub compute_sec: f64,
    pub data_sec: f64,
}

impl Bound {
    pub fn time(&self) -> f64 {
        self.compute_sec.max(self.data_sec)
    }

    pub fn regime(&self) -> Regime {
        if self.compute_sec >= self.data_sec {
            Regime::ComputeBound
        } else {
            Regime::BandwidthBound
        }
    }
}

fn check_inputs(ops: f64, bytes: f64) -> Result<(), ModelError> {
    if !ops.is_finite() || !bytes.is_finite() || ops < 0.0 || bytes < 0.0 {
        return Err(ModelError::NonFinite(format!("ops={ops}, bytes={bytes}")));
    }
    if ops == 0.0 && bytes == 0.0 {
        return Err(ModelError::NonFinite("ops and bytes are both zero".into()));
    }
    Ok(())
}

/// `max(ops / (p_peak * efficiency), bytes / b_peak)`.
pub fn bound_with_efficiency(ops: f64, bytes: f64, efficiency: f64, peaks: &Peaks) -> Result<Bound, ModelError> {
    check_inputs(ops, bytes)?;
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(ModelError::NonFinite(format!("efficiency {efficiency} outside (0, 1]")));
    }
    Ok(Bound {
        compute_sec: ops / (peaks.p_peak * efficiency),
        data_sec: bytes / peaks.b_peak,
    })
}

pub fn roofline_time(ops: f64, bytes: f64, peaks: &Peaks) -> Result<Bound, ModelError> {
    bound_with_efficiency(ops, bytes, 1.0, peaks)
}

pub fn refined_time(
    ops: f64,
    bytes: f64,
    x: &FeatureVector,
    unrolling: &Unrolling,
    peaks: &Peaks,
) -> Result<Bound, ModelError> {
    bound_with_efficiency(ops, bytes, unrolling.efficiency(x), peaks)
}

pub fn statistical_time(
    ops: f64,
    bytes: f64,
    x: &FeatureVector,
    forest: &ForestModel,
    peaks: &Peaks,
) -> Result<Bound, ModelError> {
    let u_stat = forest.predict_efficiency(&x.to_array());
    bound_with_efficiency(ops, bytes, u_stat, peaks)
}

pub fn mixed_time(
    ops: f64,
    bytes: f64,
    x: &FeatureVector,
    unrolling: &Unrolling,
    forest: &ForestModel,
    peaks: &Peaks,
) -> Result<Bound, ModelError> {
    let u = unrolling.efficiency(x) * forest.predict_efficiency(&x.to_array());
    bound_with_efficiency(ops, bytes, u, peaks)
}

/// Running state of an anchor layer absorbing fused followers.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTerms {
    /// Anchor spec with any fused pooling attached.
    pub anchor: LayerSpec,
    /// Ops of the anchor plus all followers.
    pub ops: u64,
    /// Bytes moved by the fused kernel: anchor input and weights plus the
    /// last follower's output. Intermediate tensors stay on chip.
    pub bytes: u64,
    /// Summed standalone compute time of the followers.
    pub follower_compute_sec: f64,
    pub followers: Vec<String>,
}

impl FusedTerms {
    pub fn start(anchor: &LayerSpec, byte_width: u32) -> Result<Self, ModelError> {
        Ok(FusedTerms {
            anchor: anchor.clone(),
            ops: op_count(anchor),
            bytes: data_volume(anchor, byte_width)?.total(),
            follower_compute_sec: 0.0,
            followers: Vec::new(),
        })
    }
}

/// Adds `follower` to a fused kernel. The follower's compute runs at
/// `p_peak`; data movement shrinks to the fused kernel's boundary tensors.
pub fn fuse_adjust(
    terms: &FusedTerms,
    follower: &LayerSpec,
    byte_width: u32,
    p_peak: f64,
) -> Result<FusedTerms, ModelError> {
    let (oh, ow, oc) = terms.anchor.output_shape();
    if (follower.height, follower.width, follower.channels) != (oh, ow, oc) {
        return Err(ModelError::IncompatibleShapes(format!(
            "`{}` outputs {oh}x{ow}x{oc} but `{}` expects {}x{}x{}",
            terms.anchor.name, follower.name, follower.height, follower.width, follower.channels
        )));
    }
    let mut anchor = terms.anchor.clone();
    if let Some(kind) = PoolKind::from_layer_kind(follower.kind) {
        if !anchor.kind.accepts_fused_pool() || anchor.pool.is_some() {
            return Err(ModelError::IncompatibleShapes(format!(
                "`{}` cannot absorb pooling `{}`",
                anchor.name, follower.name
            )));
        }
        anchor.pool = Some(FusedPool {
            h: follower.kernel_h,
            w: follower.kernel_w,
            stride: follower.stride,
            kind,
        });
    }
    let anchor_dv = data_volume(&terms.anchor, byte_width)?;
    let follower_dv = data_volume(follower, byte_width)?;
    let follower_ops = op_count(follower);
    let mut followers = terms.followers.clone();
    followers.push(follower.name.clone());
    Ok(FusedTerms {
        anchor,
        ops: terms.ops + follower_ops,
        bytes: anchor_dv.bytes_in + anchor_dv.bytes_weights + follower_dv.bytes_out,
        follower_compute_sec: terms.follower_compute_sec + follower_ops as f64 / p_peak,
        followers,
    })
}
