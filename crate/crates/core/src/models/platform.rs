//! The assembled platform model and its on-disk format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{check_byte_width, FeatureVector, LayerKind};
use crate::learn::{ForestModel, TreeModel};

use super::{ModelError, Peaks, Unrolling};

pub const FORMAT_VERSION: u32 = 1;

/// Follower kinds fused into these anchors by fixed rule.
pub const DEFAULT_HARD_FUSION: [(LayerKind, LayerKind); 6] = [
    (LayerKind::Conv2D, LayerKind::BatchNorm),
    (LayerKind::Conv2D, LayerKind::Activation),
    (LayerKind::DepthwiseConv2D, LayerKind::BatchNorm),
    (LayerKind::DepthwiseConv2D, LayerKind::Activation),
    (LayerKind::FullyConnected, LayerKind::BatchNorm),
    (LayerKind::FullyConnected, LayerKind::Activation),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConstants {
    pub peaks: Peaks,
    #[serde(default)]
    pub unrolling: Option<Unrolling>,
    /// Kinds whose compute term is scaled by the unrolling efficiency.
    pub unrolled_kinds: Vec<LayerKind>,
    pub byte_width: u32,
    /// Separately measured peaks for simple-roofline kinds.
    #[serde(default)]
    pub kind_peaks: BTreeMap<LayerKind, Peaks>,
}

impl HardwareConstants {
    pub fn new(peaks: Peaks, byte_width: u32) -> Self {
        HardwareConstants {
            peaks,
            unrolling: None,
            unrolled_kinds: vec![LayerKind::Conv2D],
            byte_width,
            kind_peaks: BTreeMap::new(),
        }
    }

    pub fn peaks_for(&self, kind: LayerKind) -> Peaks {
        self.kind_peaks.get(&kind).copied().unwrap_or(self.peaks)
    }

    pub fn is_unrolled(&self, kind: LayerKind) -> bool {
        self.unrolled_kinds.contains(&kind)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.peaks.validate()?;
        for p in self.kind_peaks.values() {
            p.validate()?;
        }
        if let Some(u) = &self.unrolling {
            u.validate()?;
        }
        check_byte_width(self.byte_width)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FusionPair {
    pub anchor: LayerKind,
    pub follower: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub anchor: LayerKind,
    pub follower: LayerKind,
    /// Classes: 0 = not fused, 1 = fused. Input is anchor features followed
    /// by follower features.
    pub tree: TreeModel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub device: String,
    #[serde(default)]
    pub fitted_at: Option<String>,
    #[serde(default)]
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionDecision {
    HardRule,
    Predicted(bool),
    NoModel,
}

impl FusionDecision {
    pub fn fuses(self) -> bool {
        matches!(self, FusionDecision::HardRule | FusionDecision::Predicted(true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformModel {
    pub version: u32,
    pub constants: HardwareConstants,
    #[serde(default)]
    pub u_stat_models: BTreeMap<LayerKind, ForestModel>,
    #[serde(default)]
    pub fusion_models: Vec<FusionModel>,
    #[serde(default)]
    pub hard_fusion: Vec<FusionPair>,
    #[serde(default)]
    pub metadata: Metadata,
}

/// Concatenated anchor and follower features, the fusion tree input.
pub fn fusion_features(anchor: &FeatureVector, follower: &FeatureVector) -> Vec<f64> {
    let mut v = anchor.to_array().to_vec();
    v.extend_from_slice(&follower.to_array());
    v
}

pub fn predict_fusion(anchor: &FeatureVector, follower: &FeatureVector, tree: &TreeModel) -> bool {
    tree.predict_class(&fusion_features(anchor, follower)) == 1
}

impl PlatformModel {
    pub fn new(constants: HardwareConstants) -> Self {
        PlatformModel {
            version: FORMAT_VERSION,
            constants,
            u_stat_models: BTreeMap::new(),
            fusion_models: Vec::new(),
            hard_fusion: DEFAULT_HARD_FUSION
                .iter()
                .map(|&(anchor, follower)| FusionPair { anchor, follower })
                .collect(),
            metadata: Metadata::default(),
        }
    }

    pub fn fusion_model(&self, anchor: LayerKind, follower: LayerKind) -> Option<&FusionModel> {
        self.fusion_models
            .iter()
            .find(|m| m.anchor == anchor && m.follower == follower)
    }

    /// Kinds that may start a fused chain.
    pub fn is_anchor_kind(&self, kind: LayerKind) -> bool {
        self.hard_fusion.iter().any(|p| p.anchor == kind) || self.fusion_models.iter().any(|m| m.anchor == kind)
    }

    pub fn fusion_decision(
        &self,
        anchor_kind: LayerKind,
        follower_kind: LayerKind,
        anchor: &FeatureVector,
        follower: &FeatureVector,
    ) -> FusionDecision {
        let pair = FusionPair {
            anchor: anchor_kind,
            follower: follower_kind,
        };
        if self.hard_fusion.contains(&pair) {
            return FusionDecision::HardRule;
        }
        match self.fusion_model(anchor_kind, follower_kind) {
            Some(m) => FusionDecision::Predicted(predict_fusion(anchor, follower, &m.tree)),
            None => FusionDecision::NoModel,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.constants.validate()?;
        for (kind, forest) in &self.u_stat_models {
            forest.validate().map_err(|e| ModelError::Schema(format!("{kind}: {e}")))?;
            if !(forest.target_min > 0.0 && forest.target_max <= 1.0) {
                return Err(ModelError::Schema(format!(
                    "{kind}: efficiency targets outside (0, 1]"
                )));
            }
        }
        for m in &self.fusion_models {
            m.tree
                .validate()
                .map_err(|e| ModelError::Schema(format!("{}->{}: {e}", m.anchor, m.follower)))?;
            if m.tree.n_features != 2 * FeatureVector::LEN {
                return Err(ModelError::Schema(format!(
                    "{}->{}: fusion tree expects {} features",
                    m.anchor,
                    m.follower,
                    m.tree.n_features
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("platform model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| ModelError::Schema("missing `version` field".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(ModelError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let model: PlatformModel =
            serde_json::from_value(value).map_err(|e| ModelError::Schema(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

pub fn save_platform_model(model: &PlatformModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, model.to_json()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_platform_model(path: &Path) -> Result<PlatformModel, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    PlatformModel::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{layer_features, LayerSpec, PoolKind};
    use crate::learn::{fit_tree, Dataset, Task, TreeHyper};

    fn pool_tree() -> TreeModel {
        // oracle rule: fuse iff C > 52 and F > 52
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in (8..=160).step_by(8) {
            for f in (8..=160).step_by(8) {
                let conv = LayerSpec::conv2d("c", 16, 16, c, f, 3, 1);
                let pool = LayerSpec::pool("p", PoolKind::Max, 16, 16, f, 2, 2);
                x.push(fusion_features(&layer_features(&conv), &layer_features(&pool)));
                y.push(if c > 52 && f > 52 { 1.0 } else { 0.0 });
            }
        }
        fit_tree(Dataset::new(&x, &y).unwrap(), TreeHyper::default(), Task::Classification).unwrap()
    }

    fn model() -> PlatformModel {
        let mut m = PlatformModel::new(HardwareConstants::new(Peaks { p_peak: 1e12, b_peak: 1e10 }, 1));
        m.fusion_models.push(FusionModel {
            anchor: LayerKind::Conv2D,
            follower: LayerKind::MaxPool,
            tree: pool_tree(),
        });
        m
    }

    #[test]
    fn fusion_predictions_follow_rule() {
        let m = model();
        let pool = |c| layer_features(&LayerSpec::pool("p", PoolKind::Max, 16, 16, c, 2, 2));
        let conv = |c, f| layer_features(&LayerSpec::conv2d("c", 16, 16, c, f, 3, 1));
        let d = m.fusion_decision(LayerKind::Conv2D, LayerKind::MaxPool, &conv(64, 64), &pool(64));
        assert_eq!(d, FusionDecision::Predicted(true));
        let d = m.fusion_decision(LayerKind::Conv2D, LayerKind::MaxPool, &conv(8, 8), &pool(8));
        assert_eq!(d, FusionDecision::Predicted(false));
        let bn = layer_features(&LayerSpec::elementwise("b", LayerKind::BatchNorm, 16, 16, 8));
        assert_eq!(
            m.fusion_decision(LayerKind::Conv2D, LayerKind::BatchNorm, &conv(8, 8), &bn),
            FusionDecision::HardRule
        );
        assert_eq!(
            m.fusion_decision(LayerKind::Conv2D, LayerKind::Conv2D, &conv(8, 8), &conv(8, 8)),
            FusionDecision::NoModel
        );
    }

    #[test]
    fn save_load_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_platform_model(&m, &path).unwrap();
        let back = load_platform_model(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn future_version_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&model().to_json()).unwrap();
        v["version"] = serde_json::json!(FORMAT_VERSION + 1);
        assert!(matches!(
            PlatformModel::from_json(&v.to_string()),
            Err(ModelError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_file_is_schema_error() {
        let text = model().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(PlatformModel::from_json(cut), Err(ModelError::Schema(_))));
        assert!(matches!(PlatformModel::from_json("{}"), Err(ModelError::Schema(_))));
    }
}
