//! Model generation: benchmark records and mapping samples in, a stacked
//! platform model out.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{FusionSample, LayerRecord, SweepMode, Template};
use crate::graph::LayerKind;
use crate::learn::{
    fit_forest, fit_tree, fit_unrolling, Dataset, ForestHyper, LearnError, Task, TimedLayer, TreeHyper, UnrollingFit,
    UnrollingOptions, DEFAULT_S_CANDIDATES, EFFICIENCY_FLOOR,
};
use crate::metrics::Confusion;
use crate::models::{Axis, FusionModel, FusionPair, HardwareConstants, ModelError, Peaks, PlatformModel};
use crate::oracle::FusedFlag;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub axes: Vec<Axis>,
    pub s_candidates: Vec<u32>,
    pub unrolling: UnrollingOptions,
    pub forest: ForestHyper,
    pub tree: TreeHyper,
    pub byte_width: u32,
    pub unrolled_kinds: Vec<LayerKind>,
    pub stat_records: StatRecords,
    pub device: String,
}

/// Which compute-bound records train the statistical efficiency model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatRecords {
    /// Only records at unit analytic efficiency; the target is `f / (t p)`.
    #[default]
    Aligned,
    /// Every record; the target is the residual `f / (t p u_eff)`.
    All,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            axes: vec![Axis::C, Axis::F],
            s_candidates: DEFAULT_S_CANDIDATES.to_vec(),
            unrolling: UnrollingOptions::default(),
            forest: ForestHyper::default(),
            tree: TreeHyper::default(),
            byte_width: 1,
            unrolled_kinds: vec![LayerKind::Conv2D],
            stat_records: StatRecords::default(),
            device: "unknown".into(),
        }
    }
}

/// What the generator fitted, for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub unrolling: Option<UnrollingFit>,
    pub peaks: Peaks,
    pub forest_rows: BTreeMap<LayerKind, usize>,
    pub kind_peaks: BTreeMap<LayerKind, Peaks>,
    /// `anchor->follower` to (training rows, excluded ambiguous rows).
    pub fusion_rows: BTreeMap<String, (usize, usize)>,
}

fn timed(r: &LayerRecord) -> TimedLayer {
    TimedLayer {
        features: r.features(),
        bytes: r.bytes,
        time_sec: r.time_sec,
    }
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

/// Single-layer micro-benchmark measurements, free of fusion effects.
pub fn standalone_records(records: &[LayerRecord]) -> impl Iterator<Item = &LayerRecord> {
    records
        .iter()
        .filter(|r| r.template == Template::Micro && r.is_standalone())
}

/// Rows of the fusion classifier for one kind pair. Ambiguous labels are
/// dropped.
pub fn fusion_dataset(samples: &[FusionSample], pair: FusionPair) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut ambiguous = 0;
    for s in samples
        .iter()
        .filter(|s| s.anchor_kind == pair.anchor && s.follower_kind == pair.follower)
    {
        match s.label {
            FusedFlag::PossiblyFused => ambiguous += 1,
            label => {
                x.push(s.input());
                y.push(if label == FusedFlag::Fused { 1.0 } else { 0.0 });
            }
        }
    }
    (x, y, ambiguous)
}

pub fn fit_platform_model(
    records: &[LayerRecord],
    samples: &[FusionSample],
    opts: &FitOptions,
) -> Result<(PlatformModel, FitSummary), FitError> {
    if records.is_empty() {
        return Err(FitError::InsufficientData("no benchmark records".into()));
    }
    let margin = opts.unrolling.bandwidth_margin;
    let micro: Vec<&LayerRecord> = standalone_records(records).collect();
    if micro.is_empty() {
        return Err(FitError::InsufficientData("no unfused micro-kernel records".into()));
    }
    let b_all = max_of(micro.iter().map(|r| r.bytes as f64 / r.time_sec));

    // array dimensions and peaks from the unrolled kinds, preferring the
    // dedicated axis sweeps when present
    let unrolled_records: Vec<&&LayerRecord> = micro
        .iter()
        .filter(|r| opts.unrolled_kinds.contains(&r.kind))
        .collect();
    let has_axis = unrolled_records.iter().any(|r| r.sweep == SweepMode::AxisSweep);
    let unrolled: Vec<TimedLayer> = unrolled_records
        .iter()
        .filter(|r| !has_axis || r.sweep == SweepMode::AxisSweep)
        .map(|r| timed(r))
        .collect();
    let fit = if unrolled.is_empty() {
        log::warn!("no records for unrolled kinds; fitting plain roofline peaks only");
        None
    } else {
        match fit_unrolling(&unrolled, &opts.axes, &opts.s_candidates, &opts.unrolling) {
            Ok(f) => Some(f),
            Err(e @ LearnError::InsufficientCoverage { .. }) => {
                log::warn!("unrolling not fitted: {e}");
                None
            }
            Err(e) => return Err(e.into()),
        }
    };
    let peaks = match &fit {
        Some(f) => Peaks {
            p_peak: f.p_peak_final,
            b_peak: f.b_peak_final.max(b_all),
        },
        None => Peaks {
            p_peak: max_of(micro.iter().map(|r| r.num_ops as f64 / r.time_sec)),
            b_peak: b_all,
        },
    };
    peaks.validate()?;

    let mut constants = HardwareConstants::new(peaks, opts.byte_width);
    constants.unrolled_kinds = opts.unrolled_kinds.clone();
    constants.unrolling = fit.as_ref().map(UnrollingFit::unrolling);

    // statistical efficiency on the unit-efficiency surface
    let mut forests = BTreeMap::new();
    let mut forest_rows = BTreeMap::new();
    for &kind in &opts.unrolled_kinds {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in micro.iter().filter(|r| r.kind == kind) {
            let features = r.features();
            let u_eff = constants.unrolling.as_ref().map_or(1.0, |u| u.efficiency(&features));
            let usable = match opts.stat_records {
                StatRecords::Aligned => u_eff == 1.0,
                StatRecords::All => true,
            };
            let data_share = r.bytes as f64 / (peaks.b_peak * r.time_sec);
            if usable && data_share < margin {
                x.push(features.to_array().to_vec());
                y.push((r.num_ops as f64 / (r.time_sec * peaks.p_peak * u_eff)).clamp(EFFICIENCY_FLOOR, 1.0));
            }
        }
        forest_rows.insert(kind, x.len());
        if x.len() < 2 * opts.forest.tree.min_samples_leaf.max(1) {
            log::warn!("{kind}: {} unit-efficiency records, no statistical model", x.len());
            continue;
        }
        forests.insert(kind, fit_forest(Dataset::new(&x, &y)?, opts.forest)?);
    }

    // separately measured peaks for the remaining kinds
    let mut by_kind: BTreeMap<LayerKind, Vec<&LayerRecord>> = BTreeMap::new();
    for r in micro.iter().filter(|r| !opts.unrolled_kinds.contains(&r.kind)) {
        by_kind.entry(r.kind).or_default().push(r);
    }
    for (kind, rs) in &by_kind {
        let b_k = max_of(rs.iter().map(|r| r.bytes as f64 / r.time_sec));
        let p_k = max_of(
            rs.iter()
                .filter(|r| r.bytes as f64 / (b_k * r.time_sec) < margin)
                .map(|r| r.num_ops as f64 / r.time_sec),
        );
        let kp = Peaks {
            p_peak: if p_k > 0.0 { p_k } else { peaks.p_peak },
            b_peak: if b_k > 0.0 { b_k } else { peaks.b_peak },
        };
        constants.kind_peaks.insert(*kind, kp);
    }

    let mut model = PlatformModel::new(constants);
    model.u_stat_models = forests;
    model.metadata.device = opts.device.clone();

    // fusion classifiers for every observed, learnable pair
    let mut pairs: Vec<FusionPair> = samples
        .iter()
        .map(|s| FusionPair {
            anchor: s.anchor_kind,
            follower: s.follower_kind,
        })
        .collect();
    pairs.sort();
    pairs.dedup();
    let mut fusion_rows = BTreeMap::new();
    for pair in pairs {
        if model.hard_fusion.contains(&pair) {
            continue;
        }
        let (x, y, ambiguous) = fusion_dataset(samples, pair);
        fusion_rows.insert(format!("{}->{}", pair.anchor, pair.follower), (x.len(), ambiguous));
        if x.len() < 2 * opts.tree.min_samples_leaf.max(1) {
            log::warn!("{}->{}: {} labelled samples, no classifier", pair.anchor, pair.follower, x.len());
            continue;
        }
        let tree = fit_tree(Dataset::new(&x, &y)?, opts.tree, Task::Classification)?;
        model.fusion_models.push(FusionModel {
            anchor: pair.anchor,
            follower: pair.follower,
            tree,
        });
    }
    model.validate()?;

    let summary = FitSummary {
        unrolling: fit,
        peaks,
        forest_rows,
        kind_peaks: model.constants.kind_peaks.clone(),
        fusion_rows,
    };
    Ok((model, summary))
}

/// Fits the fusion classifiers on all but a random `holdout` fraction of
/// the labelled samples of learnable pairs and scores the rest.
pub fn fusion_holdout(
    samples: &[FusionSample],
    hard_fusion: &[FusionPair],
    holdout: f64,
    seed: u64,
    tree: TreeHyper,
) -> Result<Confusion, FitError> {
    let mut labelled: Vec<&FusionSample> = samples
        .iter()
        .filter(|s| s.label != FusedFlag::PossiblyFused)
        .filter(|s| {
            !hard_fusion.contains(&FusionPair {
                anchor: s.anchor_kind,
                follower: s.follower_kind,
            })
        })
        .collect();
    labelled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (holdout.clamp(0.0, 1.0) * labelled.len() as f64).round() as usize;
    let (test, train) = labelled.split_at(n_test);
    let train: Vec<FusionSample> = train.iter().map(|s| (*s).clone()).collect();
    let mut trees = BTreeMap::new();
    let mut truth = Vec::new();
    let mut guess = Vec::new();
    for s in test {
        let pair = FusionPair {
            anchor: s.anchor_kind,
            follower: s.follower_kind,
        };
        if !trees.contains_key(&pair) {
            let (x, y, _) = fusion_dataset(&train, pair);
            let fitted = if x.len() >= 2 * tree.min_samples_leaf.max(1) {
                Some(fit_tree(Dataset::new(&x, &y)?, tree, Task::Classification)?)
            } else {
                None
            };
            trees.insert(pair, fitted);
        }
        truth.push(s.label == FusedFlag::Fused);
        guess.push(trees[&pair].as_ref().is_some_and(|t| t.predict_class(&s.input()) == 1));
    }
    Ok(Confusion::from_labels(&truth, &guess))
}
