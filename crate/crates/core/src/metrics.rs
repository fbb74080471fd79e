//! Accuracy and fidelity metrics over (measured, estimated) pairs and
//! binary confusion counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no pairs")]
    Empty,
    #[error("at least {0} pairs required")]
    TooFew(usize),
    #[error("measured value at position {0} is not positive")]
    NonPositiveMeasured(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("rank correlation undefined: {0} values are all equal")]
    ConstantRanks(&'static str),
    #[error("weights do not match pairs")]
    Weights,
}

/// `(measured, estimated)`.
pub type Pair = (f64, f64);

fn check(pairs: &[Pair], percentage: bool) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (i, &(m, e)) in pairs.iter().enumerate() {
        if !m.is_finite() || !e.is_finite() {
            return Err(MetricError::NonFinite(i));
        }
        if percentage && m <= 0.0 {
            return Err(MetricError::NonPositiveMeasured(i));
        }
    }
    Ok(())
}

/// Mean absolute error, in the unit of the inputs.
pub fn mae(pairs: &[Pair]) -> Result<f64, MetricError> {
    check(pairs, false)?;
    Ok(pairs.iter().map(|(m, e)| (e - m).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Mean absolute percentage error, in percent.
pub fn mape(pairs: &[Pair]) -> Result<f64, MetricError> {
    check(pairs, true)?;
    Ok(100.0 * pairs.iter().map(|(m, e)| ((e - m) / m).abs()).sum::<f64>() / pairs.len() as f64)
}

/// MAPE with each pair weighted by its measured value.
pub fn mape_time_weighted(pairs: &[Pair]) -> Result<f64, MetricError> {
    check(pairs, true)?;
    let total: f64 = pairs.iter().map(|(m, _)| m).sum();
    Ok(100.0 * pairs.iter().map(|(m, e)| (e - m).abs()).sum::<f64>() / total)
}

/// Root mean square percentage error, in percent.
pub fn rmspe(pairs: &[Pair]) -> Result<f64, MetricError> {
    check(pairs, true)?;
    let ms = pairs.iter().map(|(m, e)| ((e - m) / m).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(100.0 * ms.sqrt())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(pairs: &[Pair]) -> Result<f64, MetricError> {
    check(pairs, false)?;
    if pairs.len() < 2 {
        return Err(MetricError::TooFew(2));
    }
    let rm = average_ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let re = average_ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    if rm.iter().all(|&r| r == rm[0]) {
        return Err(MetricError::ConstantRanks("measured"));
    }
    pearson(&rm, &re).ok_or(MetricError::ConstantRanks("estimated"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_labels(truth: &[bool], predicted: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A score with a flag set when its denominator vanished and the value was
/// defined by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

/// `2TP / (2TP + FP + FN)`; 0 when there are no positives at all.
pub fn f1(c: &Confusion) -> Score {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        Score {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Score {
            value: 2.0 * c.tp as f64 / den as f64,
            degenerate: false,
        }
    }
}

/// Matthews correlation coefficient; 0 when a marginal is empty.
pub fn mcc(c: &Confusion) -> Score {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        Score {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Score {
            value: (tp * tn - fp * fn_) / den.sqrt(),
            degenerate: false,
        }
    }
}

/// Aggregate accuracy block over a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    /// Milliseconds, for pairs given in seconds.
    pub mae_ms: f64,
    pub mape: f64,
    pub rmspe: f64,
    pub spearman: Option<f64>,
}

pub fn accuracy(pairs: &[Pair]) -> Result<Accuracy, MetricError> {
    Ok(Accuracy {
        n: pairs.len(),
        mae_ms: 1e3 * mae(pairs)?,
        mape: mape(pairs)?,
        rmspe: rmspe(pairs)?,
        spearman: spearman(pairs).ok(),
    })
}
