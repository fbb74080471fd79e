//! Recovery of the array dimensions `s`, efficiency coefficients `alpha` and
//! peak constants from layer sweep measurements.
//!
//! The search is exhaustive over a discrete grid of `s` candidates per axis.
//! For each assignment the coefficients are fitted by projected coordinate
//! descent with a golden-section line search on `[0, 1]`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::FeatureVector;
use crate::models::{fragmentation, u_eff, Axis, Unrolling};

use super::LearnError;

pub const DEFAULT_S_CANDIDATES: [u32; 16] = [1, 2, 3, 4, 6, 8, 12, 14, 16, 24, 32, 48, 64, 96, 128, 256];
pub const MAX_AXES: usize = 3;
pub const MIN_DISTINCT_VALUES: usize = 8;

/// One averaged measurement of a single, unfused layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedLayer {
    pub features: FeatureVector,
    pub bytes: u64,
    pub time_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnrollingOptions {
    /// Records whose data term reaches this fraction of the measured time
    /// are treated as bandwidth-limited and ignored by the efficiency fit.
    pub bandwidth_margin: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Fit a least-squares scale on the modelled efficiency, so that a
    /// preliminary peak inflated by noise does not bias the choice of `s`.
    #[serde(default = "enabled")]
    pub free_scale: bool,
}

fn enabled() -> bool {
    true
}

impl Default for UnrollingOptions {
    fn default() -> Self {
        UnrollingOptions {
            bandwidth_margin: 0.9,
            tolerance: 1e-9,
            max_iter: 200,
            free_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrollingFit {
    pub axes: Vec<Axis>,
    pub s: Vec<u32>,
    pub alpha: Vec<f64>,
    pub p_peak_prelim: f64,
    pub b_peak_prelim: f64,
    pub p_peak_final: f64,
    pub b_peak_final: f64,
    pub residual_mse: f64,
    pub n_fit_points: usize,
}

impl UnrollingFit {
    pub fn unrolling(&self) -> Unrolling {
        Unrolling {
            axes: self.axes.clone(),
            s: self.s.clone(),
            alpha: self.alpha.clone(),
        }
    }
}

struct Evaluated {
    s: Vec<u32>,
    alpha: Vec<f64>,
    mse: f64,
}

pub fn fit_unrolling(
    records: &[TimedLayer],
    axes: &[Axis],
    s_candidates: &[u32],
    opts: &UnrollingOptions,
) -> Result<UnrollingFit, LearnError> {
    if records.is_empty() {
        return Err(LearnError::EmptyData);
    }
    if axes.is_empty() || axes.len() > MAX_AXES {
        return Err(LearnError::Shape(format!(
            "between 1 and {MAX_AXES} candidate axes required, got {}",
            axes.len()
        )));
    }
    let candidates: Vec<u32> = s_candidates
        .iter()
        .copied()
        .filter(|&s| s > 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if candidates.is_empty() {
        return Err(LearnError::Shape("no s candidates".into()));
    }
    if records
        .iter()
        .any(|r| !(r.time_sec > 0.0 && r.time_sec.is_finite()))
    {
        return Err(LearnError::NonFinite);
    }
    for &axis in axes {
        let distinct: BTreeSet<u32> = records.iter().map(|r| axis.value(&r.features)).collect();
        if distinct.len() < MIN_DISTINCT_VALUES {
            return Err(LearnError::InsufficientCoverage {
                axis: axis.to_string(),
                distinct: distinct.len(),
                needed: MIN_DISTINCT_VALUES,
            });
        }
    }

    let p_pre = records
        .iter()
        .map(|r| r.features.num_ops as f64 / r.time_sec)
        .fold(0.0, f64::max);
    let b_pre = records
        .iter()
        .map(|r| r.bytes as f64 / r.time_sec)
        .fold(0.0, f64::max);

    let fit_set: Vec<&TimedLayer> = records
        .iter()
        .filter(|r| r.bytes as f64 / (b_pre * r.time_sec) < opts.bandwidth_margin)
        .collect();
    if fit_set.is_empty() {
        return Err(LearnError::DegenerateFit("no compute-limited records".into()));
    }
    let measured: Vec<f64> = fit_set
        .iter()
        .map(|r| r.features.num_ops as f64 / (r.time_sec * p_pre))
        .collect();

    // frag[a][k][i]: fragmentation of record i on axis a with candidate k
    let frag: Vec<Vec<Vec<f64>>> = axes
        .iter()
        .map(|&axis| {
            candidates
                .iter()
                .map(|&s| {
                    fit_set
                        .iter()
                        .map(|r| fragmentation(axis.value(&r.features) as f64, s))
                        .collect()
                })
                .collect()
        })
        .collect();

    let n_axes = axes.len();
    let total = candidates.len().pow(n_axes as u32);
    let evaluated: Vec<Evaluated> = (0..total)
        .into_par_iter()
        .map(|mut code| {
            let mut idx = vec![0usize; n_axes];
            for slot in idx.iter_mut().rev() {
                *slot = code % candidates.len();
                code /= candidates.len();
            }
            let factors: Vec<&[f64]> = idx
                .iter()
                .enumerate()
                .map(|(a, &k)| frag[a][k].as_slice())
                .collect();
            let s: Vec<u32> = idx.iter().map(|&k| candidates[k]).collect();
            let (alpha, mse) = fit_alpha(&factors, &s, &measured, opts);
            Evaluated { s, alpha, mse }
        })
        .collect();

    let best = select(&evaluated).ok_or_else(|| LearnError::DegenerateFit("no finite residual".into()))?;
    let unrolling = Unrolling {
        axes: axes.to_vec(),
        s: best.s.clone(),
        alpha: best.alpha.clone(),
    };

    let aligned_peak = records
        .iter()
        .filter(|r| unrolling.efficiency(&r.features) >= 1.0 - 1e-12)
        .map(|r| r.features.num_ops as f64 / r.time_sec)
        .fold(0.0, f64::max);
    let p_final = if aligned_peak > 0.0 {
        aligned_peak
    } else {
        records
            .iter()
            .map(|r| r.features.num_ops as f64 / (r.time_sec * unrolling.efficiency(&r.features)))
            .fold(0.0, f64::max)
    };

    Ok(UnrollingFit {
        axes: axes.to_vec(),
        s: best.s.clone(),
        alpha: best.alpha.clone(),
        p_peak_prelim: p_pre,
        b_peak_prelim: b_pre,
        p_peak_final: p_final,
        b_peak_final: b_pre,
        residual_mse: best.mse,
        n_fit_points: fit_set.len(),
    })
}

/// Minimum MSE; near-ties prefer the smaller PE count, then smaller `s`.
fn select(all: &[Evaluated]) -> Option<&Evaluated> {
    let min = all
        .iter()
        .map(|e| e.mse)
        .filter(|m| m.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let tol = 1e-12 + 1e-6 * min;
    all.iter()
        .filter(|e| e.mse <= min + tol)
        .min_by(|a, b| {
            let pa: u64 = a.s.iter().map(|&v| v as u64).product();
            let pb: u64 = b.s.iter().map(|&v| v as u64).product();
            pa.cmp(&pb).then_with(|| a.s.cmp(&b.s))
        })
}

fn mse_of(factors: &[&[f64]], alpha: &[f64], measured: &[f64], free_scale: bool) -> f64 {
    let n = measured.len();
    let model: Vec<f64> = (0..n)
        .map(|i| {
            factors
                .iter()
                .enumerate()
                .fold(1.0, |m, (a, f)| m / (alpha[a] + f[i] * (1.0 - alpha[a])))
        })
        .collect();
    let scale = if free_scale {
        let num: f64 = model.iter().zip(measured).map(|(m, u)| m * u).sum();
        let den: f64 = model.iter().map(|m| m * m).sum();
        num / den
    } else {
        1.0
    };
    model
        .iter()
        .zip(measured)
        .map(|(m, u)| (u - scale * m).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Coordinate descent over alpha in [0, 1]^A. Axes with `s = 1` cannot
/// fragment and report alpha = 1.
fn fit_alpha(factors: &[&[f64]], s: &[u32], measured: &[f64], opts: &UnrollingOptions) -> (Vec<f64>, f64) {
    let n_axes = factors.len();
    let mut alpha: Vec<f64> = s.iter().map(|&v| if v == 1 { 1.0 } else { 0.5 }).collect();
    let free: Vec<usize> = (0..n_axes).filter(|&a| s[a] > 1).collect();
    if free.is_empty() {
        let mse = mse_of(factors, &alpha, measured, opts.free_scale);
        return (alpha, mse);
    }
    let mut current = mse_of(factors, &alpha, measured, opts.free_scale);
    for _ in 0..opts.max_iter {
        let mut max_step: f64 = 0.0;
        for &a in &free {
            let before = alpha[a];
            let objective = |v: f64| {
                let mut trial = alpha.clone();
                trial[a] = v;
                mse_of(factors, &trial, measured, opts.free_scale)
            };
            let (mut best_v, mut best_f) = golden_section(&objective, 0.0, 1.0, opts.tolerance);
            for edge in [0.0, 1.0] {
                let fe = objective(edge);
                if fe < best_f {
                    best_f = fe;
                    best_v = edge;
                }
            }
            if best_f <= current {
                alpha[a] = best_v;
                current = best_f;
            }
            max_step = max_step.max((alpha[a] - before).abs());
        }
        if max_step < opts.tolerance {
            break;
        }
    }
    (alpha, current)
}

fn golden_section(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// MSE of a given unrolling against measured efficiency, for diagnostics.
pub fn efficiency_mse(records: &[TimedLayer], unrolling: &Unrolling, p_peak: f64) -> f64 {
    let n = records.len().max(1) as f64;
    records
        .iter()
        .map(|r| {
            let measured = r.features.num_ops as f64 / (r.time_sec * p_peak);
            let model = u_eff(&unrolling.mapped(&r.features), &unrolling.s, &unrolling.alpha);
            (measured - model).powi(2)
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{data_volume, layer_features, LayerSpec};

    /// Independent reference time: plain refined roofline with the
    /// efficiency written out term by term.
    fn truth(layer: &LayerSpec, s: [u32; 2], alpha: [f64; 2], p: f64, b: f64) -> f64 {
        let mut eff = 1.0;
        for (x, (si, ai)) in [layer.channels, layer.filters].iter().zip(s.iter().zip(alpha)) {
            let tiles = (*x as f64 / *si as f64).ceil();
            let used = *x as f64 / (tiles * *si as f64);
            eff *= 1.0 / (ai + (1.0 - ai) / used);
        }
        let ops = layer_features(layer).num_ops as f64;
        let bytes = data_volume(layer, 1).unwrap().total() as f64;
        (ops / (p * eff)).max(bytes / b)
    }

    fn sweep(s: [u32; 2], alpha: [f64; 2]) -> Vec<TimedLayer> {
        let mut out = Vec::new();
        for pin in [32u32, 96, 200] {
            for v in 1..=80u32 {
                for l in [
                    LayerSpec::conv2d("c", 28, 28, v, pin, 3, 1),
                    LayerSpec::conv2d("c", 28, 28, pin, v, 3, 1),
                ] {
                    out.push(TimedLayer {
                        features: layer_features(&l),
                        bytes: data_volume(&l, 1).unwrap().total(),
                        time_sec: truth(&l, s, alpha, 1e12, 1e10),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn recovers_noiseless_ground_truth() {
        let recs = sweep([16, 12], [0.0, 0.0]);
        let fit = fit_unrolling(&recs, &[Axis::C, Axis::F], &DEFAULT_S_CANDIDATES, &Default::default()).unwrap();
        assert_eq!(fit.s, vec![16, 12]);
        assert!(fit.alpha.iter().all(|a| a.abs() < 1e-6), "{:?}", fit.alpha);
        assert!((fit.p_peak_final / 1e12 - 1.0).abs() < 1e-3);
        assert!(fit.residual_mse < 1e-9);
    }

    #[test]
    fn unit_array_prefers_smallest_s() {
        let recs = sweep([1, 1], [0.0, 0.0]);
        let fit = fit_unrolling(&recs, &[Axis::C, Axis::F], &DEFAULT_S_CANDIDATES, &Default::default()).unwrap();
        assert_eq!(fit.s, vec![1, 1]);
    }

    #[test]
    fn full_alpha_eliminates_penalty() {
        let recs = sweep([16, 12], [1.0, 1.0]);
        let fit = fit_unrolling(&recs, &[Axis::C, Axis::F], &DEFAULT_S_CANDIDATES, &Default::default()).unwrap();
        assert_eq!(fit.s, vec![1, 1]);
        assert_eq!(fit.alpha, vec![1.0, 1.0]);
    }

    #[test]
    fn coverage_is_checked() {
        let recs: Vec<TimedLayer> = sweep([16, 12], [0.0, 0.0])
            .into_iter()
            .filter(|r| r.features.c <= 4 || r.features.c == 32)
            .collect();
        let err = fit_unrolling(&recs, &[Axis::C], &DEFAULT_S_CANDIDATES, &Default::default()).unwrap_err();
        assert!(matches!(err, LearnError::InsufficientCoverage { .. }));
    }
}
