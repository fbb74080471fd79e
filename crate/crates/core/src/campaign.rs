//! The standard benchmark campaign: sweeps that expose the array dimensions,
//! a unit-efficiency surface, per-kind micro-kernels and fusion templates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{
    generate_configs, range_step, run_benchmark, BenchError, BenchRun, ParamRanges, SweepMode, SweepSpec, Template,
};
use crate::generator::standalone_records;
use crate::graph::{LayerKind, PoolKind};
use crate::learn::{fit_unrolling, LearnError, TimedLayer, UnrollingFit, UnrollingOptions, DEFAULT_S_CANDIDATES};
use crate::models::Axis;
use crate::oracle::Device;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("array dimensions could not be determined: {0}")]
    Unrolling(#[from] LearnError),
}

/// Which sweeps feed the statistical model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceDataset {
    /// Points at unit analytic efficiency.
    #[default]
    Surface,
    /// The same points with Gaussian parameter noise.
    Noisy,
    /// Both.
    Union,
}

/// Channel counts of the fusion templates; spaced by 8 so that learned
/// thresholds on channel counts fall between neighbouring menu values.
pub const FUSION_CHANNELS: [u32; 13] = [8, 16, 24, 32, 40, 48, 56, 64, 72, 80, 96, 128, 160];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignOptions {
    pub n_iter: u32,
    pub seed: u64,
    pub byte_width: u32,
    pub axes: Vec<Axis>,
    pub s_candidates: Vec<u32>,
    pub unrolling: UnrollingOptions,
    pub dataset: SurfaceDataset,
    /// Largest channel count of the dimension-finding sweeps.
    pub axis_max: u32,
    /// Feature-map height and width of the dimension-finding sweeps.
    pub axis_hw: u32,
    pub surface_configs: usize,
    pub micro_configs: usize,
    pub fusion_configs: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            n_iter: 20,
            seed: 0,
            byte_width: 1,
            axes: vec![Axis::C, Axis::F],
            s_candidates: DEFAULT_S_CANDIDATES.to_vec(),
            unrolling: UnrollingOptions::default(),
            dataset: SurfaceDataset::default(),
            axis_max: 192,
            axis_hw: 224,
            surface_configs: 1500,
            micro_configs: 80,
            fusion_configs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignResult {
    pub run: BenchRun,
    /// Dimension fit of the first phase, used to place the surface sweep.
    pub preliminary: UnrollingFit,
    /// `(sweep label, configs run)`.
    pub sweeps: Vec<(String, usize)>,
}

fn uniform(v: Vec<u32>) -> ParamRanges {
    ParamRanges {
        h: vec![1],
        w: vec![1],
        c: v.clone(),
        f: v,
        k_h: vec![1],
        k_w: vec![1],
        stride: vec![1],
        pool_size: vec![2],
        pool_stride: vec![2],
    }
}

fn with_seed(mut spec: SweepSpec, seed: u64, max: usize) -> SweepSpec {
    spec.seed = seed;
    spec.max_configs = Some(max);
    spec
}

/// Conv2D series over input and output channels. Each series pins the other
/// channel axis at a quarter, half and three quarters of `axis_max` on a
/// large feature map, so that most points are compute-bound and long-running.
pub fn dimension_sweeps(axis_max: u32, hw: u32) -> Vec<SweepSpec> {
    let series = range_step(2, axis_max, 2);
    let pins = vec![axis_max / 4, axis_max / 2, 3 * axis_max / 4];
    let ranges = |c: Vec<u32>, f: Vec<u32>| ParamRanges {
        h: vec![hw],
        w: vec![hw],
        c,
        f,
        k_h: vec![3],
        k_w: vec![3],
        ..uniform(vec![])
    };
    vec![
        SweepSpec::new(LayerKind::Conv2D, Template::Micro, SweepMode::AxisSweep, ranges(series.clone(), pins.clone())),
        SweepSpec::new(LayerKind::Conv2D, Template::Micro, SweepMode::AxisSweep, ranges(pins, series)),
    ]
}

/// Conv2D configurations restricted to multiples of the array dimensions.
pub fn surface_sweep(opts: &CampaignOptions, noisy: bool) -> SweepSpec {
    let v = range_step(4, 512, 4);
    let ranges = ParamRanges {
        h: vec![7, 14, 28, 56],
        w: vec![7, 14, 28, 56],
        c: v.clone(),
        f: v,
        k_h: vec![1, 3],
        k_w: vec![1, 3],
        stride: vec![1, 2],
        ..uniform(vec![])
    };
    let mode = if noisy {
        SweepMode::NoisySurface
    } else {
        SweepMode::EfficiencySurface
    };
    let spec = SweepSpec::new(LayerKind::Conv2D, Template::Micro, mode, ranges);
    with_seed(spec, opts.seed ^ (noisy as u64 + 1), opts.surface_configs)
}

/// One full-grid micro sweep per non-convolution kind.
pub fn micro_sweeps(opts: &CampaignOptions) -> Vec<SweepSpec> {
    let hw = vec![7, 14, 28, 56];
    let ch = range_step(16, 512, 16);
    let spatial = |k: Vec<u32>, stride: Vec<u32>| ParamRanges {
        h: hw.clone(),
        w: hw.clone(),
        c: ch.clone(),
        f: vec![1],
        k_h: k.clone(),
        k_w: k,
        stride,
        ..uniform(vec![])
    };
    let specs = [
        (LayerKind::DepthwiseConv2D, spatial(vec![3], vec![1, 2])),
        (LayerKind::MaxPool, spatial(vec![2, 3], vec![1, 2])),
        (LayerKind::AvgPool, spatial(vec![2, 3], vec![1, 2])),
        (LayerKind::GlobalAvgPool, spatial(vec![1], vec![1])),
        (LayerKind::BatchNorm, spatial(vec![1], vec![1])),
        (LayerKind::Activation, spatial(vec![1], vec![1])),
        (LayerKind::ElemwiseAdd, spatial(vec![1], vec![1])),
        (LayerKind::Concat, spatial(vec![1], vec![1])),
        (
            LayerKind::FullyConnected,
            ParamRanges {
                c: range_step(64, 4096, 64),
                f: vec![10, 100, 256, 1000, 4096],
                ..uniform(vec![])
            },
        ),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (kind, ranges))| {
            let spec = SweepSpec::new(kind, Template::Micro, SweepMode::FullGrid, ranges);
            with_seed(spec, opts.seed.wrapping_add(100 + i as u64), opts.micro_configs)
        })
        .collect()
}

/// Multi-layer templates whose layer chains exercise the fusion rules.
pub fn fusion_sweeps(opts: &CampaignOptions) -> Vec<SweepSpec> {
    let menu = FUSION_CHANNELS.to_vec();
    let conv = ParamRanges {
        h: vec![8, 16, 28],
        w: vec![8, 16, 28],
        c: menu.clone(),
        f: menu,
        k_h: vec![1, 3],
        k_w: vec![1, 3],
        stride: vec![1],
        pool_size: vec![2, 3],
        pool_stride: vec![2],
    };
    let mut out = Vec::new();
    for (i, pool) in [PoolKind::Max, PoolKind::Avg].into_iter().enumerate() {
        let mut spec = SweepSpec::new(LayerKind::Conv2D, Template::Convnet, SweepMode::FullGrid, conv.clone());
        spec.pool_kind = Some(pool);
        out.push(with_seed(spec, opts.seed.wrapping_add(200 + i as u64), opts.fusion_configs));
    }
    let fc = ParamRanges {
        h: vec![7, 14],
        w: vec![7, 14],
        c: vec![32, 64, 128],
        f: vec![10, 100, 1000],
        k_h: vec![3],
        k_w: vec![3],
        ..uniform(vec![])
    };
    let spec = SweepSpec::new(LayerKind::Conv2D, Template::Fcnet, SweepMode::FullGrid, fc);
    out.push(with_seed(spec, opts.seed.wrapping_add(300), opts.fusion_configs));
    out
}

fn label(spec: &SweepSpec) -> String {
    let mode = serde_json::to_value(spec.mode).ok();
    let mode = mode.as_ref().and_then(|v| v.as_str()).unwrap_or("sweep");
    format!("{}/{}/{mode}", spec.template, spec.kind)
}

/// Fits array dimensions from the unfused records of the given kind.
pub fn preliminary_fit(run: &BenchRun, opts: &CampaignOptions) -> Result<UnrollingFit, LearnError> {
    let timed: Vec<TimedLayer> = standalone_records(&run.records)
        .filter(|r| r.kind == LayerKind::Conv2D && r.sweep == SweepMode::AxisSweep)
        .map(|r| TimedLayer {
            features: r.features(),
            bytes: r.bytes,
            time_sec: r.time_sec,
        })
        .collect();
    fit_unrolling(&timed, &opts.axes, &opts.s_candidates, &opts.unrolling)
}

/// Runs the whole campaign against a device.
pub fn run_campaign(device: &dyn Device, opts: &CampaignOptions) -> Result<CampaignResult, CampaignError> {
    let mut sweeps = Vec::new();
    let mut run = BenchRun::default();
    let mut phase = |spec: &SweepSpec, unrolling, run: &mut BenchRun, salt: u64| -> Result<(), CampaignError> {
        let table = generate_configs(spec, unrolling)?;
        log::info!("{}: {} configs", label(spec), table.len());
        sweeps.push((label(spec), table.len()));
        run.extend(run_benchmark(&table, device, opts.n_iter, opts.seed.wrapping_add(salt), opts.byte_width));
        Ok(())
    };

    for spec in dimension_sweeps(opts.axis_max, opts.axis_hw) {
        phase(&spec, None, &mut run, 0)?;
    }
    let preliminary = preliminary_fit(&run, opts)?;
    let u = preliminary.unrolling();
    log::info!("preliminary array dimensions {:?} alpha {:?}", u.s, u.alpha);

    let surfaces: &[bool] = match opts.dataset {
        SurfaceDataset::Surface => &[false],
        SurfaceDataset::Noisy => &[true],
        SurfaceDataset::Union => &[false, true],
    };
    for (i, &noisy) in surfaces.iter().enumerate() {
        phase(&surface_sweep(opts, noisy), Some(&u), &mut run, 1 + i as u64)?;
    }
    for (i, spec) in micro_sweeps(opts).iter().enumerate() {
        phase(spec, None, &mut run, 10 + i as u64)?;
    }
    for (i, spec) in fusion_sweeps(opts).iter().enumerate() {
        phase(spec, None, &mut run, 30 + i as u64)?;
    }
    Ok(CampaignResult {
        run,
        preliminary,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleDevice, OracleSpec};

    #[test]
    fn small_campaign_recovers_dimensions() {
        let device = OracleDevice {
            spec: OracleSpec::reference(),
        };
        let opts = CampaignOptions {
            n_iter: 1,
            surface_configs: 60,
            micro_configs: 10,
            fusion_configs: 30,
            ..Default::default()
        };
        let res = run_campaign(&device, &opts).unwrap();
        assert_eq!(res.preliminary.s, vec![16, 12]);
        assert!(res.run.failures.is_empty());
        assert!(res.run.samples.iter().any(|s| s.follower_kind == LayerKind::MaxPool));
        assert_eq!(res.sweeps.len(), 2 + 1 + 9 + 3);
    }

    #[test]
    fn few_noisy_iterations_recover_dimensions() {
        let device = OracleDevice::new(OracleSpec::preset("noisy").unwrap()).unwrap();
        let opts = CampaignOptions {
            n_iter: 2,
            surface_configs: 0,
            micro_configs: 0,
            fusion_configs: 0,
            ..Default::default()
        };
        let res = run_campaign(&device, &opts).unwrap();
        assert_eq!(res.preliminary.s, vec![16, 12]);
    }
}
