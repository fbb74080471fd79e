//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use stacked_latency::campaign::{run_campaign, CampaignOptions, CampaignResult};
use stacked_latency::estimate::{apply_mapping, estimate_network, Family};
use stacked_latency::evaluate::evaluate;
use stacked_latency::generator::{fit_platform_model, fusion_holdout, FitOptions, FitSummary};
use stacked_latency::graph::{FeatureVector, LayerSpec, NetworkGraph};
use stacked_latency::learn::{fit_forest, Dataset, ForestHyper};
use stacked_latency::metrics::{f1, mae, mape, mcc, rmspe, spearman, Confusion};
use stacked_latency::models::{
    mixed_time, refined_time, roofline_time, statistical_time, u_eff, Axis, Peaks, PlatformModel, Unrolling,
};
use stacked_latency::oracle::{ideal_network_time, OracleDevice, OracleSpec};
use stacked_latency::synth::{nas_family, random_networks};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: u32, title: &str, o: &Outcome) -> bool {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {n} {title}: {}", o.detail);
    o.pass
}

fn fit_device(spec: OracleSpec, seed: u64) -> (CampaignResult, PlatformModel, FitSummary, Duration) {
    let start = Instant::now();
    let device = OracleDevice::new(spec).expect("valid oracle");
    let opts = CampaignOptions {
        seed,
        ..Default::default()
    };
    let campaign = run_campaign(&device, &opts).expect("campaign runs");
    let fit_opts = FitOptions {
        device: device.spec.name.clone(),
        ..Default::default()
    };
    let (model, summary) = fit_platform_model(&campaign.run.records, &campaign.run.samples, &fit_opts).expect("fit");
    (campaign, model, summary, start.elapsed())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1(summary: &FitSummary, elapsed: Duration) -> Outcome {
    let truth = OracleSpec::reference();
    let Some(fit) = &summary.unrolling else {
        return Outcome {
            pass: false,
            detail: "no array dimensions fitted".into(),
        };
    };
    let axes_ok = fit.axes == truth.axis_map;
    let s_ok = fit.s == truth.s;
    let alpha_err = fit
        .alpha
        .iter()
        .zip(&truth.alpha)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let p_err = rel(summary.peaks.p_peak, truth.p_peak);
    let b_err = rel(summary.peaks.b_peak, truth.b_peak);
    let pass = axes_ok && s_ok && alpha_err <= 0.02 && p_err <= 0.005 && b_err <= 0.005 && elapsed.as_secs_f64() < 60.0;
    Outcome {
        pass,
        detail: format!(
            "s={:?} on {:?} alpha={:?} (max err {alpha_err:.2e}) p_peak err {p_err:.2e} b_peak err {b_err:.2e} in {:.1}s",
            fit.s,
            fit.axes.iter().map(|a| a.as_str()).collect::<Vec<_>>(),
            fit.alpha.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_2(model: &PlatformModel) -> Outcome {
    let spec = OracleSpec::reference();
    let mut worst: f64 = 0.0;
    let nets = random_networks(20, 2024);
    for g in &nets {
        let est = estimate_network(g, model, Family::Refined).expect("estimate").total_sec;
        worst = worst.max(rel(est, ideal_network_time(g, &spec)));
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("{} random networks, worst relative error {worst:.3e}", nets.len()),
    }
}

fn named(graphs: Vec<NetworkGraph>, stem: &str) -> Vec<(String, NetworkGraph)> {
    graphs
        .into_iter()
        .enumerate()
        .map(|(i, g)| (format!("{stem}{i:02}"), g))
        .collect()
}

fn criterion_3(model: &PlatformModel, elapsed: Duration) -> Outcome {
    let start = Instant::now();
    let device = OracleDevice::new(OracleSpec::noisy()).expect("valid oracle");
    let nets = named(random_networks(50, 90_000), "heldout");
    let res = evaluate(&nets, &device, model, &Family::ALL, 20, 31).expect("evaluate");
    let m = |f| res.aggregate(f).expect("family evaluated").network.mape;
    let (mixed, stat, roof, refined) = (
        m(Family::Mixed),
        m(Family::Statistical),
        m(Family::Roofline),
        m(Family::Refined),
    );
    let total = elapsed + start.elapsed();
    Outcome {
        pass: mixed <= stat && stat <= roof && mixed <= 10.0 && total.as_secs_f64() < 600.0,
        detail: format!(
            "network MAPE mixed {mixed:.2}% statistical {stat:.2}% roofline {roof:.2}% (refined {refined:.2}%) on {} networks in {:.1}s",
            nets.len(),
            total.as_secs_f64()
        ),
    }
}

fn criterion_4(model: &PlatformModel) -> Outcome {
    let device = OracleDevice::new(OracleSpec::noisy()).expect("valid oracle");
    let nets = named(nas_family(), "nas");
    let res = evaluate(&nets, &device, model, &[Family::Mixed], 20, 77).expect("evaluate");
    let rho = res.aggregate(Family::Mixed).and_then(|a| a.network.spearman);
    Outcome {
        pass: rho.is_some_and(|r| r >= 0.98),
        detail: format!("Spearman rho {} over {} networks", rho.map_or("undefined".into(), |r| format!("{r:.4}")), nets.len()),
    }
}

fn criterion_5(campaign: &CampaignResult, model: &PlatformModel) -> Outcome {
    let c = fusion_holdout(&campaign.run.samples, &model.hard_fusion, 0.2, 5, Default::default()).expect("holdout");
    let m = mcc(&c);
    Outcome {
        pass: !m.degenerate && m.value >= 0.95,
        detail: format!(
            "MCC {:.4} F1 {:.4} on {} held-out samples (tp {} fp {} fn {} tn {})",
            m.value,
            f1(&c).value,
            c.total(),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        ),
    }
}

fn check(failures: &mut Vec<String>, name: &str, ok: bool) {
    if !ok {
        failures.push(name.to_string());
    }
}

fn criterion_6(model: &PlatformModel) -> Outcome {
    let mut failures = Vec::new();
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let dims = prop::collection::vec((1u32..600, 1u32..64, 0.0f64..=1.0), 1..4);

    let domain = runner.run(&dims, |v| {
        let x: Vec<f64> = v.iter().map(|t| t.0 as f64).collect();
        let s: Vec<u32> = v.iter().map(|t| t.1).collect();
        let a: Vec<f64> = v.iter().map(|t| t.2).collect();
        let u = u_eff(&x, &s, &a);
        prop_assert!(u > 0.0 && u <= 1.0);
        let aligned: Vec<f64> = v.iter().map(|t| (t.0 * t.1) as f64).collect();
        prop_assert_eq!(u_eff(&aligned, &s, &a), 1.0);
        prop_assert_eq!(u_eff(&x, &s, &vec![1.0; s.len()]), 1.0);
        Ok(())
    });
    check(&mut failures, "u_eff domain/identity", domain.is_ok());

    let cliff = runner.run(&(2u32..64, 1u32..8, 0.0f64..0.99), |(s, m, a)| {
        let at = u_eff(&[(s * m) as f64], &[s], &[a]);
        let past = u_eff(&[(s * m + 1) as f64], &[s], &[a]);
        prop_assert!(past < at);
        Ok(())
    });
    check(&mut failures, "u_eff cliff", cliff.is_ok());

    let example = u_eff(&[12.0, 6.0], &[16, 12], &[0.0, 0.0]);
    check(&mut failures, "worked example", (example - 0.375).abs() < 1e-15);

    // every family equals the roofline at unit efficiencies
    let peaks = Peaks {
        p_peak: 1e12,
        b_peak: 1e10,
    };
    let unit = Unrolling::new(vec![Axis::C, Axis::F], vec![16, 12], vec![0.3, 0.1]).expect("unrolling");
    let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64; FeatureVector::LEN]).collect();
    let ones = [1.0; 4];
    let forest = fit_forest(Dataset::new(&rows, &ones).expect("data"), ForestHyper::default()).expect("forest");
    let reduction = runner.run(&(1u32..20, 1u32..20, 1u32..64, 1u32..8), |(cm, fm, h, k)| {
        let layer = LayerSpec::conv2d("l", h, h, 16 * cm, 12 * fm, k, 1);
        let x = stacked_latency::graph::layer_features(&layer);
        let ops = stacked_latency::graph::op_count(&layer) as f64;
        let bytes = stacked_latency::graph::data_volume(&layer, 1).expect("volume").total() as f64;
        let base = roofline_time(ops, bytes, &peaks).expect("roofline").time();
        for t in [
            refined_time(ops, bytes, &x, &unit, &peaks),
            statistical_time(ops, bytes, &x, &forest, &peaks),
            mixed_time(ops, bytes, &x, &unit, &forest, &peaks),
        ] {
            prop_assert_eq!(t.expect("time").time(), base);
        }
        Ok(())
    });
    check(&mut failures, "family reduction", reduction.is_ok());

    let pairs: Vec<(f64, f64)> = (1..=8).map(|i| (i as f64, 3.0 * i as f64)).collect();
    let reversed: Vec<(f64, f64)> = (1..=8).map(|i| (i as f64, -(i as f64))).collect();
    let same: Vec<(f64, f64)> = (1..=8).map(|i| (i as f64, i as f64)).collect();
    check(&mut failures, "rho=+1", spearman(&pairs) == Ok(1.0));
    check(&mut failures, "rho=-1", spearman(&reversed) == Ok(-1.0));
    check(&mut failures, "zero error", mae(&same) == Ok(0.0) && mape(&same) == Ok(0.0) && rmspe(&same) == Ok(0.0));
    let perfect = Confusion {
        tp: 40,
        fp: 0,
        fn_: 0,
        tn: 60,
    };
    let inverted = Confusion {
        tp: 0,
        fp: 60,
        fn_: 40,
        tn: 0,
    };
    check(&mut failures, "mcc=+1", mcc(&perfect).value == 1.0 && f1(&perfect).value == 1.0);
    check(&mut failures, "mcc=-1", mcc(&inverted).value == -1.0);

    for (i, g) in random_networks(20, 555).iter().enumerate() {
        let back = NetworkGraph::from_json(&g.to_json()).expect("parse");
        check(&mut failures, &format!("graph round trip {i}"), back.to_json() == g.to_json());
        let once = apply_mapping(g, model).expect("mapping").graph;
        let twice = apply_mapping(&once, model).expect("mapping").graph;
        check(&mut failures, &format!("fusion idempotence {i}"), once.to_json() == twice.to_json());
        let a = estimate_network(g, model, Family::Mixed).expect("estimate").to_json();
        let b = estimate_network(g, model, Family::Mixed).expect("estimate").to_json();
        check(&mut failures, &format!("report determinism {i}"), a == b);
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "u_eff, family reduction, worked example, metric identities, round trip, idempotence, determinism".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}

fn criterion_7() -> Outcome {
    let tol = 1e-12;
    let single = [(10.0, 12.0)];
    let ranks = [(1.0, 3.0), (2.0, 1.0), (3.0, 2.0)];
    let c = Confusion {
        tp: 90,
        fp: 10,
        fn_: 10,
        tn: 90,
    };
    let values = [
        ("MAE", mae(&single).unwrap_or(f64::NAN), 2.0),
        ("MAPE", mape(&single).unwrap_or(f64::NAN), 20.0),
        ("RMSPE", rmspe(&single).unwrap_or(f64::NAN), 20.0),
        ("rho", spearman(&ranks).unwrap_or(f64::NAN), -0.5),
        ("F1", f1(&c).value, 0.9),
        ("MCC", mcc(&c).value, 0.8),
    ];
    let bad: Vec<String> = values
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() <= tol))
        .map(|(n, got, want)| format!("{n} {got} != {want}"))
        .collect();
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            values
                .iter()
                .map(|(n, got, _)| format!("{n}={got}"))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            bad.join("; ")
        },
    }
}

fn main() -> ExitCode {
    let (_, clean, clean_summary, clean_time) = fit_device(OracleSpec::reference(), 1);
    let (noisy_campaign, noisy, _, noisy_time) = fit_device(OracleSpec::noisy(), 2);
    let results = [
        report(1, "oracle recovery", &criterion_1(&clean_summary, clean_time)),
        report(2, "end-to-end equivalence", &criterion_2(&clean)),
        report(3, "family ordering under noise", &criterion_3(&noisy, noisy_time)),
        report(4, "fidelity", &criterion_4(&noisy)),
        report(5, "fusion classification", &criterion_5(&noisy_campaign, &noisy)),
        report(6, "property suites", &criterion_6(&clean)),
        report(7, "metric spot values", &criterion_7()),
    ];
    if results.iter().all(|&p| p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
