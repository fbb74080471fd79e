use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use stacked_latency::bench::{
    generate_configs, read_records, read_samples, run_benchmark, write_configs, write_records, write_samples,
    SweepSpec,
};
use stacked_latency::campaign::{run_campaign, CampaignOptions};
use stacked_latency::estimate::{estimate_network, Family};
use stacked_latency::evaluate::evaluate as evaluate_networks;
use stacked_latency::generator::{fit_platform_model, FitOptions};
use stacked_latency::graph::{parse_graph, NetworkGraph};
use stacked_latency::models::{load_platform_model, save_platform_model, PlatformModel};
use stacked_latency::oracle::{OracleDevice, OracleSpec, PRESETS};
use stacked_latency::synth::{nas_family, nas_network, random_network, random_networks, NAS_FAMILY_SIZE};

use crate::error::CliError;
use crate::{BenchArgs, EstimateArgs, EvaluateArgs, FitArgs, OracleMakeArgs, SynthArgs};

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// An oracle file when `name` is a path, otherwise a preset.
fn load_oracle(name: &str) -> Result<OracleSpec, CliError> {
    let path = Path::new(name);
    if path.is_file() {
        return Ok(OracleSpec::load(path)?);
    }
    OracleSpec::preset(name).ok_or_else(|| {
        CliError::Usage(format!(
            "oracle `{name}` is neither a file nor a preset ({})",
            PRESETS.join(", ")
        ))
    })
}

fn load_model(path: &Path) -> Result<PlatformModel, CliError> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(load_platform_model(path)?)
}

fn load_graph(path: &Path) -> Result<NetworkGraph, CliError> {
    Ok(parse_graph(&read_text(path)?)?)
}

pub fn bench(a: BenchArgs, stamp: bool) -> Result<(), CliError> {
    let device = OracleDevice::new(load_oracle(&a.device.oracle)?)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let (run, mut doc) = match &a.sweep {
        Some(path) => {
            let spec: SweepSpec =
                serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let unrolling = match &a.model {
                Some(m) => load_model(m)?.constants.unrolling,
                None => None,
            };
            let table = generate_configs(&spec, unrolling.as_ref())?;
            write_configs(&table, create(&a.out.join("configs.csv"))?)?;
            let run = run_benchmark(&table, &device, a.device.iters, a.device.seed, a.byte_width);
            (run, json!({ "sweep": spec, "configs": table.len() }))
        }
        None => {
            let opts = CampaignOptions {
                n_iter: a.device.iters,
                seed: a.device.seed,
                byte_width: a.byte_width,
                dataset: a.dataset.into(),
                surface_configs: a.surface_configs,
                micro_configs: a.micro_configs,
                fusion_configs: a.fusion_configs,
                ..Default::default()
            };
            let res = run_campaign(&device, &opts)?;
            let doc = json!({
                "options": opts,
                "sweeps": res.sweeps,
                "preliminary": res.preliminary,
            });
            (res.run, doc)
        }
    };
    write_records(&run.records, create(&a.out.join("records.csv"))?)?;
    write_samples(&run.samples, create(&a.out.join("samples.csv"))?)?;
    doc["device"] = json!(device.spec.name);
    doc["records"] = json!(run.records.len());
    doc["samples"] = json!(run.samples.len());
    doc["failures"] = json!(run.failures);
    if stamp {
        doc["created_at"] = json!(now());
    }
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    write_text(&a.out.join("bench.json"), &text)?;
    println!(
        "{} records, {} fusion samples, {} failed configs -> {}",
        run.records.len(),
        run.samples.len(),
        run.failures.len(),
        a.out.display()
    );
    Ok(())
}

pub fn fit(a: FitArgs, stamp: bool) -> Result<(), CliError> {
    let records = read_records(open(&a.records)?)?;
    let samples = match &a.samples {
        Some(p) => read_samples(open(p)?)?,
        None => Vec::new(),
    };
    let mut opts = FitOptions {
        device: a.device.clone(),
        stat_records: a.stat_records.into(),
        byte_width: a.byte_width,
        ..Default::default()
    };
    opts.forest.seed = a.seed;
    let (mut model, summary) = fit_platform_model(&records, &samples, &opts)?;
    if stamp {
        model.metadata.fitted_at = Some(now());
    }
    model.metadata.provenance = std::iter::once(&a.records)
        .chain(a.samples.as_ref())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    save_platform_model(&model, &a.out)?;
    if let Some(p) = &a.summary {
        write_text(p, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    }
    match &summary.unrolling {
        Some(u) => println!(
            "array {:?} on {:?}, alpha {:?}",
            u.s,
            u.axes.iter().map(|a| a.as_str()).collect::<Vec<_>>(),
            u.alpha.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
        None => println!("array dimensions not fitted"),
    }
    println!(
        "p_peak {:.4e} ops/s, b_peak {:.4e} B/s, {} statistical models, {} fusion classifiers -> {}",
        summary.peaks.p_peak,
        summary.peaks.b_peak,
        model.u_stat_models.len(),
        model.fusion_models.len(),
        a.out.display()
    );
    Ok(())
}

pub fn estimate(a: EstimateArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let graph = load_graph(&a.graph)?;
    let family: Family = a.family.into();
    let report = estimate_network(&graph, &model, family)?;
    if a.table {
        print!("{}", report.to_table());
    }
    if let Some(p) = &a.out {
        write_text(p, &report.to_json())?;
    }
    println!(
        "total {:.6} ms ({}, {} kernels, {} fallback)",
        1e3 * report.total_sec,
        family.as_str(),
        report.layers.len(),
        report.fallback_count
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let device = OracleDevice::new(load_oracle(&a.device.oracle)?)?;
    let model = load_model(&a.model)?;
    let mut networks = Vec::new();
    for p in &a.graph {
        let name = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        networks.push((name, load_graph(p)?));
    }
    for (i, g) in random_networks(a.synthetic, a.synthetic_seed).into_iter().enumerate() {
        networks.push((format!("synthetic{i:03}"), g));
    }
    if a.nas {
        for (i, g) in nas_family().into_iter().enumerate() {
            networks.push((format!("nas{i:02}"), g));
        }
    }
    if networks.is_empty() {
        return Err(CliError::Usage("no networks: pass --graph, --synthetic or --nas".into()));
    }
    let families: Vec<Family> = if a.family.is_empty() {
        Family::ALL.to_vec()
    } else {
        a.family.iter().map(|&f| f.into()).collect()
    };
    let result = evaluate_networks(&networks, &device, &model, &families, a.device.iters, a.device.seed)?;
    print!("{}", result.to_table());
    if let Some(p) = &a.out {
        write_text(p, &result.to_json())?;
    }
    if let Some(p) = &a.plot {
        result.write_plot_csv(create(p)?)?;
    }
    Ok(())
}

pub fn oracle_make(a: OracleMakeArgs) -> Result<(), CliError> {
    let mut spec = OracleSpec::preset(&a.preset)
        .ok_or_else(|| CliError::Usage(format!("unknown preset `{}` ({})", a.preset, PRESETS.join(", "))))?;
    if let Some(n) = a.noise {
        spec.noise_rel_sigma = n;
    }
    if !a.s.is_empty() {
        spec.s = a.s;
    }
    if !a.alpha.is_empty() {
        spec.alpha = a.alpha;
    }
    spec.validate()?;
    emit(a.out.as_ref(), &spec.to_json())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let graph = match a.nas {
        Some(i) if i < NAS_FAMILY_SIZE => nas_network(i),
        Some(i) => {
            return Err(CliError::Usage(format!(
                "family member {i} out of range (0..{NAS_FAMILY_SIZE})"
            )))
        }
        None => random_network(a.seed),
    };
    emit(a.out.as_ref(), &graph.to_json())
}
