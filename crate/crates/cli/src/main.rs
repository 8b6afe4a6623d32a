//! `atomize` — data generation, training, sweeps, balance-distance checks,
//! gradient verification, and latent/charge exports.
//!
//! Every command takes a single user-visible seed; all internal randomness
//! derives from it through purpose-keyed streams, so reruns with identical
//! flags produce byte-identical outputs (manifest timestamps aside) and
//! `--parallel` cannot change results.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use atomize_core::analysis::{charge_report, latent_dump, write_csv_rows, LatentSummary};
use atomize_core::balance::{
    balance_closed_form, balance_numeric, default_bracket, energy_curve, monotonicity_scan,
    write_energy_curve_csv, PairPotentialSpec, GOLDEN_TOL,
};
use atomize_core::data::{generate_split, DataConfig, GmmSpec, SyntheticDataset};
use atomize_core::gradcheck::{standard_suite, SuiteOptions};
use atomize_core::loss::Method;
use atomize_core::manifest::{config_hash, sha256_hex, RunManifest};
use atomize_core::model::{Checkpoint, MlpParams};
use atomize_core::train::{sweep, train, SweepResults, TrainConfig};

#[derive(Parser)]
#[command(name = "atomize", version, about = "Atom-modeling experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset CSV (plus spec sidecar and manifest).
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of data points (each contributes 5 CSV rows).
        #[arg(long)]
        n: usize,
        /// JSON file with GMM spec overrides (fields of the default spec,
        /// optionally a train_fraction).
        #[arg(long)]
        spec_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write checkpoint, result log, and manifest.
    Train {
        /// One of: ce, l1, l2, atom.
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with TrainConfig overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset CSV produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a method x seed grid and write the aggregated results JSON.
    Sweep {
        /// "all" or a comma-separated subset of ce,l1,l2,atom.
        #[arg(long, default_value = "all")]
        methods: String,
        /// Number of seeds (0..seeds-1 per method).
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset CSV; omitted = generate from the config's data section.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (capped by ATOMIZE_THREADS; results are identical
        /// for any value).
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Balance-distance check: closed form vs golden-section argmin.
    Theory {
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        rtilde: f64,
        /// Comma-separated k values for a scan (c1 = 1, c2 = k).
        #[arg(long)]
        scan_k: Option<String>,
        /// Energy-curve CSV output (scan mode).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every gradient path against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random 4-point batches per end-to-end objective check.
        #[arg(long, default_value_t = 20)]
        batches: usize,
    },
    /// Export latent positions or charges for a trained checkpoint.
    Export {
        /// "latent" or "charges".
        #[arg(long)]
        what: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            n,
            spec_file,
            out,
        } => cmd_gen_data(seed, n, spec_file.as_deref(), &out),
        Command::Train {
            method,
            seed,
            config,
            data,
            out,
        } => cmd_train(&method, seed, config.as_deref(), &data, &out),
        Command::Sweep {
            methods,
            seeds,
            config,
            data,
            out,
            parallel,
        } => cmd_sweep(&methods, seeds, config.as_deref(), data.as_deref(), &out, parallel),
        Command::Theory {
            c1,
            c2,
            rtilde,
            scan_k,
            out,
        } => cmd_theory(c1, c2, rtilde, scan_k.as_deref(), out.as_deref()),
        Command::GradCheck { tol, seed, batches } => cmd_grad_check(tol, seed, batches),
        Command::Export {
            what,
            checkpoint,
            data,
            out,
        } => cmd_export(&what, &checkpoint, &data, &out),
    }
}

// ── file plumbing ────────────────────────────────────────────────────

/// Write-then-rename so partially written outputs never land at the final
/// path.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .with_context(|| format!("creating temp file next to {}", path.display()))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_manifest(path: &Path, command: &str, config: serde_json::Value, outputs: &[&Path]) -> Result<String> {
    let outputs: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
    let mut manifest = RunManifest::new(command, config, outputs)?;
    manifest.finish();
    let hash = manifest.manifest_hash.clone();
    write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(hash)
}

fn parse_method(s: &str) -> Result<Method> {
    Method::from_str(s).map_err(|e| anyhow::anyhow!(e))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ── gen-data ─────────────────────────────────────────────────────────

/// Spec-file payload: all fields optional over the defaults.
#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct SpecFile {
    #[serde(flatten)]
    spec: GmmSpec,
    train_fraction: Option<f64>,
}

/// Dataset sidecar written next to the CSV.
#[derive(serde::Serialize, serde::Deserialize)]
struct DataSidecar {
    schema: u32,
    #[serde(flatten)]
    config: DataConfig,
    manifest_hash: String,
}

fn cmd_gen_data(seed: u64, n: usize, spec_file: Option<&Path>, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let mut config = DataConfig {
        n,
        seed,
        ..DataConfig::default()
    };
    if let Some(path) = spec_file {
        let file: SpecFile = load_json(path)?;
        config.spec = file.spec;
        if let Some(f) = file.train_fraction {
            config.train_fraction = f;
        }
    }
    let dataset = generate_split(&config)?;
    let mut csv_bytes = Vec::new();
    dataset.write_csv(&mut csv_bytes)?;

    let spec_path = sibling(out, ".spec.json");
    let manifest_path = sibling(out, ".manifest.json");
    let hash = write_manifest(
        &manifest_path,
        "gen-data",
        serde_json::to_value(&config)?,
        &[out, &spec_path],
    )?;
    write_atomic(out, &csv_bytes)?;
    let sidecar = DataSidecar {
        schema: 1,
        config,
        manifest_hash: hash,
    };
    write_atomic(&spec_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    println!(
        "wrote {} ({} points, {} rows), spec sidecar {}",
        out.display(),
        n,
        n * atomize_core::data::FEATURES,
        spec_path.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn load_dataset(data: &Path) -> Result<(SyntheticDataset, DataConfig, String)> {
    let bytes = fs::read(data).with_context(|| format!("reading {}", data.display()))?;
    let data_hash = sha256_hex(&bytes);
    let sidecar_path = sibling(data, ".spec.json");
    let config = if sidecar_path.exists() {
        let sidecar: DataSidecar = load_json(&sidecar_path)?;
        sidecar.config
    } else {
        DataConfig::default()
    };
    let dataset = SyntheticDataset::read_csv(bytes.as_slice(), config.seed)?;
    Ok((dataset, config, data_hash))
}

fn effective_train_config(
    method: Option<Method>,
    seed: Option<u64>,
    config_file: Option<&Path>,
) -> Result<TrainConfig> {
    let mut config = match config_file {
        Some(path) => load_json::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = method {
        config.method = m;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn cmd_train(
    method: &str,
    seed: Option<u64>,
    config_file: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let method = parse_method(method)?;
    let mut config = effective_train_config(Some(method), seed, config_file)?;
    let (dataset, data_config, data_hash) = load_dataset(data)?;
    config.data = data_config;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let output = train(&config, &dataset)?;

    let ck_path = out.join("checkpoint.json");
    let result_path = out.join("result.json");
    let manifest_path = out.join("manifest.json");
    let manifest_hash = write_manifest(
        &manifest_path,
        "train",
        serde_json::to_value(&config)?,
        &[&ck_path, &result_path],
    )?;

    let checkpoint = output.params.to_checkpoint(
        &config_hash(&config)?,
        config.method.name(),
        &data_hash,
    );
    write_atomic(&ck_path, serde_json::to_string_pretty(&checkpoint)?.as_bytes())?;

    let mut results = SweepResults {
        schema: atomize_core::train::RESULTS_SCHEMA,
        runs: vec![output.record.clone()],
        summary: Default::default(),
        manifest_hash: None,
    };
    results.summary.insert(
        config.method.to_string(),
        atomize_core::train::Summary {
            mean: output.record.accuracy,
            std: 0.0,
            median: output.record.accuracy,
        },
    );
    results.manifest_hash = Some(manifest_hash);
    write_atomic(&result_path, results.to_json()?.as_bytes())?;
    println!(
        "method {} seed {}: test accuracy {:.4} ({} epochs, {:.2?})",
        config.method, config.seed, output.record.accuracy, config.epochs, output.wall_clock
    );
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    if s == "all" {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',').map(|m| parse_method(m.trim())).collect()
}

fn worker_cap() -> Option<usize> {
    std::env::var("ATOMIZE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
}

fn cmd_sweep(
    methods: &str,
    seeds: u64,
    config_file: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    parallel: usize,
) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let methods = parse_methods(methods)?;
    if methods.is_empty() {
        bail!("--methods must name at least one method");
    }
    let base = effective_train_config(None, None, config_file)?;
    let (dataset, data_config) = match data {
        Some(path) => {
            let (ds, cfg, _) = load_dataset(path)?;
            (ds, cfg)
        }
        None => (generate_split(&base.data)?, base.data),
    };
    let configs: Vec<TrainConfig> = methods
        .iter()
        .flat_map(|&m| {
            let base = base.clone();
            let data = data_config;
            (0..seeds).map(move |s| TrainConfig {
                method: m,
                seed: s,
                data,
                ..base.clone()
            })
        })
        .collect();

    let workers = parallel.max(1).min(worker_cap().unwrap_or(usize::MAX));
    let output = sweep(&configs, &dataset, workers)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results_path = out.join("results.json");
    let manifest_path = out.join("manifest.json");
    let manifest_hash = write_manifest(
        &manifest_path,
        "sweep",
        serde_json::json!({
            "base": base,
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "seeds": seeds,
        }),
        &[&results_path],
    )?;
    let mut results = output.results;
    results.manifest_hash = Some(manifest_hash);
    write_atomic(&results_path, results.to_json()?.as_bytes())?;

    println!("{} runs -> {}", results.runs.len(), results_path.display());
    for (method, s) in &results.summary {
        println!(
            "  {method}: mean {:.4}  std {:.4}  median {:.4}",
            s.mean, s.std, s.median
        );
    }
    Ok(())
}

// ── theory ───────────────────────────────────────────────────────────

fn cmd_theory(
    c1: Option<f64>,
    c2: Option<f64>,
    rtilde: f64,
    scan_k: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(list) = scan_k {
        let ks: Vec<f64> = list
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad k value '{s}'")))
            .collect::<Result<_>>()?;
        let rows = monotonicity_scan(&ks, rtilde)?;
        println!("{:>10} {:>14} {:>14} {:>12}", "k", "closed-form", "numeric", "rel gap");
        for row in &rows {
            let rel = ((row.closed_form - row.numeric) / row.numeric).abs();
            println!(
                "{:>10.4} {:>14.8} {:>14.8} {:>12.3e}",
                row.k, row.closed_form, row.numeric, rel
            );
        }
        if let Some(path) = out {
            let mut curve = Vec::new();
            for &k in &ks {
                curve.extend(energy_curve(k, rtilde, 200)?);
            }
            let mut bytes = Vec::new();
            write_energy_curve_csv(&mut bytes, &curve)?;
            write_atomic(path, &bytes)?;
            let manifest_path = sibling(path, ".manifest.json");
            write_manifest(
                &manifest_path,
                "theory",
                serde_json::json!({"scan_k": ks, "r_tilde": rtilde}),
                &[path],
            )?;
            println!("energy curves -> {}", path.display());
        }
        return Ok(());
    }
    let (c1, c2) = match (c1, c2) {
        (Some(a), Some(b)) => (a, b),
        _ => bail!("either --scan-k or both --c1 and --c2 are required"),
    };
    let spec = PairPotentialSpec::new(c1, c2, rtilde)?;
    let closed = balance_closed_form(&spec)?;
    let numeric = balance_numeric(&spec, default_bracket(&spec), GOLDEN_TOL)?;
    let gap = (closed - numeric).abs();
    println!("closed-form balance distance: {closed:.10}");
    println!("numeric argmin (golden section): {numeric:.10}");
    println!("absolute gap: {gap:.3e}   relative gap: {:.3e}", gap / numeric.abs());
    Ok(())
}

// ── grad-check ───────────────────────────────────────────────────────

fn cmd_grad_check(tol: f64, seed: u64, batches: usize) -> Result<()> {
    if batches == 0 {
        bail!("--batches must be at least 1");
    }
    let checks = standard_suite(&SuiteOptions {
        tol,
        seed,
        batches,
        ..SuiteOptions::default()
    })?;
    let mut failed = 0usize;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {:<32} max rel err {:.3e}", c.name, c.max_rel_err);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed}/{} gradient checks failed at tol {tol:e}", checks.len());
    }
    println!("all {} gradient checks passed at tol {tol:e}", checks.len());
    Ok(())
}

// ── export ───────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct LatentSidecar {
    schema: u32,
    summary: LatentSummary,
    manifest_hash: String,
}

fn cmd_export(what: &str, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck: Checkpoint = load_json(checkpoint)?;
    let params = MlpParams::from_checkpoint(&ck)?;
    let (dataset, _, data_hash) = load_dataset(data)?;
    if data_hash != ck.data_hash {
        bail!(
            "checkpoint/data mismatch: checkpoint was trained on data {} but {} hashes to {}",
            &ck.data_hash[..12.min(ck.data_hash.len())],
            data.display(),
            &data_hash[..12]
        );
    }
    let norm = atomize_core::tensor::Norm::L2;
    match what {
        "latent" => {
            let (rows, summary) = latent_dump(&params, &dataset, &ck.method, ck.seed, norm)?;
            let mut bytes = Vec::new();
            write_csv_rows(&mut bytes, &rows)?;
            let summary_path = sibling(out, ".summary.json");
            let manifest_path = sibling(out, ".manifest.json");
            let hash = write_manifest(
                &manifest_path,
                "export-latent",
                serde_json::json!({"checkpoint": checkpoint.display().to_string(), "data_hash": data_hash}),
                &[out, &summary_path],
            )?;
            write_atomic(out, &bytes)?;
            let sidecar = LatentSidecar {
                schema: 1,
                summary,
                manifest_hash: hash,
            };
            write_atomic(&summary_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
            println!(
                "{} rows -> {} (bbox {:.3}x{:.3}, min cross-class {:.4})",
                rows.len(),
                out.display(),
                summary.bbox_width,
                summary.bbox_height,
                summary.min_cross_class_distance
            );
        }
        "charges" => {
            let (charges, atoms) = charge_report(&params, &dataset, norm)?;
            let atoms_path = sibling(out, "_atoms.csv");
            let manifest_path = sibling(out, ".manifest.json");
            write_manifest(
                &manifest_path,
                "export-charges",
                serde_json::json!({"checkpoint": checkpoint.display().to_string(), "data_hash": data_hash}),
                &[out, &atoms_path],
            )?;
            let mut bytes = Vec::new();
            write_csv_rows(&mut bytes, &charges)?;
            write_atomic(out, &bytes)?;
            let mut atom_bytes = Vec::new();
            write_csv_rows(&mut atom_bytes, &atoms)?;
            write_atomic(&atoms_path, &atom_bytes)?;
            println!(
                "{} charge rows -> {}, {} atom rows -> {}",
                charges.len(),
                out.display(),
                atoms.len(),
                atoms_path.display()
            );
        }
        other => bail!("unknown --what '{other}'; expected latent or charges"),
    }
    Ok(())
}
