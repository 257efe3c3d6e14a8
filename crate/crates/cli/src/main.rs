//! `cfsg`: synthetic data generation, training, evaluation, inference-weight
//! sweeps, explainability reports and self-tests.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 usage or validation error,
//! 3 numeric divergence.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cfsg_core::classifier::normalize_inference_weights;
use cfsg_core::explain::{hierarchy_alignment, nc_diagnostics};
use cfsg_core::hierarchy::{generate_synthetic_domains, SyntheticDomainConfig};
use cfsg_core::model::partition_channels;
use cfsg_core::selftest::{run_selftest, SelftestOptions};
use cfsg_core::train::{
    history_csv, load_checkpoint, save_checkpoint, simplex_grid, sweep_scores, train, BlockScores, Inference,
};
use cfsg_core::{Dataset, Error, HierarchySpec, Lambda, TrainConfig};

use manifest::{write_atomic, ManifestBuilder};

#[derive(Parser)]
#[command(name = "cfsg", version, about = "Structured multi-granularity classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded source and target datasets over a label hierarchy.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint under given inference weights.
    Eval(EvalArgs),
    /// Fine accuracy over a simplex grid of inference weights.
    Sweep(SweepArgs),
    /// Concept-similarity report and Neural-Collapse statistics.
    Explain(ExplainArgs),
    /// Gradient checks and oracle equivalences.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Hierarchy JSON (`class_counts`, `parent_maps`); the built-in
    /// 8/4/2 benchmark hierarchy when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Full generator configuration; the flags below override its fields.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Target shift strength (sets both the scale and the offset).
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Input width, laid out 5:3:2 into common, specific and confounding.
    #[arg(long, default_value_t = 20)]
    channels: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset file, or a directory containing `source.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// History CSV; `history.csv` next to the checkpoint by default.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct LambdaArgs {
    #[arg(long, default_value_t = 1.0)]
    lam_c: f64,
    #[arg(long, default_value_t = 1.0)]
    lam_p: f64,
    #[arg(long, default_value_t = 1.0)]
    lam_n: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file, or a directory containing `target.json`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    lam: LambdaArgs,
    /// Nearest sub-centroid inference instead of linear scores.
    #[arg(long)]
    subcentroid: bool,
    /// Report path; `eval.json` next to the checkpoint by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file, or a directory containing `target.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// CSV path; `sweep.csv` next to the checkpoint by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Hierarchy to compare against; the checkpoint's own when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Dataset whose eval-mode features feed the Neural-Collapse statistics.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; the checkpoint's directory by default.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the analytic gradient of this loss term (e.g. `S_cd`).
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 3 for divergence or non-finite numerics, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged { .. } | Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast_ref::<SelftestFailed>() {
        Some(_) => Ok(ExitCode::from(1)),
        None => Err(e),
    })
}

#[derive(Debug)]
struct SelftestFailed;

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("self-test failed")
    }
}

impl std::error::Error for SelftestFailed {}

/// Parallelism cap from `CFSG_THREADS`; 1 when unset.
fn threads() -> Result<usize> {
    match std::env::var("CFSG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Validation(format!("CFSG_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// `path` itself when it is a file, otherwise `path/default_name`.
fn resolve_data(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.synthetic {
        Some(p) => serde_json::from_str::<SyntheticDomainConfig>(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Validation(format!("synthetic config {}: {e}", p.display())))?,
        None => SyntheticDomainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.noise {
        cfg.noise_std = n;
    }
    if let Some(s) = a.shift {
        cfg.shift_scale = s;
        cfg.shift_offset = s;
    }
    if let Some(n) = a.per_class {
        cfg.samples_per_class = n;
    }
    let h = match &a.hierarchy {
        Some(p) => HierarchySpec::from_json_file(p).with_context(|| format!("loading hierarchy {}", p.display()))?,
        None => HierarchySpec::benchmark(),
    };
    let partition = partition_channels(a.channels, TrainConfig::default().partition_ratio)?;
    let (source, target) = generate_synthetic_domains(&h, &partition, &cfg)?;

    let mut m = ManifestBuilder::new("gen-data", json!({ "synthetic": cfg, "hierarchy": h, "partition": partition }));
    if let Some(p) = &a.hierarchy {
        m.input(p);
    }
    if let Some(p) = &a.synthetic {
        m.input(p);
    }
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, ds) in [("source.json", &source), ("target.json", &target)] {
        let path = a.out_dir.join(name);
        write_atomic(&path, ds.to_json()?.as_bytes())?;
        m.output(&path);
    }
    m.finish(&a.out_dir)?;
    println!("wrote {} source and {} target samples to {}", source.len(), target.len(), a.out_dir.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config).with_context(|| format!("loading config {}", a.config.display()))?;
    let data_path = resolve_data(&a.data, "source.json");
    let data = load_dataset(&data_path)?;
    let history_path = a.history.clone().unwrap_or_else(|| parent_dir(&a.out).join("history.csv"));
    let mut m = ManifestBuilder::new("train", serde_json::to_value(&cfg)?);
    m.input(&a.config);
    m.input(&data_path);

    let outcome = match train(&cfg, &data) {
        Ok(o) => o,
        Err(Error::Diverged {
            epoch,
            step,
            detail,
            last_finite,
        }) => {
            let mut rescue = a.out.as_os_str().to_owned();
            rescue.push(".last-finite.json");
            let rescue = PathBuf::from(rescue);
            save_checkpoint(&last_finite, &rescue)?;
            eprintln!("last finite state written to {}", rescue.display());
            return Err(Error::Diverged {
                epoch,
                step,
                detail,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    m.output(&a.out);
    m.output(&history_path);
    m.finish(&parent_dir(&a.out))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "trained {} epochs: total {:.6} -> {:.6}, fine train accuracy {:.4}",
            outcome.history.len(),
            first.total,
            last.total,
            last.fine_train_acc
        );
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let lam = normalize_inference_weights(Lambda::new(a.lam.lam_c, a.lam.lam_p, a.lam.lam_n))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data_path = resolve_data(&a.data, "target.json");
    let data = load_dataset(&data_path)?;
    let inference = if a.subcentroid {
        Inference::SubCentroid
    } else {
        Inference::Linear
    };
    let report = BlockScores::compute(&ckpt, &data, threads()?)?.report(&ckpt, lam, inference)?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.ckpt).join("eval.json"));
    let text = serde_json::to_string_pretty(&report)?;
    write_atomic(&out, text.as_bytes())?;
    println!("{text}");

    let mut m = ManifestBuilder::new("eval", json!({ "lam": lam, "inference": inference }));
    m.input(&a.ckpt);
    m.input(&data_path);
    m.output(&out);
    m.finish(&parent_dir(&out))?;
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let grid = simplex_grid(a.step)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data_path = resolve_data(&a.data, "target.json");
    let data = load_dataset(&data_path)?;
    let result = sweep_scores(&BlockScores::compute(&ckpt, &data, threads()?)?, &grid)?;
    let out = a.out.unwrap_or_else(|| parent_dir(&a.ckpt).join("sweep.csv"));
    write_atomic(&out, result.to_csv().as_bytes())?;
    let best = result.best_row();
    println!(
        "best lam_c={} lam_p={} lam_n={} fine_acc={}",
        best.lam.c, best.lam.p, best.lam.n, best.fine_acc
    );

    let mut m = ManifestBuilder::new("sweep", json!({ "step": a.step, "rows": result.rows.len() }));
    m.input(&a.ckpt);
    m.input(&data_path);
    m.output(&out);
    m.finish(&parent_dir(&out))?;
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let h = match &a.hierarchy {
        Some(p) => HierarchySpec::from_json_file(p).with_context(|| format!("loading hierarchy {}", p.display()))?,
        None => ckpt.hierarchy.clone(),
    };
    if h.class_counts() != ckpt.hierarchy.class_counts() {
        bail!(Error::Validation(format!(
            "hierarchy class counts {:?} disagree with checkpoint {:?}",
            h.class_counts(),
            ckpt.hierarchy.class_counts()
        )));
    }
    let weight = &ckpt.model.classifiers[0].weight;
    let similarity = hierarchy_alignment(weight, &ckpt.model.partition, &h)?;

    let mut m = ManifestBuilder::new("explain", json!({ "hierarchy": h }));
    m.input(&a.ckpt);
    if let Some(p) = &a.hierarchy {
        m.input(p);
    }
    let nc = match &a.data {
        None => None,
        Some(path) => {
            let data = load_dataset(path)?;
            m.input(path);
            let scores = BlockScores::compute(&ckpt, &data, threads()?)?;
            let pooled = scores.pooled(0);
            let features: Vec<Vec<f64>> = (0..pooled.rows()).map(|r| pooled.row(r).to_vec()).collect();
            Some(nc_diagnostics(&features, &data.fine_labels(), weight)?)
        }
    };

    let dir = a.out_dir.unwrap_or_else(|| parent_dir(&a.ckpt));
    std::fs::create_dir_all(&dir)?;
    let report_path = dir.join("report.json");
    let pairs_path = dir.join("pairs.csv");
    let report = json!({ "similarity": similarity, "nc": nc });
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&pairs_path, similarity.pairs_csv().as_bytes())?;
    m.output(&report_path);
    m.output(&pairs_path);
    m.finish(&dir)?;
    println!(
        "rho_all={:.4} rho_common={:.4} rho_specific={:.4} rho_confounding={:.4}",
        similarity.rho_all, similarity.rho_common, similarity.rho_specific, similarity.rho_confounding
    );
    Ok(())
}

fn selftest_cmd(a: SelftestArgs) -> Result<()> {
    let opts = SelftestOptions {
        draws: a.draws,
        seed: a.seed,
        fault: a.inject_fault.clone(),
    };
    let report = run_selftest(&opts)?;
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{:.1}s", report.seconds);

    std::fs::create_dir_all(&a.out_dir)?;
    let out = a.out_dir.join("selftest.json");
    write_atomic(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = ManifestBuilder::new(
        "selftest",
        json!({ "draws": a.draws, "seed": a.seed, "inject_fault": a.inject_fault }),
    );
    m.output(&out);
    m.finish(&a.out_dir)?;

    if report.passed() {
        Ok(())
    } else {
        eprintln!("failing checks: {}", report.failures().join(", "));
        Err(SelftestFailed.into())
    }
}
