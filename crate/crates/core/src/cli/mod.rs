//! Command-line front end. Every command rebuilds the task bundle from the
//! config, writes its resolved config and bundle manifest next to its
//! outputs, and produces identical bytes when rerun with identical inputs.
//!
//! Exit codes: 0 ok, 2 configuration or validation error, 3 training
//! divergence, 4 missing artifact.

pub mod config;
pub mod plot;
pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attribution;
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorParams};
use crate::evaluation::{self, SweepResult};
use crate::feature::{save_feature, FeatureTensor};
use crate::quantization::{self, QuantMethod};
use crate::taskbench::{make_bundle, BundleKind, TaskBundle};
use crate::training;

pub use config::RunConfig;
use plot::Series;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const MATCHED_CSV: &str = "matched.csv";
pub const QUANT_SUMMARY_CSV: &str = "quant_summary.csv";
pub const ATTRIBUTION_DIR: &str = "attribution";

#[derive(Debug, Parser)]
#[command(name = "featjnd", version, about = "Train and evaluate per-feature tolerance maps on toy task bundles")]
pub struct Cli {
    /// Worker threads for internal parallelism (results do not depend on it).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an estimator; writes a checkpoint and the training log.
    Train(RunArgs),
    /// Scaled-perturbation and Gaussian sweeps with matched-NRMSE comparison.
    EvalSweep(CheckpointArgs),
    /// Tolerance-guided token-wise quantization against random and uniform steps.
    Quantize(CheckpointArgs),
    /// Attribution maps with and without the predicted perturbation.
    Attribute(AttributeArgs),
    /// Summarize a run directory into report.md.
    Report {
        /// Run directory holding the CSV outputs.
        run_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the estimator training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Eval example indices, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    /// Use a zero perturbation instead of the estimator's prediction.
    #[arg(long)]
    pub zero_delta: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) => 3,
        Error::MissingArtifact(_) | Error::Io { .. } => 4,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command, on a dedicated pool when `--jobs` is given.
pub fn execute(cli: &Cli) -> Result<String> {
    match cli.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

fn dispatch(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::EvalSweep(a) => cmd_eval_sweep(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Report { run_dir } => cmd_report(run_dir),
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the output directory, persists the resolved config and builds
/// the bundle.
fn start(cfg: &RunConfig, command: &str) -> Result<TaskBundle> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(format!("resolved_{command}.toml")), &cfg.to_toml())?;
    let bundle = make_bundle(&cfg.bundle)?;
    bundle.save_manifest(out.join(report::BUNDLE_MANIFEST))?;
    Ok(bundle)
}

fn load_estimator(cfg: &RunConfig, bundle: &TaskBundle, checkpoint: Option<&Path>) -> Result<EstimatorParams> {
    let dir = checkpoint.map_or_else(|| cfg.output_dir.join(CHECKPOINT_DIR), Path::to_path_buf);
    if !dir.join("manifest.json").is_file() {
        return Err(Error::MissingArtifact(format!("no checkpoint at {}", dir.display())));
    }
    let (params, manifest) = estimator::load_checkpoint(&dir)?;
    let expected = bundle.checksum();
    match manifest.metadata.get("bundle_checksum") {
        Some(c) if *c == expected => {}
        other => {
            return Err(Error::Config(format!(
                "checkpoint {} was trained on bundle {} but the config builds {expected}",
                dir.display(),
                other.map_or("<unknown>", String::as_str)
            )))
        }
    }
    if manifest.config != cfg.estimator {
        return Err(Error::Config(format!(
            "checkpoint {} has a different estimator configuration",
            dir.display()
        )));
    }
    Ok(params)
}

pub fn cmd_train(args: &RunArgs) -> Result<String> {
    let cfg = load_config(args)?;
    let bundle = start(&cfg, "train")?;
    let (params, log) = training::train_loop(&bundle, &cfg.estimator, &cfg.train)?;
    let out = &cfg.output_dir;
    let metadata = BTreeMap::from([
        ("bundle_checksum".to_string(), bundle.checksum()),
        ("epochs".to_string(), cfg.train.epochs.to_string()),
        ("train_seed".to_string(), cfg.train.seed.to_string()),
    ]);
    estimator::save_checkpoint(&params, &cfg.estimator, metadata, out.join(CHECKPOINT_DIR))?;
    training::write_log_csv(&log, out.join(report::TRAIN_LOG))?;
    let mut msg = format!("bundle clean score {:.4}\n", bundle.clean_score);
    if let Some(last) = log.last() {
        let _ = writeln!(
            msg,
            "epoch {}: loss {:.4}, |δ| {:.4}, discrepancy {:.5}, nrmse {:.4}",
            last.epoch, last.mean_loss, last.mean_magnitude, last.mean_discrepancy, last.mean_nrmse
        );
    }
    let _ = writeln!(msg, "checkpoint written to {}", out.join(CHECKPOINT_DIR).display());
    Ok(msg)
}

fn sweep_plots(result: &SweepResult, clean: f64, out: &Path) -> Result<()> {
    let (fj, ga) = evaluation::curves(result);
    let svg = plot::line_plot(
        "Performance at matched NRMSE",
        "NRMSE",
        "performance",
        &[
            Series { name: "FeatJND (scaled)".into(), points: fj },
            Series { name: "Gaussian (seed mean)".into(), points: ga },
        ],
    );
    write_text(&out.join("performance_vs_nrmse.svg"), &svg)?;
    let svg = plot::line_plot(
        "Performance drop vs scale",
        "α",
        "drop",
        &[Series { name: "FeatJND".into(), points: report::alpha_drops(result, clean) }],
    );
    write_text(&out.join("drop_vs_alpha.svg"), &svg)
}

pub fn cmd_eval_sweep(args: &CheckpointArgs) -> Result<String> {
    let cfg = load_config(&args.run)?;
    let bundle = start(&cfg, "eval-sweep")?;
    let params = load_estimator(&cfg, &bundle, args.checkpoint.as_deref())?;
    let deltas = training::predict_eval(&params, &cfg.estimator, &bundle)?;
    let e = &cfg.eval;
    let sigmas = if e.sigmas.is_empty() {
        evaluation::sigma_grid(&bundle, &e.nrmse_targets)
    } else {
        e.sigmas.clone()
    };
    let result = evaluation::matched_sweep(&bundle, &deltas, &e.alphas, &sigmas, &e.seeds)?;
    let out = &cfg.output_dir;
    evaluation::write_sweep_csv(&result, out.join(report::SWEEP_CSV))?;
    let points = evaluation::matched_comparison(&result, &e.matched_grid);
    let mut csv = String::from("# schema v1\nnrmse,featjnd,gaussian,margin\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &points {
        let _ = writeln!(csv, "{},{},{},{}", p.nrmse, opt(p.featjnd), opt(p.gaussian), opt(p.margin()));
    }
    write_text(&out.join(MATCHED_CSV), &csv)?;
    sweep_plots(&result, bundle.clean_score, out)?;

    let mut msg = format!("clean {:.4}; {} sweep rows\n", bundle.clean_score, result.rows.len());
    for p in &points {
        let f = |v: Option<f64>| v.map_or_else(|| "   n/a".into(), |x| format!("{x:.4}"));
        let _ = writeln!(msg, "nrmse {:.2}: featjnd {} gaussian {}", p.nrmse, f(p.featjnd), f(p.gaussian));
    }
    Ok(msg)
}

pub fn cmd_quantize(args: &CheckpointArgs) -> Result<String> {
    let cfg = load_config(&args.run)?;
    let bundle = start(&cfg, "quantize")?;
    let params = load_estimator(&cfg, &bundle, args.checkpoint.as_deref())?;
    let deltas = training::predict_eval(&params, &cfg.estimator, &bundle)?;
    let rows = quantization::quant_experiment(&bundle, &deltas, &cfg.quant)?;
    let out = &cfg.output_dir;
    quantization::write_quant_csv(&rows, out.join(report::QUANT_CSV))?;
    let summary = quantization::summarize(&rows);
    let mut csv = String::from("# schema v1\nsigma_tgt,featjnd,random_mean,uniform,budgets_exact\n");
    let mut msg = String::new();
    for s in &summary {
        let _ = writeln!(csv, "{},{},{},{},{}", s.sigma_tgt, s.featjnd, s.random_mean, s.uniform, s.budgets_exact);
        let _ = writeln!(
            msg,
            "σ {:.4}: featjnd {:.4} random {:.4} uniform {:.4} exact {}",
            s.sigma_tgt, s.featjnd, s.random_mean, s.uniform, s.budgets_exact
        );
    }
    write_text(&out.join(QUANT_SUMMARY_CSV), &csv)?;
    let series = |name: &str, pick: fn(&quantization::QuantSummary) -> f64| Series {
        name: name.into(),
        points: summary.iter().map(|s| (s.sigma_tgt, pick(s))).collect(),
    };
    let svg = plot::line_plot(
        "Quantization at equal noise budget",
        "σ_tgt",
        "performance",
        &[
            series(QuantMethod::Featjnd.name(), |s| s.featjnd),
            series("random (mean)", |s| s.random_mean),
            series(QuantMethod::Uniform.name(), |s| s.uniform),
        ],
    );
    write_text(&out.join("quant_performance.svg"), &svg)?;
    Ok(msg)
}

pub fn cmd_attribute(args: &AttributeArgs) -> Result<String> {
    let mut cfg = load_config(&args.ckpt.run)?;
    if let Some(idx) = &args.indices {
        cfg.attribution.indices = idx.clone();
    }
    if cfg.bundle.kind != BundleKind::Classification {
        return Err(Error::Config("attribution needs a classification bundle".into()));
    }
    let bundle = start(&cfg, "attribute")?;
    let params = load_estimator(&cfg, &bundle, args.ckpt.checkpoint.as_deref())?;
    if let Some(bad) = cfg.attribution.indices.iter().find(|&&i| i >= bundle.eval.len()) {
        return Err(Error::Validation(format!(
            "example index {bad} out of range (eval set has {})",
            bundle.eval.len()
        )));
    }
    let dir = cfg.output_dir.join(ATTRIBUTION_DIR);
    let raw = dir.join("raw");
    std::fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    let est = (!args.zero_delta).then_some((&params, &cfg.estimator));
    let a = &cfg.attribution;
    let mut csv = String::from("# schema v1\nindex,target,clean_total,distorted_total,difference_l2\n");
    for &i in &a.indices {
        let t = attribution::attribution_delta(&bundle, est, &bundle.eval[i].image, a.steps)?;
        let total = |m: &crate::tensor::Tensor3| m.data().iter().sum::<f64>();
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            t.target,
            total(&t.clean),
            total(&t.distorted),
            t.difference.l2_norm()
        );
        let scale = attribution::display_map(&t.clean)
            .into_iter()
            .chain(attribution::display_map(&t.distorted))
            .fold(0.0f64, f64::max);
        for (name, map) in [("clean", &t.clean), ("distorted", &t.distorted), ("difference", &t.difference)] {
            attribution::render_png(map, scale, a.zoom, dir.join(format!("{i:04}_{name}.png")))?;
            save_feature(&FeatureTensor::from_tensor(map)?, raw.join(format!("{i:04}_{name}.fjnd")))?;
        }
    }
    write_text(&dir.join("summary.csv"), &csv)?;
    Ok(format!("attribution maps for {} examples in {}\n", a.indices.len(), dir.display()))
}

pub fn cmd_report(dir: &Path) -> Result<String> {
    let outcome = report::write_report(dir)?;
    if outcome.missing.is_empty() {
        Ok(format!("report written to {}\n", outcome.path.display()))
    } else {
        Err(Error::MissingArtifact(format!(
            "partial report written to {}; missing {}",
            outcome.path.display(),
            outcome.missing.join(", ")
        )))
    }
}
