use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use clap::Parser;
use featjnd::cli::{self, report, Cli, RunConfig};
use featjnd::estimator;
use featjnd::evaluation;
use featjnd::feature::load_feature;
use featjnd::quantization::{self, QuantMethod};
use featjnd::taskbench::BundleManifest;
use tempfile::TempDir;

const ALPHAS: usize = 3;
const SIGMAS: usize = 2;
const SEEDS: usize = 3;

fn config_text(out: &Path, epochs: usize, bundle_seed: u64) -> String {
    format!(
        r#"output_dir = "{}"

[bundle]
kind = "classification"
seed = {bundle_seed}
train_size = 256
eval_size = 64
pretrain_epochs = 6
min_clean_score = 0.0

[estimator]
hidden_width = 8
num_residual_blocks = 1

[train]
epochs = {epochs}
learning_rate = 1e-3

[eval]
alphas = [0.0, 1.0, 3.0]
nrmse_targets = [0.1, 0.5]
seeds = [0, 1, 2]

[quant]
sigma_fractions = [0.3, 0.5]
"#,
        out.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("featjnd").chain(args.iter().copied()))
}

fn run_err(args: &[&str]) -> featjnd::Error {
    let cli = Cli::try_parse_from(std::iter::once("featjnd").chain(args.iter().copied())).unwrap();
    cli::execute(&cli).expect_err("command should fail")
}

/// One trained run shared by the tests that only read from it.
struct Trained {
    _tmp: TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let config = write_config(tmp.path(), "run.toml", &config_text(&out, 2, 0));
        let c = config.to_str().unwrap();
        assert_eq!(run(&["train", "--config", c]), 0);
        assert_eq!(run(&["eval-sweep", "--config", c]), 0);
        assert_eq!(run(&["quantize", "--config", c]), 0);
        Trained { _tmp: tmp, config, out }
    })
}

#[test]
fn missing_config_names_the_path() {
    let e = run_err(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(e.to_string().contains("/nonexistent/run.toml"), "{e}");
    assert_eq!(cli::exit_code(&e), 2);
}

#[test]
fn binary_reports_errors_with_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_featjnd");
    let o = Command::new(bin).args(["train", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/x.toml"));
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(bin).arg("report").arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(4));
    let o = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    for sub in ["train", "eval-sweep", "quantize", "attribute", "report"] {
        assert!(String::from_utf8_lossy(&o.stdout).contains(sub), "help lists {sub}");
    }
}

#[test]
fn unknown_keys_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config_text(&tmp.path().join("o"), 1, 0).replace("hidden_width = 8", "hidden_widht = 8");
    let c = write_config(tmp.path(), "bad.toml", &text);
    let e = run_err(&["train", "--config", c.to_str().unwrap()]);
    assert!(e.to_string().contains("hidden_widht"), "{e}");
    assert_eq!(cli::exit_code(&e), 2);
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let c = write_config(tmp.path(), "zero.toml", &config_text(&out, 0, 0));
    assert_eq!(run(&["train", "--config", c.to_str().unwrap(), "--seed", "9"]), 0);
    let (params, manifest) = estimator::load_checkpoint(out.join(cli::CHECKPOINT_DIR)).unwrap();
    assert_eq!(params, estimator::init_estimator(&manifest.config, 9).unwrap());
    let resolved = RunConfig::parse(&std::fs::read_to_string(out.join("resolved_train.toml")).unwrap()).unwrap();
    assert_eq!(resolved.train.seed, 9);
    assert_eq!(resolved.output_dir, out);
}

#[test]
fn train_rerun_gives_identical_log_and_checkpoint() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("again");
    assert_eq!(run(&["train", "--config", t.config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    for f in [report::TRAIN_LOG, "checkpoint/manifest.json", "checkpoint/000_conv_in.weight.fjnd"] {
        assert_eq!(std::fs::read(t.out.join(f)).unwrap(), std::fs::read(out.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(out.join(report::TRAIN_LOG)).unwrap();
    assert!(log.starts_with("# schema v1\nepoch,"));
    assert_eq!(log.lines().count(), 2 + 2);
}

#[test]
fn sweep_outputs_follow_the_grids() {
    let t = trained();
    let sweep = evaluation::read_sweep_csv(t.out.join(report::SWEEP_CSV)).unwrap();
    assert_eq!(sweep.rows.len(), ALPHAS + SIGMAS * SEEDS);
    let manifest: BundleManifest =
        serde_json::from_str(&std::fs::read_to_string(t.out.join(report::BUNDLE_MANIFEST)).unwrap()).unwrap();
    assert_eq!(sweep.clean_performance, manifest.clean_score);
    for plot in ["performance_vs_nrmse.svg", "drop_vs_alpha.svg"] {
        let text = std::fs::read_to_string(t.out.join(plot)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("polyline"), "{plot}");
    }
    let matched = std::fs::read_to_string(t.out.join(cli::MATCHED_CSV)).unwrap();
    assert_eq!(matched.lines().count(), 2 + evaluation::nrmse_grid().len());
}

#[test]
fn quantization_rows_are_budget_exact() {
    let t = trained();
    let rows = quantization::read_quant_csv(t.out.join(report::QUANT_CSV)).unwrap();
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma_tgt).collect();
    sigmas.dedup();
    assert_eq!(sigmas.len(), 2);
    for s in sigmas {
        let cell: Vec<_> = rows.iter().filter(|r| r.sigma_tgt == s).collect();
        let random: Vec<_> = cell.iter().filter(|r| r.method == QuantMethod::Random).collect();
        assert_eq!(random.len(), 5);
        let mut seeds: Vec<u64> = random.iter().map(|r| r.seed.unwrap()).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
        let uniform: Vec<_> = cell.iter().filter(|r| r.method == QuantMethod::Uniform).collect();
        assert!(uniform.len() > 1);
        assert!(uniform.iter().all(|r| r.performance == uniform[0].performance && r.budget == uniform[0].budget));
        for r in &cell {
            let b = r.budget.unwrap();
            assert!((b - s * s).abs() <= 1e-10 * s * s, "{:?} budget {b} vs {}", r.method, s * s);
        }
    }
    let csv = std::fs::read_to_string(t.out.join(report::QUANT_CSV)).unwrap();
    assert!(csv.lines().skip(2).all(|l| l.contains(",true,")));
}

fn count_png(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn attribution_writes_three_maps_per_example_and_records_steps() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("attr");
    let ckpt = t.out.join(cli::CHECKPOINT_DIR);
    let (c, o, k) = (t.config.to_str().unwrap(), out.to_str().unwrap(), ckpt.to_str().unwrap());
    assert_eq!(run(&["attribute", "--config", c, "--out", o, "--checkpoint", k, "--indices", "2,5"]), 0);
    let dir = out.join(cli::ATTRIBUTION_DIR);
    assert_eq!(count_png(&dir), 3 * 2);
    let resolved = RunConfig::parse(&std::fs::read_to_string(out.join("resolved_attribute.toml")).unwrap()).unwrap();
    assert_eq!(resolved.attribution.steps, 20);
    assert_eq!(resolved.attribution.indices, vec![2, 5]);
    let diff = load_feature(dir.join("raw/0002_difference.fjnd")).unwrap();
    assert!(diff.values().iter().any(|v| *v != 0.0));

    let zero = tmp.path().join("zero");
    let z = zero.to_str().unwrap();
    assert_eq!(run(&["attribute", "--config", c, "--out", z, "--checkpoint", k, "--indices", "2,5", "--zero-delta"]), 0);
    for i in [2, 5] {
        let diff = load_feature(zero.join(format!("attribution/raw/{i:04}_difference.fjnd"))).unwrap();
        assert!(diff.values().iter().all(|v| *v == 0.0));
    }

    let e = run_err(&["attribute", "--config", c, "--out", z, "--checkpoint", k, "--indices", "64"]);
    assert!(e.to_string().contains("out of range"), "{e}");
    assert_eq!(cli::exit_code(&e), 2);
}

#[test]
fn checkpoint_problems_are_reported() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("other");
    let other = write_config(tmp.path(), "other.toml", &config_text(&out, 1, 1));
    let ckpt = t.out.join(cli::CHECKPOINT_DIR);
    let e = run_err(&["eval-sweep", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(e.to_string().contains("trained on bundle"), "{e}");
    assert_ne!(cli::exit_code(&e), 0);
    let e = run_err(&["quantize", "--config", other.to_str().unwrap()]);
    assert_eq!(cli::exit_code(&e), 4);
}

#[test]
fn report_is_stable_and_lists_every_criterion() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    for f in [report::BUNDLE_MANIFEST, report::SWEEP_CSV, report::QUANT_CSV, report::TRAIN_LOG] {
        std::fs::copy(t.out.join(f), tmp.path().join(f)).unwrap();
    }
    let dir = tmp.path().to_str().unwrap();
    assert_eq!(run(&["report", dir]), 0);
    let first = std::fs::read(tmp.path().join(report::REPORT_MD)).unwrap();
    assert_eq!(run(&["report", dir]), 0);
    assert_eq!(first, std::fs::read(tmp.path().join(report::REPORT_MD)).unwrap());
    let text = String::from_utf8(first).unwrap();
    for id in 1..=10 {
        assert!(text.contains(&format!("| AC-{id} |")), "AC-{id} missing");
    }
}

#[test]
fn report_on_empty_directory_lists_expected_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let e = run_err(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(cli::exit_code(&e), 4);
    for f in report::EXPECTED_INPUTS {
        assert!(e.to_string().contains(f), "{e}");
    }
    let partial = std::fs::read_to_string(tmp.path().join(report::REPORT_MD)).unwrap();
    assert!(partial.contains("Partial report"));
    assert!(partial.contains("| AC-10 |"));
}
