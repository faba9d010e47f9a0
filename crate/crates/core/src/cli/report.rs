//! Markdown summary of a run directory.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{self, DistortionKind, MatchedPoint, SweepResult};
use crate::quantization::{self, QuantSummary};
use crate::taskbench::{BundleKind, BundleManifest};

pub const BUNDLE_MANIFEST: &str = "bundle_manifest.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const QUANT_CSV: &str = "quant.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const REPORT_MD: &str = "report.md";

/// Inputs a complete report needs.
pub const EXPECTED_INPUTS: [&str; 3] = [BUNDLE_MANIFEST, SWEEP_CSV, QUANT_CSV];

/// Margin a matched point needs to count as a clear win.
pub const CLEAR_MARGIN: f64 = 0.02;
/// Largest relative performance drop allowed at α = 1.
pub const ALPHA_ONE_MAX_DROP: f64 = 0.05;

/// FeatJND at least matches Gaussian noise wherever both curves are
/// defined, and wins by more than [`CLEAR_MARGIN`] at half of those points
/// or more.
pub fn matched_claim_holds(points: &[MatchedPoint]) -> bool {
    let margins: Vec<f64> = points.iter().filter_map(MatchedPoint::margin).collect();
    !margins.is_empty()
        && margins.iter().all(|m| *m >= 0.0)
        && 2 * margins.iter().filter(|m| **m > CLEAR_MARGIN).count() >= margins.len()
}

/// `(α, performance drop)` for every scaled-perturbation row.
pub fn alpha_drops(result: &SweepResult, clean: f64) -> Vec<(f64, f64)> {
    let mut rows: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter(|r| r.kind == DistortionKind::FeatjndScaled)
        .filter_map(|r| Some((r.alpha?, clean - r.performance)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows
}

/// Drop at α = 1 stays under [`ALPHA_ONE_MAX_DROP`] of the clean score and
/// the drop at α = 3 exceeds it. `None` when either α is missing.
pub fn alpha_knob_holds(drops: &[(f64, f64)], clean: f64) -> Option<bool> {
    let at = |a: f64| drops.iter().find(|d| d.0 == a).map(|d| d.1);
    let (one, three) = (at(1.0)?, at(3.0)?);
    Some(one < ALPHA_ONE_MAX_DROP * clean && three > one)
}

/// FeatJND allocation at least matches both baselines at every budget,
/// with all budgets verified.
pub fn quant_claim_holds(summary: &[QuantSummary]) -> bool {
    !summary.is_empty()
        && summary
            .iter()
            .all(|s| s.budgets_exact && s.featjnd >= s.random_mean && s.featjnd >= s.uniform)
}

pub struct ReportOutcome {
    pub path: PathBuf,
    pub missing: Vec<&'static str>,
}

fn status(ok: Option<bool>) -> &'static str {
    match ok {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "missing input",
    }
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Writes `report.md` into `dir` from whatever inputs are present. Missing
/// inputs are listed in the report and returned.
pub fn write_report(dir: &Path) -> Result<ReportOutcome> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "run directory {} does not exist; expected {}",
            dir.display(),
            EXPECTED_INPUTS.join(", ")
        )));
    }
    let missing: Vec<&'static str> = EXPECTED_INPUTS.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    let manifest: Option<BundleManifest> = if dir.join(BUNDLE_MANIFEST).is_file() {
        let path = dir.join(BUNDLE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Format {
            field: "bundle_manifest",
            detail: e.to_string(),
        })?)
    } else {
        None
    };
    let sweep = match dir.join(SWEEP_CSV).is_file() {
        true => Some(evaluation::read_sweep_csv(dir.join(SWEEP_CSV))?),
        false => None,
    };
    let quant = match dir.join(QUANT_CSV).is_file() {
        true => Some(quantization::read_quant_csv(dir.join(QUANT_CSV))?),
        false => None,
    };

    let mut md = String::from("# FeatJND run report\n\n");
    if !missing.is_empty() {
        md.push_str("**Partial report.** Missing inputs:\n\n");
        for m in &missing {
            let _ = writeln!(md, "- `{m}`");
        }
        md.push('\n');
    }

    md.push_str("## Bundle\n\n");
    match &manifest {
        Some(m) => {
            let _ = writeln!(md, "| field | value |\n|---|---|");
            let _ = writeln!(md, "| kind | {:?} |", m.config.kind);
            let _ = writeln!(md, "| task | {:?} |", m.task);
            let _ = writeln!(md, "| levels | {} |", m.level_ids.join(", "));
            let shapes: Vec<String> = m.level_shapes.iter().map(ToString::to_string).collect();
            let _ = writeln!(md, "| shapes | {} |", shapes.join(", "));
            let _ = writeln!(md, "| clean score | {:.4} |", m.clean_score);
            let _ = writeln!(md, "| checksum | `{}` |\n", m.checksum);
        }
        None => md.push_str("not available\n\n"),
    }

    let clean = manifest
        .as_ref()
        .map(|m| m.clean_score)
        .or_else(|| sweep.as_ref().map(|s| s.clean_performance));

    let mut matched_ok = None;
    let mut alpha_ok = None;
    md.push_str("## Matched distortion\n\n");
    match &sweep {
        Some(s) => {
            let points = evaluation::matched_comparison(s, &evaluation::nrmse_grid());
            md.push_str("| NRMSE | FeatJND | Gaussian | margin |\n|---|---|---|---|\n");
            for p in &points {
                let _ = writeln!(md, "| {:.2} | {} | {} | {} |", p.nrmse, opt4(p.featjnd), opt4(p.gaussian), opt4(p.margin()));
            }
            matched_ok = Some(matched_claim_holds(&points));
            md.push_str("\n## Scaled perturbation\n\n| α | drop |\n|---|---|\n");
            let clean = clean.unwrap_or(s.clean_performance);
            let drops = alpha_drops(s, clean);
            for (a, d) in &drops {
                let _ = writeln!(md, "| {a:.2} | {d:.4} |");
            }
            md.push('\n');
            alpha_ok = alpha_knob_holds(&drops, clean);
        }
        None => md.push_str("not available\n\n"),
    }

    let mut quant_ok = None;
    let mut budgets_ok = None;
    md.push_str("## Tolerance-guided quantization\n\n");
    match &quant {
        Some(rows) => {
            let summary = quantization::summarize(rows);
            md.push_str("| σ_tgt | FeatJND | random (mean) | uniform | budgets exact |\n|---|---|---|---|---|\n");
            for s in &summary {
                let _ = writeln!(
                    md,
                    "| {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                    s.sigma_tgt, s.featjnd, s.random_mean, s.uniform, s.budgets_exact
                );
            }
            let failed: Vec<&str> = rows.iter().filter(|r| r.status != "ok").map(|r| r.status.as_str()).collect();
            if !failed.is_empty() {
                let _ = writeln!(md, "\n{} rows were not evaluated: {}", failed.len(), failed.join("; "));
            }
            md.push('\n');
            quant_ok = Some(quant_claim_holds(&summary));
            budgets_ok = Some(summary.iter().all(|s| s.budgets_exact));
        }
        None => md.push_str("not available\n\n"),
    }

    let classification = manifest.as_ref().map(|m| m.config.kind == BundleKind::Classification);
    let suite = "checked by the acceptance test suite";
    let alpha_status = match classification {
        Some(false) => "n/a (classification bundles only)",
        _ => status(alpha_ok),
    };
    let rows: [(&str, &str, &str); 10] = [
        ("AC-1", "metric identities", suite),
        ("AC-2", "noise budget verification on this run", status(budgets_ok)),
        ("AC-3", "Δ²/12 quantization noise model", suite),
        ("AC-4", "discrepancy values and gradients", suite),
        ("AC-5", "loss identity and frozen task network", suite),
        ("AC-6", "FeatJND beats Gaussian noise at matched NRMSE", status(matched_ok)),
        ("AC-7", "α-knob: small drop at α = 1, larger at α = 3", alpha_status),
        ("AC-8", "FeatJND allocation beats random and uniform", status(quant_ok)),
        ("AC-9", "attribution exactness and completeness", suite),
        ("AC-10", "file round trip and command determinism", suite),
    ];
    md.push_str("## Acceptance checks\n\n| ID | check | status |\n|---|---|---|\n");
    for (id, what, st) in rows {
        let _ = writeln!(md, "| {id} | {what} | {st} |");
    }

    let path = dir.join(REPORT_MD);
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(ReportOutcome { path, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(featjnd: Option<f64>, gaussian: Option<f64>) -> MatchedPoint {
        MatchedPoint {
            nrmse: 0.5,
            featjnd,
            gaussian,
        }
    }

    #[test]
    fn matched_claim_rules() {
        assert!(matched_claim_holds(&[point(Some(0.9), Some(0.8)), point(Some(0.9), Some(0.9))]));
        assert!(!matched_claim_holds(&[point(Some(0.9), Some(0.89)), point(Some(0.9), Some(0.9))]));
        assert!(!matched_claim_holds(&[point(Some(0.9), Some(0.5)), point(Some(0.8), Some(0.81))]));
        assert!(!matched_claim_holds(&[point(None, Some(0.5))]));
    }

    #[test]
    fn alpha_knob_rules() {
        assert_eq!(alpha_knob_holds(&[(1.0, 0.01), (3.0, 0.2)], 0.9), Some(true));
        assert_eq!(alpha_knob_holds(&[(1.0, 0.06), (3.0, 0.2)], 0.9), Some(false));
        assert_eq!(alpha_knob_holds(&[(1.0, 0.01), (3.0, 0.01)], 0.9), Some(false));
        assert_eq!(alpha_knob_holds(&[(1.0, 0.01)], 0.9), None);
    }
}
