//! Matched-distortion evaluation: scaled perturbation maps versus Gaussian
//! noise at equal NRMSE, and the α sweep.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::metrics;
use crate::nn;
use crate::taskbench::TaskBundle;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    FeatjndScaled,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn featjnd(alpha: f64) -> Self {
        Self {
            kind: DistortionKind::FeatjndScaled,
            alpha,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DistortionKind::Gaussian,
            alpha: 0.0,
            sigma,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Validation(format!(
                "alpha and sigma must be nonnegative, got alpha={} sigma={}",
                self.alpha, self.sigma
            )));
        }
        Ok(())
    }
}

/// Distorts the levels of one example. Gaussian noise is drawn from the
/// stream `example` of `spec.seed`, level by level in raster order.
pub fn distort_levels(f: &[Tensor3], delta: &[Tensor3], spec: &DistortionSpec, example: u64) -> Result<Vec<Tensor3>> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::FeatjndScaled => crate::tensor::levels_axpy(f, spec.alpha, delta),
        DistortionKind::Gaussian => {
            if spec.sigma == 0.0 {
                return Ok(f.to_vec());
            }
            let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::Validation(e.to_string()))?;
            let mut rng = nn::rng(spec.seed, example);
            Ok(f.iter()
                .map(|t| t.map(|v| v + normal.sample(&mut rng)))
                .collect())
        }
    }
}

/// `f + α·δ` or `f + ε`, `ε ~ N(0, σ²)` seeded by `spec.seed`.
pub fn apply_distortion(f: &FeatureTensor, delta: &FeatureTensor, spec: &DistortionSpec) -> Result<FeatureTensor> {
    if f.shape() != delta.shape() {
        return Err(Error::shape3(f.shape(), delta.shape()));
    }
    let out = distort_levels(&[f.to_tensor()], &[delta.to_tensor()], spec, 0)?;
    FeatureTensor::from_tensor(&out[0])
}

/// One sweep cell: a distortion spec and its eval-set means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: DistortionKind,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
    pub nrmse: f64,
    pub performance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub clean_performance: f64,
    pub rows: Vec<SweepRow>,
}

/// Mean NRMSE and performance of one distortion over the eval set.
pub fn evaluate_spec(bundle: &TaskBundle, deltas: &[Vec<Tensor3>], spec: &DistortionSpec) -> Result<(f64, f64)> {
    if bundle.eval.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let distorted: Vec<Result<(Vec<Tensor3>, f64)>> = bundle
        .eval_features
        .par_iter()
        .zip(deltas.par_iter())
        .enumerate()
        .map(|(i, (f, d))| {
            let g = distort_levels(f, d, spec, i as u64)?;
            let e = metrics::levels_nrmse(f, &g, metrics::DEFAULT_EPS)?;
            Ok((g, e))
        })
        .collect();
    let mut feats = Vec::with_capacity(distorted.len());
    let mut total = 0.0;
    for r in distorted {
        let (g, e) = r?;
        total += e;
        feats.push(g);
    }
    let perf = bundle.performance(&feats)?;
    Ok((total / feats.len() as f64, perf))
}

/// FeatJND rows for every α, then Gaussian rows for every (σ, seed).
pub fn matched_sweep(
    bundle: &TaskBundle,
    deltas: &[Vec<Tensor3>],
    alphas: &[f64],
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    if alphas.is_empty() || sigmas.is_empty() || seeds.is_empty() {
        return Err(Error::Validation("sweep grids must be nonempty".into()));
    }
    if deltas.len() != bundle.eval.len() {
        return Err(Error::shapes(bundle.eval.len(), deltas.len()));
    }
    let mut rows = Vec::with_capacity(alphas.len() + sigmas.len() * seeds.len());
    for &a in alphas {
        let (nrmse, performance) = evaluate_spec(bundle, deltas, &DistortionSpec::featjnd(a))?;
        rows.push(SweepRow {
            kind: DistortionKind::FeatjndScaled,
            alpha: Some(a),
            sigma: None,
            seed: None,
            nrmse,
            performance,
        });
    }
    for &s in sigmas {
        for &seed in seeds {
            let (nrmse, performance) = evaluate_spec(bundle, deltas, &DistortionSpec::gaussian(s, seed))?;
            rows.push(SweepRow {
                kind: DistortionKind::Gaussian,
                alpha: None,
                sigma: Some(s),
                seed: Some(seed),
                nrmse,
                performance,
            });
        }
    }
    Ok(SweepResult {
        clean_performance: bundle.clean_score,
        rows,
    })
}

/// Performance drop relative to clean at each α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub nrmse: f64,
    pub performance: f64,
    pub drop: f64,
}

pub fn alpha_sweep(bundle: &TaskBundle, deltas: &[Vec<Tensor3>], alphas: &[f64]) -> Result<Vec<AlphaRow>> {
    alphas
        .iter()
        .map(|&a| {
            let (nrmse, performance) = evaluate_spec(bundle, deltas, &DistortionSpec::featjnd(a))?;
            Ok(AlphaRow {
                alpha: a,
                nrmse,
                performance,
                drop: bundle.clean_score - performance,
            })
        })
        .collect()
}

/// `0, 0.25, …, 3.0`.
pub fn default_alphas() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.25).collect()
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// `0.1, 0.2, …, 1.0`.
pub fn nrmse_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// NRMSE targets for the Gaussian sweep: `0.05`, then `0.1, 0.2, …, 1.2`.
/// The ends sit outside [`nrmse_grid`] so matched points never need to
/// extrapolate the Gaussian curve.
pub fn default_sigma_targets() -> Vec<f64> {
    std::iter::once(0.05).chain((1..=12).map(|i| i as f64 / 10.0)).collect()
}

/// Gaussian σ values expected to hit each target NRMSE on the eval set.
/// Per-level NRMSE is `σ / rms_l`, so `σ = target / mean_l(1 / rms_l)`.
pub fn sigma_grid(bundle: &TaskBundle, targets: &[f64]) -> Vec<f64> {
    let nlev = bundle.eval_features[0].len();
    let mut inv = 0.0;
    for l in 0..nlev {
        let (mut sq, mut n) = (0.0, 0usize);
        for f in &bundle.eval_features {
            sq += f[l].sum_squares();
            n += f[l].shape().len();
        }
        inv += 1.0 / (sq / n as f64).sqrt();
    }
    let inv = inv / nlev as f64;
    targets.iter().map(|t| t / inv).collect()
}

/// Piecewise-linear interpolation of a curve sorted by x. Returns `None`
/// outside the curve's x range.
pub fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let first = curve.first()?;
    let last = curve.last()?;
    if x < first.0 || x > last.0 {
        return None;
    }
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            if x1 == x0 {
                return Some(y0);
            }
            return Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        }
    }
    (curve.len() == 1).then_some(first.1)
}

/// (NRMSE, performance) curves: FeatJND per α, Gaussian per σ averaged over seeds.
pub fn curves(result: &SweepResult) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut fj: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter(|r| r.kind == DistortionKind::FeatjndScaled)
        .map(|r| (r.nrmse, r.performance))
        .collect();
    let mut sigmas: Vec<f64> = Vec::new();
    for r in &result.rows {
        if let (DistortionKind::Gaussian, Some(s)) = (r.kind, r.sigma) {
            if !sigmas.contains(&s) {
                sigmas.push(s);
            }
        }
    }
    let mut ga: Vec<(f64, f64)> = sigmas
        .iter()
        .map(|&s| {
            let cell: Vec<&SweepRow> = result.rows.iter().filter(|r| r.sigma == Some(s)).collect();
            let n = cell.len() as f64;
            (
                cell.iter().map(|r| r.nrmse).sum::<f64>() / n,
                cell.iter().map(|r| r.performance).sum::<f64>() / n,
            )
        })
        .collect();
    fj.sort_by(|a, b| a.0.total_cmp(&b.0));
    ga.sort_by(|a, b| a.0.total_cmp(&b.0));
    (fj, ga)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPoint {
    pub nrmse: f64,
    pub featjnd: Option<f64>,
    pub gaussian: Option<f64>,
}

impl MatchedPoint {
    /// FeatJND minus Gaussian performance where both curves cover the point.
    pub fn margin(&self) -> Option<f64> {
        Some(self.featjnd? - self.gaussian?)
    }
}

pub fn matched_comparison(result: &SweepResult, grid: &[f64]) -> Vec<MatchedPoint> {
    let (fj, ga) = curves(result);
    grid.iter()
        .map(|&x| MatchedPoint {
            nrmse: x,
            featjnd: interpolate(&fj, x),
            gaussian: interpolate(&ga, x),
        })
        .collect()
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn kind_name(k: DistortionKind) -> &'static str {
    match k {
        DistortionKind::FeatjndScaled => "featjnd_scaled",
        DistortionKind::Gaussian => "gaussian",
    }
}

pub fn write_sweep_csv(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("# schema v1\nkind,alpha,sigma,seed,nrmse,performance\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            kind_name(r.kind),
            fmt_opt(r.alpha),
            fmt_opt(r.sigma),
            fmt_opt(r.seed),
            r.nrmse,
            r.performance
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_sweep_csv`]. The clean performance is the
/// α = 0 row when present.
pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<SweepResult> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(|e| Error::Format {
            field: "sweep",
            detail: e.to_string(),
        })?;
    let clean_performance = rows
        .iter()
        .find(|r| r.alpha == Some(0.0))
        .map_or(f64::NAN, |r| r.performance);
    Ok(SweepResult {
        clean_performance,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    #[test]
    fn trivial_distortions_leave_features_unchanged() {
        let f = FeatureTensor::new(Shape3::new(1, 2, 2), vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let d = FeatureTensor::new(Shape3::new(1, 2, 2), vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        assert_eq!(apply_distortion(&f, &d, &DistortionSpec::featjnd(0.0)).unwrap(), f);
        let z = FeatureTensor::zeros(f.shape()).unwrap();
        assert_eq!(apply_distortion(&f, &z, &DistortionSpec::featjnd(1.0)).unwrap(), f);
        assert!(apply_distortion(&f, &d, &DistortionSpec::featjnd(-1.0)).is_err());
        assert!(apply_distortion(&f, &d, &DistortionSpec::gaussian(-0.1, 0)).is_err());
    }

    #[test]
    fn gaussian_noise_has_requested_spread() {
        let shape = Shape3::new(10, 100, 100);
        let f = FeatureTensor::zeros(shape).unwrap();
        let g = apply_distortion(&f, &f, &DistortionSpec::gaussian(0.5, 7)).unwrap();
        let n = shape.len() as f64;
        let mean: f64 = g.values().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = g.values().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.5).abs() / 0.5 < 0.02, "std {}", var.sqrt());
        let again = apply_distortion(&f, &f, &DistortionSpec::gaussian(0.5, 7)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn interpolation_never_extrapolates() {
        let c = [(0.1, 1.0), (0.3, 0.5), (0.5, 0.0)];
        assert_eq!(interpolate(&c, 0.05), None);
        assert_eq!(interpolate(&c, 0.6), None);
        assert_eq!(interpolate(&c, 0.1), Some(1.0));
        assert!((interpolate(&c, 0.2).unwrap() - 0.75).abs() < 1e-12);
        assert!((interpolate(&c, 0.4).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(interpolate(&[], 0.2), None);
    }
}
