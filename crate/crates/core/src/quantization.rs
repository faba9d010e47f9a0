//! Token-wise quantization with step sizes allocated from a tolerance map.
//!
//! A token is one spatial position; its step is shared by all channels.
//! Step maps are scaled so the uniform-error noise model meets a budget:
//! `mean(Δ²/12) = σ_tgt²`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureTensor;
use crate::metrics;
use crate::nn;
use crate::taskbench::TaskBundle;
use crate::tensor::{Shape3, Tensor3};

/// Default stabilizer of the tolerance ratio denominator.
pub const DEFAULT_TOLERANCE_EPS: f64 = 1e-3;
/// Default relative floor: this fraction of the mean nonzero tolerance.
pub const DEFAULT_FLOOR_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAgg {
    #[default]
    ChannelMean,
    ChannelMin,
    ChannelMax,
}

/// One nonnegative value per token. Used for tolerance and step maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl TokenMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shapes((height, width), values.len()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("token map values must be finite and nonnegative".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    /// Mean of squared values.
    pub fn mean_square(&self) -> f64 {
        sorted_sum(self.values.iter().map(|v| v * v)) / self.values.len() as f64
    }

    /// Single-channel tensor for storage.
    pub fn to_feature(&self) -> Result<FeatureTensor> {
        FeatureTensor::new(
            Shape3::new(1, self.height, self.width),
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// `|δ| / (|f| + eps)` per element, reduced over channels per token.
pub fn tolerance_map(f: &Tensor3, delta: &Tensor3, eps: f64, agg: ChannelAgg) -> Result<TokenMap> {
    f.ensure_same_shape(delta)?;
    if !(eps >= 0.0) {
        return Err(Error::Validation(format!("eps must be nonnegative, got {eps}")));
    }
    let s = f.shape();
    let mut values = Vec::with_capacity(s.tokens());
    for y in 0..s.height {
        for x in 0..s.width {
            let ratios = (0..s.channels).map(|c| delta.get(c, y, x).abs() / (f.get(c, y, x).abs() + eps));
            let v = match agg {
                ChannelAgg::ChannelMean => ratios.sum::<f64>() / s.channels as f64,
                ChannelAgg::ChannelMin => ratios.fold(f64::INFINITY, f64::min),
                ChannelAgg::ChannelMax => ratios.fold(0.0, f64::max),
            };
            values.push(v);
        }
    }
    TokenMap::new(s.height, s.width, values)
}

/// `factor` times the mean of the nonzero tolerances; zero if there are none.
pub fn relative_floor(s: &TokenMap, factor: f64) -> f64 {
    let nz: Vec<f64> = s.values.iter().copied().filter(|v| *v > 0.0).collect();
    if nz.is_empty() {
        0.0
    } else {
        factor * sorted_sum(nz.iter().copied()) / nz.len() as f64
    }
}

fn floored_mean_square(s: &TokenMap, floor: f64) -> f64 {
    sorted_sum(s.values.iter().map(|v| v.max(floor).powi(2))) / s.values.len() as f64
}

/// Summing in sorted order makes map statistics, and hence the solved
/// scale, bit-identical under any permutation of the tokens.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Scale `λ` with `mean((λ·max(s, floor))²) / 12 = σ_tgt²`.
pub fn solve_lambda(s: &TokenMap, sigma_tgt: f64, floor: f64) -> Result<f64> {
    if !(sigma_tgt > 0.0) {
        return Err(Error::Validation(format!("sigma_tgt must be positive, got {sigma_tgt}")));
    }
    let ms = floored_mean_square(s, floor);
    if !(ms > 0.0) {
        return Err(Error::Degenerate("tolerance map is zero everywhere".into()));
    }
    Ok((12.0 * sigma_tgt * sigma_tgt / ms).sqrt())
}

/// `Δ = λ·max(s, floor)`.
pub fn step_map(s: &TokenMap, lambda: f64, floor: f64) -> TokenMap {
    TokenMap {
        height: s.height,
        width: s.width,
        values: s.values.iter().map(|v| lambda * v.max(floor)).collect(),
    }
}

/// Budget-matched step map for a tolerance map.
pub fn budget_steps(s: &TokenMap, sigma_tgt: f64, floor: f64) -> Result<TokenMap> {
    let lambda = solve_lambda(s, sigma_tgt, floor)?;
    Ok(step_map(s, lambda, floor))
}

/// Constant `Δ_u = √12·σ_tgt`.
pub fn uniform_baseline(sigma_tgt: f64, height: usize, width: usize) -> TokenMap {
    TokenMap::constant(height, width, 12f64.sqrt() * sigma_tgt)
}

/// Tokens shuffled uniformly at random.
pub fn permute_baseline(s: &TokenMap, seed: u64) -> TokenMap {
    permute_with(s, &mut nn::rng(seed, 0))
}

fn permute_with(s: &TokenMap, rng: &mut impl RngCore) -> TokenMap {
    let mut values = s.values.clone();
    values.shuffle(rng);
    TokenMap { values, ..*s }
}

/// Noise-model variance `mean(Δ²/12)` of a step map.
pub fn noise_budget(step: &TokenMap) -> f64 {
    step.mean_square() / 12.0
}

/// Whether `mean(Δ²/12)` equals `σ_tgt²` to a relative tolerance.
pub fn verify_budget(step: &TokenMap, sigma_tgt: f64, rel_tol: f64) -> bool {
    let target = sigma_tgt * sigma_tgt;
    (noise_budget(step) - target).abs() <= rel_tol * target
}

/// Round-to-nearest on the grid `Δ·ℤ`, ties away from zero.
#[inline]
pub fn quantize_value(x: f64, step: f64) -> f64 {
    step * (x / step).round()
}

/// Quantizes every element with its token's step.
pub fn quantize(f: &Tensor3, step: &TokenMap) -> Result<Tensor3> {
    let s = f.shape();
    if step.height != s.height || step.width != s.width {
        return Err(Error::shapes((s.height, s.width), (step.height, step.width)));
    }
    if step.values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Validation("step sizes must be strictly positive".into()));
    }
    let n = s.tokens();
    let mut out = f.clone();
    for c in 0..s.channels {
        let plane = out.plane_mut(c);
        for t in 0..n {
            plane[t] = quantize_value(plane[t], step.values[t]);
        }
    }
    Ok(out)
}

/// Interface-precision variant of [`quantize`].
pub fn quantize_feature(f: &FeatureTensor, step: &TokenMap) -> Result<FeatureTensor> {
    FeatureTensor::from_tensor(&quantize(&f.to_tensor(), step)?)
}

/// Empirical `E[(Q(x) − x)²]` over `n ≥ 10⁴` draws from `sampler`.
pub fn quant_error_moment(
    mut sampler: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64,
    step: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n < 10_000 {
        return Err(Error::Validation(format!("need at least 10^4 samples, got {n}")));
    }
    if !(step > 0.0) {
        return Err(Error::Validation("step must be positive".into()));
    }
    let mut rng = nn::rng(seed, 0);
    let mut acc = 0.0;
    for _ in 0..n {
        let x = sampler(&mut rng);
        let e = quantize_value(x, step) - x;
        acc += e * e;
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    Featjnd,
    Random,
    Uniform,
}

impl QuantMethod {
    pub fn name(self) -> &'static str {
        match self {
            QuantMethod::Featjnd => "featjnd",
            QuantMethod::Random => "random",
            QuantMethod::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Absolute noise budgets. Empty means `sigma_fractions × feature RMS`.
    #[serde(default)]
    pub sigma_tgt: Vec<f64>,
    #[serde(default = "default_fractions")]
    pub sigma_fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub agg: ChannelAgg,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_floor")]
    pub floor_factor: f64,
}

fn default_fractions() -> Vec<f64> {
    vec![0.3, 0.4, 0.5, 0.6, 0.7]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_eps() -> f64 {
    DEFAULT_TOLERANCE_EPS
}
fn default_floor() -> f64 {
    DEFAULT_FLOOR_FACTOR
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            sigma_tgt: Vec::new(),
            sigma_fractions: default_fractions(),
            seeds: default_seeds(),
            agg: ChannelAgg::default(),
            eps: default_eps(),
            floor_factor: default_floor(),
        }
    }
}

impl QuantConfig {
    /// Absolute budgets for a bundle.
    pub fn resolve_sigmas(&self, bundle: &TaskBundle) -> Vec<f64> {
        if !self.sigma_tgt.is_empty() {
            return self.sigma_tgt.clone();
        }
        let (mut sq, mut n) = (0.0, 0usize);
        for f in bundle.eval_features.iter().flatten() {
            sq += f.sum_squares();
            n += f.shape().len();
        }
        let rms = (sq / n as f64).sqrt();
        self.sigma_fractions.iter().map(|r| r * rms).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub sigma_tgt: f64,
    pub method: QuantMethod,
    pub seed: Option<u64>,
    pub performance: Option<f64>,
    pub nrmse: Option<f64>,
    /// Mean of `Δ²/12` over every quantized tensor.
    pub budget: Option<f64>,
    pub status: String,
}

impl QuantRow {
    pub fn budget_exact(&self) -> bool {
        self.budget.is_some_and(|b| {
            let t = self.sigma_tgt * self.sigma_tgt;
            (b - t).abs() <= 1e-10 * t
        })
    }
}

fn steps_for(
    method: QuantMethod,
    f: &Tensor3,
    delta: &Tensor3,
    sigma: f64,
    seed: u64,
    stream: u64,
    cfg: &QuantConfig,
) -> Result<TokenMap> {
    let s = f.shape();
    if method == QuantMethod::Uniform {
        return Ok(uniform_baseline(sigma, s.height, s.width));
    }
    let tol = tolerance_map(f, delta, cfg.eps, cfg.agg)?;
    let floor = relative_floor(&tol, cfg.floor_factor);
    let tol = match method {
        QuantMethod::Random => permute_with(&tol, &mut nn::rng(seed, stream)),
        _ => tol,
    };
    budget_steps(&tol, sigma, floor)
}

/// Quantizes every eval example with one method and scores it.
pub fn quantize_eval(
    bundle: &TaskBundle,
    deltas: &[Vec<Tensor3>],
    method: QuantMethod,
    sigma: f64,
    seed: u64,
    cfg: &QuantConfig,
) -> QuantRow {
    let per: Vec<Result<(Vec<Tensor3>, f64, f64, usize)>> = bundle
        .eval_features
        .par_iter()
        .zip(deltas.par_iter())
        .enumerate()
        .map(|(i, (f, d))| {
            let mut q = Vec::with_capacity(f.len());
            let mut budget = 0.0;
            for (l, (fl, dl)) in f.iter().zip(d).enumerate() {
                let stream = (i * f.len() + l) as u64;
                let step = steps_for(method, fl, dl, sigma, seed, stream, cfg)?;
                budget += noise_budget(&step);
                q.push(quantize(fl, &step)?);
            }
            let e = metrics::levels_nrmse(f, &q, metrics::DEFAULT_EPS)?;
            Ok((q, e, budget, f.len()))
        })
        .collect();
    let mut row = QuantRow {
        sigma_tgt: sigma,
        method,
        seed: (method == QuantMethod::Random).then_some(seed),
        performance: None,
        nrmse: None,
        budget: None,
        status: "ok".into(),
    };
    let mut feats = Vec::with_capacity(per.len());
    let (mut nrmse, mut budget, mut tensors) = (0.0, 0.0, 0usize);
    for r in per {
        match r {
            Ok((q, e, b, n)) => {
                feats.push(q);
                nrmse += e;
                budget += b;
                tensors += n;
            }
            Err(e) => {
                row.status = format!("degenerate: {e}");
                return row;
            }
        }
    }
    match bundle.performance(&feats) {
        Ok(p) => row.performance = Some(p),
        Err(e) => row.status = format!("error: {e}"),
    }
    row.nrmse = Some(nrmse / feats.len() as f64);
    row.budget = Some(budget / tensors as f64);
    row
}

/// For each budget: one FeatJND row, one random row per seed, one uniform
/// row per seed (uniform steps do not depend on the seed).
pub fn quant_experiment(bundle: &TaskBundle, deltas: &[Vec<Tensor3>], cfg: &QuantConfig) -> Result<Vec<QuantRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Validation("quantization needs at least one seed".into()));
    }
    if deltas.len() != bundle.eval.len() {
        return Err(Error::shapes(bundle.eval.len(), deltas.len()));
    }
    let mut rows = Vec::new();
    for sigma in cfg.resolve_sigmas(bundle) {
        rows.push(quantize_eval(bundle, deltas, QuantMethod::Featjnd, sigma, 0, cfg));
        for &seed in &cfg.seeds {
            rows.push(quantize_eval(bundle, deltas, QuantMethod::Random, sigma, seed, cfg));
        }
        let uniform = quantize_eval(bundle, deltas, QuantMethod::Uniform, sigma, 0, cfg);
        for &seed in &cfg.seeds {
            rows.push(QuantRow {
                seed: Some(seed),
                ..uniform.clone()
            });
        }
    }
    Ok(rows)
}

/// Per budget: FeatJND performance, random mean over seeds, uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSummary {
    pub sigma_tgt: f64,
    pub featjnd: f64,
    pub random_mean: f64,
    pub uniform: f64,
    pub budgets_exact: bool,
}

pub fn summarize(rows: &[QuantRow]) -> Vec<QuantSummary> {
    let mut sigmas: Vec<f64> = Vec::new();
    for r in rows {
        if !sigmas.contains(&r.sigma_tgt) {
            sigmas.push(r.sigma_tgt);
        }
    }
    sigmas
        .into_iter()
        .map(|s| {
            let cell: Vec<&QuantRow> = rows.iter().filter(|r| r.sigma_tgt == s).collect();
            let mean = |m: QuantMethod| {
                let v: Vec<f64> = cell
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| r.performance.unwrap_or(f64::NAN))
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            QuantSummary {
                sigma_tgt: s,
                featjnd: mean(QuantMethod::Featjnd),
                random_mean: mean(QuantMethod::Random),
                uniform: mean(QuantMethod::Uniform),
                budgets_exact: cell.iter().all(|r| r.budget_exact()),
            }
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_quant_csv(rows: &[QuantRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("# schema v1\nsigma_tgt,method,seed,performance,nrmse,budget,budget_exact,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sigma_tgt,
            r.method.name(),
            opt(r.seed),
            opt(r.performance),
            opt(r.nrmse),
            opt(r.budget),
            r.budget_exact(),
            r.status.replace(',', ";")
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct CsvRow {
    sigma_tgt: f64,
    method: QuantMethod,
    seed: Option<u64>,
    performance: Option<f64>,
    nrmse: Option<f64>,
    budget: Option<f64>,
    #[allow(dead_code)]
    budget_exact: bool,
    status: String,
}

pub fn read_quant_csv(path: impl AsRef<Path>) -> Result<Vec<QuantRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    rdr.deserialize::<CsvRow>()
        .map(|r| {
            let r = r.map_err(|e| Error::Format {
                field: "quant",
                detail: e.to_string(),
            })?;
            Ok(QuantRow {
                sigma_tgt: r.sigma_tgt,
                method: r.method,
                seed: r.seed,
                performance: r.performance,
                nrmse: r.nrmse,
                budget: r.budget,
                status: r.status,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor3 {
        Tensor3::from_vec(Shape3::new(c, h, w), v).unwrap()
    }

    #[test]
    fn tolerance_examples() {
        let f = tensor(1, 1, 1, vec![2.0]);
        let d = tensor(1, 1, 1, vec![1.0]);
        assert_eq!(tolerance_map(&f, &d, 0.0, ChannelAgg::ChannelMean).unwrap().values, vec![0.5]);
        let z = tensor(1, 1, 1, vec![0.0]);
        assert_eq!(tolerance_map(&f, &z, 1e-3, ChannelAgg::ChannelMean).unwrap().values, vec![0.0]);
        // per-channel ratios 0.1, 0.2, 0.3, 0.4
        let f = tensor(4, 1, 1, vec![1.0; 4]);
        let d = tensor(4, 1, 1, vec![0.1, 0.2, 0.3, 0.4]);
        let mean = tolerance_map(&f, &d, 0.0, ChannelAgg::ChannelMean).unwrap().values[0];
        assert!((mean - 0.25).abs() < 1e-15);
        assert_eq!(tolerance_map(&f, &d, 0.0, ChannelAgg::ChannelMin).unwrap().values[0], 0.1);
        assert_eq!(tolerance_map(&f, &d, 0.0, ChannelAgg::ChannelMax).unwrap().values[0], 0.4);
    }

    #[test]
    fn solve_lambda_examples() {
        let ones = TokenMap::constant(2, 2, 1.0);
        let l = solve_lambda(&ones, (1.0f64 / 12.0).sqrt(), 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        let twos = TokenMap::constant(3, 3, 2.0);
        let l = solve_lambda(&twos, 1.0, 0.0).unwrap();
        assert!((l - 3f64.sqrt()).abs() < 1e-15);
        assert!((noise_budget(&step_map(&twos, l, 0.0)) - 1.0).abs() < 1e-15);
        let zeros = TokenMap::constant(2, 2, 0.0);
        assert!(matches!(solve_lambda(&zeros, 1.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.4, 1.0), 0.0);
        assert_eq!(quantize_value(1.3, 0.5), 1.5);
        assert_eq!(quantize_value(0.5, 1.0), 1.0);
        assert_eq!(quantize_value(-0.5, 1.0), -1.0);
        let f = tensor(2, 1, 2, vec![0.4, 1.3, -0.4, 2.6]);
        let step = TokenMap::new(1, 2, vec![1.0, 0.5]).unwrap();
        assert_eq!(quantize(&f, &step).unwrap().data(), &[0.0, 1.5, -0.0, 2.5]);
        assert!(quantize(&f, &TokenMap::constant(1, 2, 0.0)).is_err());
    }

    #[test]
    fn uniform_baseline_examples() {
        assert!((uniform_baseline(1.0, 1, 1).values[0] - 3.46410).abs() < 1e-5);
        assert!((uniform_baseline((1.0f64 / 12.0).sqrt(), 1, 1).values[0] - 1.0).abs() < 1e-15);
        assert!(verify_budget(&uniform_baseline(0.3, 4, 4), 0.3, 1e-10));
    }

    #[test]
    fn permutation_keeps_multiset() {
        let s = TokenMap::new(2, 3, vec![0.1, 0.5, 0.0, 2.0, 0.3, 0.7]).unwrap();
        let p = permute_baseline(&s, 11);
        assert_eq!(p.mean_square(), s.mean_square());
        let mut a = s.values.clone();
        let mut b = p.values.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(solve_lambda(&s, 0.2, 0.0).unwrap(), solve_lambda(&p, 0.2, 0.0).unwrap());
    }

    #[test]
    fn error_moment_examples() {
        use rand::Rng;
        let m = quant_error_moment(|r| r.random_range(0.0..100.0), 1.0, 200_000, 3).unwrap();
        assert!((m - 1.0 / 12.0).abs() / (1.0 / 12.0) < 0.02, "{m}");
        let on_grid = quant_error_moment(|r| r.random_range(0..50) as f64 * 0.25, 0.25, 10_000, 1).unwrap();
        assert_eq!(on_grid, 0.0);
        assert!(quant_error_moment(|_| 0.0, 1.0, 10, 0).is_err());
    }

    #[test]
    fn relative_floor_uses_nonzero_mean() {
        let s = TokenMap::new(1, 4, vec![0.0, 1.0, 3.0, 0.0]).unwrap();
        assert_eq!(relative_floor(&s, 1e-3), 2e-3);
        assert_eq!(relative_floor(&TokenMap::constant(1, 2, 0.0), 1e-3), 0.0);
    }
}
