//! Estimator training against a frozen task bundle.
//!
//! Per sample the objective is `λ_t · D_t(head(f), head(f + δ)) − ‖δ‖₂`,
//! averaged over the batch. Clean head outputs and ROI alignments are
//! computed once from the cached clean features.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{self, DiscrepancyConfig, HeadOutputs};
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, EstimatorParams, Mode};
use crate::metrics;
use crate::nn::{self, Adam};
use crate::taskbench::{Alignment, TaskBundle, TaskHead};
use crate::tensor::{self, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeMode {
    /// ℓ2 norm over every element (all levels).
    #[default]
    L2Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_t: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub magnitude_mode: MagnitudeMode,
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
    pub seed: u64,
}

fn default_beta() -> f64 {
    1.0
}

impl TrainConfig {
    /// Classification recipe: `λ_t = 50`, `T = 4`, learning rate `1e-4`.
    pub fn classification() -> Self {
        Self {
            lambda_t: 50.0,
            temperature: 4.0,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 30,
            grad_clip_norm: 1.0,
            magnitude_mode: MagnitudeMode::L2Sum,
            smooth_l1_beta: 1.0,
            seed: 0,
        }
    }

    /// Multi-head recipe: `λ_t = 200`, learning rate `2e-5`.
    pub fn multi_head() -> Self {
        Self {
            lambda_t: 200.0,
            learning_rate: 2e-5,
            ..Self::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_t", self.lambda_t),
            ("temperature", self.temperature),
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("smooth_l1_beta", self.smooth_l1_beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn discrepancy(&self, bundle: &TaskBundle) -> DiscrepancyConfig {
        DiscrepancyConfig {
            smooth_l1_beta: self.smooth_l1_beta,
            ..DiscrepancyConfig::new(bundle.task(), self.temperature)
        }
    }
}

/// Perturbation size of a (possibly multi-level) map.
pub fn magnitude(delta: &[Tensor3], mode: MagnitudeMode) -> f64 {
    match mode {
        MagnitudeMode::L2Sum => tensor::levels_sum_squares(delta).sqrt(),
    }
}

/// Value and parts of the per-sample objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub discrepancy: f64,
    pub magnitude: f64,
}

/// `λ_t · D_t(head(f), head(f + δ)) − M(δ)` for one sample.
pub fn featjnd_loss(
    f: &[Tensor3],
    delta: &[Tensor3],
    head_eval: impl Fn(&[Tensor3]) -> Result<HeadOutputs>,
    disc: &DiscrepancyConfig,
    lambda_t: f64,
    mode: MagnitudeMode,
) -> Result<LossTerms> {
    let distorted = tensor::levels_axpy(f, 1.0, delta)?;
    let clean = head_eval(f)?;
    let dist = head_eval(&distorted)?;
    let d = discrepancy::discrepancy(&clean, &dist, disc)?;
    let m = magnitude(delta, mode);
    Ok(LossTerms {
        loss: lambda_t * d - m,
        discrepancy: d,
        magnitude: m,
    })
}

/// Clean outputs and alignments of the training set, computed once.
pub struct TrainCache {
    align: Vec<Alignment>,
    clean: Vec<HeadOutputs>,
}

impl TrainCache {
    pub fn new(bundle: &TaskBundle) -> Self {
        let (align, clean) = bundle
            .train_features
            .par_iter()
            .map(|f| {
                let a = bundle.head.align(f);
                let o = bundle.head.outputs(f, &a);
                (a, o)
            })
            .unzip();
        Self { align, clean }
    }
}

/// Batch means of the objective and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BatchStats {
    pub loss: f64,
    pub magnitude: f64,
    pub discrepancy: f64,
    pub nrmse: f64,
}

struct SampleResult {
    loss: f64,
    disc: f64,
    mag: f64,
    nrmse: f64,
    grads: Vec<Tensor3>,
}

/// Batch-mean objective over training examples `indices` and its gradient
/// with respect to every estimator parameter.
pub fn batch_loss_and_grad(
    params: &EstimatorParams,
    est: &EstimatorConfig,
    bundle: &TaskBundle,
    cache: &TrainCache,
    cfg: &TrainConfig,
    indices: &[usize],
    mode: Mode,
) -> Result<(BatchStats, Vec<Vec<f64>>, estimator::ForwardCache)> {
    if indices.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let disc = cfg.discrepancy(bundle);
    let nlev = bundle.train_features[indices[0]].len();
    let inputs: Vec<Tensor3> = indices
        .iter()
        .flat_map(|&i| bundle.train_features[i].iter().cloned())
        .collect();
    let (deltas, fcache) = estimator::forward_batch(params, est, &inputs, mode)?;
    let n = indices.len() as f64;
    let lambda = cfg.lambda_t;
    let per: Vec<Result<SampleResult>> = indices
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let f = &bundle.train_features[i];
            let delta = &deltas[j * nlev..(j + 1) * nlev];
            let distorted = tensor::levels_axpy(f, 1.0, delta)?;
            let out = bundle.head.outputs(&distorted, &cache.align[i]);
            let (terms, g_out) = discrepancy::discrepancy_with_grad(&cache.clean[i], &out, &disc)?;
            let d = terms.total();
            let mag = magnitude(delta, cfg.magnitude_mode);
            let g_feat = bundle.head.backward(&distorted, &cache.align[i], &g_out, None);
            let grads = g_feat
                .iter()
                .zip(delta)
                .map(|(gf, dl)| {
                    gf.zip_map(dl, |g, v| {
                        let gm = if mag > 0.0 { v / mag } else { 0.0 };
                        (lambda * g - gm) / n
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleResult {
                loss: lambda * d - mag,
                disc: d,
                mag,
                nrmse: metrics::levels_nrmse(f, &distorted, metrics::DEFAULT_EPS)?,
                grads,
            })
        })
        .collect();
    let mut stats = BatchStats::default();
    let mut out_grads = Vec::with_capacity(inputs.len());
    for r in per {
        let r = r?;
        stats.loss += r.loss / n;
        stats.discrepancy += r.disc / n;
        stats.magnitude += r.mag / n;
        stats.nrmse += r.nrmse / n;
        out_grads.extend(r.grads);
    }
    if !stats.discrepancy.is_finite() {
        return Err(Error::Divergence(format!("discrepancy term is {}", stats.discrepancy)));
    }
    if !stats.magnitude.is_finite() {
        return Err(Error::Divergence(format!("magnitude term is {}", stats.magnitude)));
    }
    let grads = estimator::backward_batch(params, est, &fcache, &out_grads, false)?.params;
    Ok((stats, grads, fcache))
}

/// Optimizer state carried across steps.
pub struct Trainer {
    pub params: EstimatorParams,
    pub est: EstimatorConfig,
    pub cfg: TrainConfig,
    pub opt: Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub stats: BatchStats,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl Trainer {
    pub fn new(est: EstimatorConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = estimator::init_estimator(&est, cfg.seed)?;
        let opt = Adam::new(&params.set, cfg.learning_rate);
        Ok(Self { params, est, cfg, opt })
    }

    /// One clipped Adam step on the batch objective.
    pub fn train_step(&mut self, bundle: &TaskBundle, cache: &TrainCache, batch: &[usize]) -> Result<StepReport> {
        let (stats, mut grads, fcache) =
            batch_loss_and_grad(&self.params, &self.est, bundle, cache, &self.cfg, batch, Mode::Train)?;
        if !grads.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Divergence("estimator gradient is not finite".into()));
        }
        let (grad_norm, clip_scale) = nn::clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        self.opt.step(&mut self.params.set, &grads)?;
        estimator::update_running_stats(&mut self.params, &self.est, &fcache);
        if !self.params.set.is_finite() {
            return Err(Error::Divergence("estimator parameters became non-finite".into()));
        }
        Ok(StepReport {
            stats,
            grad_norm,
            clip_scale,
        })
    }
}

/// Per-epoch means over the training batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_magnitude: f64,
    pub mean_discrepancy: f64,
    pub mean_nrmse: f64,
}

/// Trains a fresh estimator on the bundle's training set. The returned
/// parameters are rounded to f32 so they equal their checkpoint.
pub fn train_loop(bundle: &TaskBundle, est: &EstimatorConfig, cfg: &TrainConfig) -> Result<(EstimatorParams, Vec<EpochLog>)> {
    let before = bundle.checksum();
    let mut trainer = Trainer::new(*est, cfg.clone())?;
    let cache = TrainCache::new(bundle);
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut rng = nn::rng(cfg.seed, 0x747261696e);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = BatchStats::default();
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let r = trainer.train_step(bundle, &cache, batch)?;
            let w = batch.len() as f64;
            acc.loss += w * r.stats.loss;
            acc.magnitude += w * r.stats.magnitude;
            acc.discrepancy += w * r.stats.discrepancy;
            acc.nrmse += w * r.stats.nrmse;
            seen += batch.len();
        }
        let n = seen as f64;
        log.push(EpochLog {
            epoch,
            mean_loss: acc.loss / n,
            mean_magnitude: acc.magnitude / n,
            mean_discrepancy: acc.discrepancy / n,
            mean_nrmse: acc.nrmse / n,
        });
    }
    if bundle.checksum() != before {
        return Err(Error::Validation("task network parameters changed during training".into()));
    }
    let mut params = trainer.params;
    params.set.round_to_f32();
    Ok((params, log))
}

/// Inference-mode objective means over eval examples.
pub fn eval_objective(
    params: &EstimatorParams,
    est: &EstimatorConfig,
    bundle: &TaskBundle,
    cfg: &TrainConfig,
) -> Result<BatchStats> {
    let disc = cfg.discrepancy(bundle);
    let deltas = predict_eval(params, est, bundle)?;
    let n = bundle.eval.len() as f64;
    let per: Vec<Result<BatchStats>> = (0..bundle.eval.len())
        .into_par_iter()
        .map(|i| {
            let f = &bundle.eval_features[i];
            let distorted = tensor::levels_axpy(f, 1.0, &deltas[i])?;
            let clean = bundle.eval_outputs(i, f);
            let out = bundle.eval_outputs(i, &distorted);
            let d = discrepancy::discrepancy(&clean, &out, &disc)?;
            let m = magnitude(&deltas[i], cfg.magnitude_mode);
            Ok(BatchStats {
                loss: cfg.lambda_t * d - m,
                magnitude: m,
                discrepancy: d,
                nrmse: metrics::levels_nrmse(f, &distorted, metrics::DEFAULT_EPS)?,
            })
        })
        .collect();
    let mut acc = BatchStats::default();
    for s in per {
        let s = s?;
        acc.loss += s.loss / n;
        acc.magnitude += s.magnitude / n;
        acc.discrepancy += s.discrepancy / n;
        acc.nrmse += s.nrmse / n;
    }
    Ok(acc)
}

/// Inference-mode perturbation maps for every eval example.
pub fn predict_eval(params: &EstimatorParams, est: &EstimatorConfig, bundle: &TaskBundle) -> Result<Vec<Vec<Tensor3>>> {
    bundle
        .eval_features
        .par_iter()
        .map(|f| estimator::predict(params, est, f))
        .collect()
}

/// Writes the training log as CSV with a schema comment row.
pub fn write_log_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = b"# schema v1\nepoch,mean_loss,mean_magnitude,mean_discrepancy,mean_nrmse\n".to_vec();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        for row in log {
            w.serialize(row).map_err(|e| Error::Format {
                field: "log",
                detail: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    #[test]
    fn magnitude_examples() {
        let z = Tensor3::zeros(Shape3::new(2, 2, 2));
        assert_eq!(magnitude(&[z], MagnitudeMode::L2Sum), 0.0);
        let t = Tensor3::from_vec(Shape3::new(1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(magnitude(&[t], MagnitudeMode::L2Sum), 5.0);
    }

    #[test]
    fn magnitude_matches_scalar_accumulation() {
        let mut r = nn::rng(5, 0);
        let a = Tensor3::from_vec(Shape3::new(3, 4, 5), nn::normal_init(&mut r, 60, 2.0)).unwrap();
        let b = Tensor3::from_vec(Shape3::new(3, 2, 2), nn::normal_init(&mut r, 12, 2.0)).unwrap();
        let mut acc = 0.0;
        for v in a.data().iter().chain(b.data()) {
            acc += v * v;
        }
        let m = magnitude(&[a, b], MagnitudeMode::L2Sum);
        assert!((m - acc.sqrt()).abs() <= 1e-12 * m);
    }

    #[test]
    fn config_rejects_nonpositive_values() {
        let mut c = TrainConfig::classification();
        assert!(c.validate().is_ok());
        c.lambda_t = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::classification();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::multi_head().lambda_t, 200.0);
    }
}
