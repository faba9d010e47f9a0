//! The tolerance estimator: a shallow convolutional network mapping a
//! feature map to a same-shaped, clamped perturbation map.
//!
//! ```text
//! f ─ conv3x3 (C→H) ─┬─ [conv1x1 → BN → act → conv1x1] ─(+)─ ... ─ conv1x1 (H→C) ─ clamp ─ δ
//!                    └──────────────────────────────────┘
//! ```
//!
//! The same parameters are applied to every pyramid level. In training mode
//! batch normalization uses statistics pooled over every map and position in
//! the batch; inference mode uses the stored running statistics and is
//! therefore independent of the batch.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{self, FeaturePyramid, FeatureTensor, JndMap};
use crate::nn::{self, ParamSet};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - v.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub in_channels: usize,
    #[serde(default = "defaults::hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "defaults::num_residual_blocks")]
    pub num_residual_blocks: usize,
    #[serde(default = "defaults::clamp_bound")]
    pub clamp_bound: f64,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    /// Batch normalization inside the residual blocks.
    #[serde(default = "defaults::normalization")]
    pub normalization: bool,
    #[serde(default = "defaults::bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "defaults::bn_eps")]
    pub bn_eps: f64,
}

mod defaults {
    use super::Activation;
    pub fn hidden_width() -> usize {
        64
    }
    pub fn num_residual_blocks() -> usize {
        2
    }
    pub fn clamp_bound() -> f64 {
        10.0
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn normalization() -> bool {
        true
    }
    pub fn bn_momentum() -> f64 {
        0.1
    }
    pub fn bn_eps() -> f64 {
        1e-5
    }
}

impl EstimatorConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            hidden_width: defaults::hidden_width(),
            num_residual_blocks: defaults::num_residual_blocks(),
            clamp_bound: defaults::clamp_bound(),
            activation: defaults::activation(),
            normalization: defaults::normalization(),
            bn_momentum: defaults::bn_momentum(),
            bn_eps: defaults::bn_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_width == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.num_residual_blocks == 0 {
            return Err(Error::Validation("need at least one residual block".into()));
        }
        if !(self.clamp_bound > 0.0) {
            return Err(Error::Validation(format!(
                "clamp_bound must be positive, got {}",
                self.clamp_bound
            )));
        }
        Ok(())
    }
}

/// Forward-pass normalization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

// parameter slots
const CONV_IN_W: usize = 0;
const CONV_IN_B: usize = 1;
const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 8;
const A_W: usize = 0;
const A_B: usize = 1;
const GAMMA: usize = 2;
const BETA: usize = 3;
const RUN_MEAN: usize = 4;
const RUN_VAR: usize = 5;
const B_W: usize = 6;
const B_B: usize = 7;

fn block_slot(j: usize, k: usize) -> usize {
    BLOCK_BASE + j * PER_BLOCK + k
}

fn proj_w(cfg: &EstimatorConfig) -> usize {
    BLOCK_BASE + cfg.num_residual_blocks * PER_BLOCK
}

/// Estimator weights, biases and normalization statistics in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub set: ParamSet,
}

impl EstimatorParams {
    pub fn checksum(&self) -> String {
        self.set.checksum()
    }
}

/// Deterministic initialization. The projection is scaled down so a fresh
/// estimator predicts a near-zero map. Values are f32-representable, so an
/// untrained estimator equals its checkpoint.
pub fn init_estimator(cfg: &EstimatorConfig, seed: u64) -> Result<EstimatorParams> {
    cfg.validate()?;
    let (c, h) = (cfg.in_channels, cfg.hidden_width);
    let mut rng = nn::rng(seed, 0x6a6e64);
    let mut set = ParamSet::default();
    set.push(
        "conv_in.weight",
        vec![h, c, 3, 3],
        nn::normal_init(&mut rng, h * c * 9, (2.0 / (9 * c) as f64).sqrt()),
        true,
    );
    set.push("conv_in.bias", vec![h], vec![0.0; h], true);
    for j in 0..cfg.num_residual_blocks {
        set.push(
            format!("block{j}.a.weight"),
            vec![h, h, 1, 1],
            nn::normal_init(&mut rng, h * h, (2.0 / h as f64).sqrt()),
            true,
        );
        set.push(format!("block{j}.a.bias"), vec![h], vec![0.0; h], true);
        set.push(format!("block{j}.bn.gamma"), vec![h], vec![1.0; h], true);
        set.push(format!("block{j}.bn.beta"), vec![h], vec![0.0; h], true);
        set.push(format!("block{j}.bn.running_mean"), vec![h], vec![0.0; h], false);
        set.push(format!("block{j}.bn.running_var"), vec![h], vec![1.0; h], false);
        set.push(
            format!("block{j}.b.weight"),
            vec![h, h, 1, 1],
            nn::normal_init(&mut rng, h * h, (1.0 / h as f64).sqrt()),
            true,
        );
        set.push(format!("block{j}.b.bias"), vec![h], vec![0.0; h], true);
    }
    set.push(
        "proj.weight",
        vec![c, h, 1, 1],
        nn::normal_init(&mut rng, c * h, 0.01 * (1.0 / h as f64).sqrt()),
        true,
    );
    set.push("proj.bias", vec![c], vec![0.0; c], true);
    set.round_to_f32();
    Ok(EstimatorParams { set })
}

struct BlockCache {
    input: Tensor3,
    /// Normalized pre-activation (`x̂`), or the raw conv output when
    /// normalization is off.
    xhat: Tensor3,
    /// Post-normalization, pre-activation.
    v: Tensor3,
    r: Tensor3,
}

struct MapCache {
    x: Tensor3,
    blocks: Vec<BlockCache>,
    last: Tensor3,
    pre: Tensor3,
}

/// Per-channel statistics a block normalized with.
#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

/// Everything the backward pass needs from a batched forward.
pub struct ForwardCache {
    mode: Mode,
    maps: Vec<MapCache>,
    stats: Vec<BnStats>,
}

impl ForwardCache {
    /// Unclamped projection output for map `i`.
    pub fn pre_clamp(&self, i: usize) -> &Tensor3 {
        &self.maps[i].pre
    }
}

fn check_channels(cfg: &EstimatorConfig, shape: Shape3) -> Result<()> {
    if shape.channels != cfg.in_channels {
        return Err(Error::Validation(format!(
            "estimator expects {} channels, got {}",
            cfg.in_channels, shape.channels
        )));
    }
    Ok(())
}

fn channel_stats(maps: &[Tensor3], h: usize) -> BnStats {
    let count: usize = maps.iter().map(|m| m.shape().tokens()).sum();
    let mut mean = vec![0.0; h];
    let mut var = vec![0.0; h];
    for c in 0..h {
        let s: f64 = maps.iter().map(|m| m.plane(c).iter().sum::<f64>()).sum();
        mean[c] = s / count as f64;
        let sq: f64 = maps
            .iter()
            .map(|m| m.plane(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
            .sum();
        var[c] = sq / count as f64;
    }
    BnStats { mean, var, count }
}

/// Batched forward pass. Returns the clamped maps and the cache for
/// [`backward_batch`].
pub fn forward_batch(
    params: &EstimatorParams,
    cfg: &EstimatorConfig,
    inputs: &[Tensor3],
    mode: Mode,
) -> Result<(Vec<Tensor3>, ForwardCache)> {
    cfg.validate()?;
    for x in inputs {
        check_channels(cfg, x.shape())?;
    }
    let p = &params.set;
    let h = cfg.hidden_width;
    let mut acts: Vec<Tensor3> = inputs
        .par_iter()
        .map(|x| nn::conv2d(x, p.get(CONV_IN_W), p.get(CONV_IN_B), h, 3))
        .collect();
    let mut blocks: Vec<Vec<BlockCache>> = inputs.iter().map(|_| Vec::new()).collect();
    let mut stats = Vec::with_capacity(cfg.num_residual_blocks);
    for j in 0..cfg.num_residual_blocks {
        let us: Vec<Tensor3> = acts
            .par_iter()
            .map(|a| nn::conv2d(a, p.get(block_slot(j, A_W)), p.get(block_slot(j, A_B)), h, 1))
            .collect();
        let st = match (cfg.normalization, mode) {
            (false, _) => BnStats {
                mean: vec![0.0; h],
                var: vec![1.0 - cfg.bn_eps; h],
                count: 0,
            },
            (true, Mode::Train) => channel_stats(&us, h),
            (true, Mode::Inference) => BnStats {
                mean: p.get(block_slot(j, RUN_MEAN)).to_vec(),
                var: p.get(block_slot(j, RUN_VAR)).to_vec(),
                count: 0,
            },
        };
        let (gamma, beta) = if cfg.normalization {
            (p.get(block_slot(j, GAMMA)).to_vec(), p.get(block_slot(j, BETA)).to_vec())
        } else {
            (vec![1.0; h], vec![0.0; h])
        };
        let inv_std: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();
        let results: Vec<(Tensor3, BlockCache)> = us
            .into_par_iter()
            .zip(acts.into_par_iter())
            .map(|(u, a)| {
                let mut xhat = u;
                for c in 0..h {
                    let (m, is) = (st.mean[c], inv_std[c]);
                    xhat.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) * is);
                }
                let mut v = xhat.clone();
                for c in 0..h {
                    let (g, b) = (gamma[c], beta[c]);
                    v.plane_mut(c).iter_mut().for_each(|x| *x = g * *x + b);
                }
                let r = v.map(|x| cfg.activation.apply(x));
                let z = nn::conv2d(&r, p.get(block_slot(j, B_W)), p.get(block_slot(j, B_B)), h, 1);
                let out = a.add(&z).expect("residual shapes");
                (
                    out,
                    BlockCache {
                        input: a,
                        xhat,
                        v,
                        r,
                    },
                )
            })
            .collect();
        acts = Vec::with_capacity(results.len());
        for (i, (out, cache)) in results.into_iter().enumerate() {
            acts.push(out);
            blocks[i].push(cache);
        }
        stats.push(st);
    }
    let pw = proj_w(cfg);
    let bound = cfg.clamp_bound;
    let finished: Vec<(Tensor3, MapCache)> = acts
        .into_par_iter()
        .zip(blocks.into_par_iter())
        .zip(inputs.par_iter())
        .map(|((last, blocks), x)| {
            let pre = nn::conv2d(&last, p.get(pw), p.get(pw + 1), cfg.in_channels, 1);
            let out = pre.map(|v| v.clamp(-bound, bound));
            (
                out,
                MapCache {
                    x: x.clone(),
                    blocks,
                    last,
                    pre,
                },
            )
        })
        .collect();
    let (outs, maps) = finished.into_iter().unzip();
    Ok((outs, ForwardCache { mode, maps, stats }))
}

/// Gradients from [`backward_batch`].
pub struct EstimatorGrads {
    pub params: Vec<Vec<f64>>,
    pub inputs: Option<Vec<Tensor3>>,
}

/// Backpropagates `grads` (with respect to the clamped outputs) through a
/// batched forward. The clamp passes gradient only where the pre-clamp
/// value lies inside the bound.
pub fn backward_batch(
    params: &EstimatorParams,
    cfg: &EstimatorConfig,
    cache: &ForwardCache,
    grads: &[Tensor3],
    need_inputs: bool,
) -> Result<EstimatorGrads> {
    if grads.len() != cache.maps.len() {
        return Err(Error::shapes(cache.maps.len(), grads.len()));
    }
    let p = &params.set;
    let h = cfg.hidden_width;
    let pw = proj_w(cfg);
    let bound = cfg.clamp_bound;
    let train_bn = cfg.normalization && cache.mode == Mode::Train;

    // projection
    let per_map: Vec<(Tensor3, Vec<Vec<f64>>)> = cache
        .maps
        .par_iter()
        .zip(grads.par_iter())
        .map(|(m, g)| {
            let mut local = p.zero_grads();
            let g_pre = m
                .pre
                .zip_map(g, |pre, gv| if pre.abs() <= bound { gv } else { 0.0 })
                .expect("grad shape");
            let (gw, gb) = split_two(&mut local, pw, pw + 1);
            let ga = nn::conv2d_backward(&m.last, p.get(pw), 1, &g_pre, gw, gb, true)
                .expect("input grad requested");
            (ga, local)
        })
        .collect();
    let mut total = p.zero_grads();
    let mut g_acts = Vec::with_capacity(per_map.len());
    for (ga, local) in per_map {
        accumulate(&mut total, &local);
        g_acts.push(ga);
    }

    for j in (0..cfg.num_residual_blocks).rev() {
        let st = &cache.stats[j];
        let gamma: Vec<f64> = if cfg.normalization {
            p.get(block_slot(j, GAMMA)).to_vec()
        } else {
            vec![1.0; h]
        };
        let inv_std: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();
        // through the second conv and the activation
        let stage: Vec<(Tensor3, Vec<Vec<f64>>)> = cache
            .maps
            .par_iter()
            .zip(g_acts.par_iter())
            .map(|(m, ga)| {
                let b = &m.blocks[j];
                let mut local = p.zero_grads();
                let (gw, gb) = split_two(&mut local, block_slot(j, B_W), block_slot(j, B_B));
                let gr = nn::conv2d_backward(&b.r, p.get(block_slot(j, B_W)), 1, ga, gw, gb, true)
                    .expect("input grad requested");
                let gv = b
                    .v
                    .zip_map(&gr, |v, g| g * cfg.activation.derivative(v))
                    .expect("shape");
                (gv, local)
            })
            .collect();
        let mut g_vs = Vec::with_capacity(stage.len());
        for (gv, local) in stage {
            accumulate(&mut total, &local);
            g_vs.push(gv);
        }
        // normalization parameter grads and the batch-coupling sums
        let mut sum_g = vec![0.0; h];
        let mut sum_gx = vec![0.0; h];
        for (m, gv) in cache.maps.iter().zip(&g_vs) {
            let b = &m.blocks[j];
            for c in 0..h {
                for (g, x) in gv.plane(c).iter().zip(b.xhat.plane(c)) {
                    sum_g[c] += g;
                    sum_gx[c] += g * x;
                }
            }
        }
        if cfg.normalization {
            let gg = &mut total[block_slot(j, GAMMA)];
            for c in 0..h {
                gg[c] += sum_gx[c];
            }
            let gbeta = &mut total[block_slot(j, BETA)];
            for c in 0..h {
                gbeta[c] += sum_g[c];
            }
        }
        let n = st.count as f64;
        let stage: Vec<(Tensor3, Vec<Vec<f64>>)> = cache
            .maps
            .par_iter()
            .zip(g_vs.par_iter())
            .zip(g_acts.par_iter())
            .map(|((m, gv), ga)| {
                let b = &m.blocks[j];
                let mut gu = gv.clone();
                for c in 0..h {
                    let (g, is) = (gamma[c], inv_std[c]);
                    let xh = b.xhat.plane(c);
                    let plane = gu.plane_mut(c);
                    if train_bn {
                        // d x̂ = g * dv; du = is/N (N dx̂ − Σdx̂ − x̂ Σ(dx̂ x̂))
                        let s1 = g * sum_g[c];
                        let s2 = g * sum_gx[c];
                        for (k, v) in plane.iter_mut().enumerate() {
                            *v = is * (g * *v - s1 / n - xh[k] * s2 / n);
                        }
                    } else {
                        plane.iter_mut().for_each(|v| *v *= g * is);
                    }
                }
                let mut local = p.zero_grads();
                let (gw, gb) = split_two(&mut local, block_slot(j, A_W), block_slot(j, A_B));
                let gin = nn::conv2d_backward(&b.input, p.get(block_slot(j, A_W)), 1, &gu, gw, gb, true)
                    .expect("input grad requested");
                (ga.add(&gin).expect("shape"), local)
            })
            .collect();
        g_acts = Vec::with_capacity(stage.len());
        for (g, local) in stage {
            accumulate(&mut total, &local);
            g_acts.push(g);
        }
    }

    let stage: Vec<(Option<Tensor3>, Vec<Vec<f64>>)> = cache
        .maps
        .par_iter()
        .zip(g_acts.par_iter())
        .map(|(m, ga)| {
            let mut local = p.zero_grads();
            let (gw, gb) = split_two(&mut local, CONV_IN_W, CONV_IN_B);
            let gx = nn::conv2d_backward(&m.x, p.get(CONV_IN_W), 3, ga, gw, gb, need_inputs);
            (gx, local)
        })
        .collect();
    let mut inputs = need_inputs.then(Vec::new);
    for (gx, local) in stage {
        accumulate(&mut total, &local);
        if let (Some(v), Some(gx)) = (inputs.as_mut(), gx) {
            v.push(gx);
        }
    }
    Ok(EstimatorGrads {
        params: total,
        inputs,
    })
}

fn split_two(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn accumulate(total: &mut [Vec<f64>], local: &[Vec<f64>]) {
    for (t, l) in total.iter_mut().zip(local) {
        for (a, b) in t.iter_mut().zip(l) {
            *a += b;
        }
    }
}

/// Folds the batch statistics of a training-mode forward into the running
/// statistics (unbiased variance, exponential moving average).
pub fn update_running_stats(params: &mut EstimatorParams, cfg: &EstimatorConfig, cache: &ForwardCache) {
    if !cfg.normalization || cache.mode != Mode::Train {
        return;
    }
    let mom = cfg.bn_momentum;
    for (j, st) in cache.stats.iter().enumerate() {
        let n = st.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let rm = params.set.get_mut(block_slot(j, RUN_MEAN));
        for (r, m) in rm.iter_mut().zip(&st.mean) {
            *r = (1.0 - mom) * *r + mom * m;
        }
        let rv = params.set.get_mut(block_slot(j, RUN_VAR));
        for (r, v) in rv.iter_mut().zip(&st.var) {
            *r = (1.0 - mom) * *r + mom * v * unbias;
        }
    }
}

/// Inference-mode prediction on compute tensors.
pub fn predict(params: &EstimatorParams, cfg: &EstimatorConfig, maps: &[Tensor3]) -> Result<Vec<Tensor3>> {
    Ok(forward_batch(params, cfg, maps, Mode::Inference)?.0)
}

/// Inference-mode perturbation map for one feature tensor.
pub fn forward(params: &EstimatorParams, cfg: &EstimatorConfig, f: &FeatureTensor) -> Result<JndMap> {
    check_channels(cfg, f.shape())?;
    let out = predict(params, cfg, &[f.to_tensor()])?;
    FeatureTensor::from_tensor(&out[0])
}

/// Applies the shared estimator to every level, preserving order and ids.
pub fn forward_pyramid(params: &EstimatorParams, cfg: &EstimatorConfig, p: &FeaturePyramid) -> Result<FeaturePyramid> {
    for level in p.levels() {
        check_channels(cfg, level.shape())?;
    }
    let out = predict(params, cfg, &p.to_tensors())?;
    FeaturePyramid::from_tensors(&out, p.level_ids().to_vec())
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoint_version: u32,
    pub config: EstimatorConfig,
    pub layers: Vec<LayerEntry>,
    /// Free-form provenance (bundle checksum, training seed, ...).
    #[serde(default)]
    pub metadata: std::collections::BTreeMap<String, String>,
}

fn container_shape(shape: &[usize]) -> Shape3 {
    match shape {
        [] => Shape3::new(1, 1, 1),
        [a] => Shape3::new(*a, 1, 1),
        [a, b] => Shape3::new(*a, *b, 1),
        [a, b, rest @ ..] => Shape3::new(*a, *b, rest.iter().product()),
    }
}

/// Writes one `.fjnd` file per parameter tensor (as f32) plus a manifest.
pub fn save_checkpoint(
    params: &EstimatorParams,
    cfg: &EstimatorConfig,
    metadata: std::collections::BTreeMap<String, String>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for (i, t) in params.set.tensors.iter().enumerate() {
        let file = format!("{i:03}_{}.{}", t.name, feature::FILE_EXTENSION);
        let ft = FeatureTensor::new(
            container_shape(&t.shape),
            t.data.iter().map(|&v| v as f32).collect(),
        )?;
        feature::save_feature(&ft, dir.join(&file))?;
        layers.push(LayerEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            file,
            trainable: t.trainable,
        });
    }
    let manifest = CheckpointManifest {
        checkpoint_version: CHECKPOINT_VERSION,
        config: *cfg,
        layers,
        metadata,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(EstimatorParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        field: "manifest",
        detail: e.to_string(),
    })?;
    if manifest.checkpoint_version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            field: "checkpoint_version",
            detail: format!(
                "expected {CHECKPOINT_VERSION}, found {}",
                manifest.checkpoint_version
            ),
        });
    }
    let reference = init_estimator(&manifest.config, 0)?;
    if reference.set.len() != manifest.layers.len() {
        return Err(Error::Format {
            field: "layers",
            detail: format!(
                "expected {} layers for this config, found {}",
                reference.set.len(),
                manifest.layers.len()
            ),
        });
    }
    let mut set = ParamSet::default();
    for (entry, expect) in manifest.layers.iter().zip(&reference.set.tensors) {
        if entry.name != expect.name || entry.shape != expect.shape {
            return Err(Error::Format {
                field: "layers",
                detail: format!(
                    "layer {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, expect.name, expect.shape
                ),
            });
        }
        let t = feature::load_feature(dir.join(&entry.file))?;
        set.push(
            entry.name.clone(),
            entry.shape.clone(),
            t.values().iter().map(|&v| v as f64).collect(),
            entry.trainable,
        );
    }
    Ok((EstimatorParams { set }, manifest))
}
