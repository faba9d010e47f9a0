//! Desk-scale surrogate tasks with frozen backbones and heads.
//!
//! A [`TaskBundle`] owns a pretrained backbone, a head, seeded train/eval
//! sets and their cached clean features (rounded to f32, the split-point
//! precision). Everything downstream of the split point sees features as a
//! list of levels; the classification bundle has exactly one.

pub mod backbone;
pub mod cls;
pub mod data;
pub mod pyramid;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrepancy::{HeadOutputs, TaskKind};
use crate::error::{Error, Result};
use crate::feature::{FeaturePyramid, FeatureTensor};
use crate::nn::{self, Adam, ParamSet};
use crate::tensor::{Shape3, Tensor3};

pub use backbone::{Backbone, BackboneSpec};
pub use cls::ClsHead;
pub use data::{ObjectTarget, Sample, Target};
pub use pyramid::{PyramidCounts, PyramidHead};

/// One ROI: a position on a pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub level: usize,
    pub y: usize,
    pub x: usize,
}

/// ROIs chosen from clean features and reused for every distortion of them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    pub rois: Vec<Roi>,
}

/// A frozen head applied at the split point.
pub trait TaskHead {
    fn task(&self) -> TaskKind;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// ROI selection; a pure function of the clean features.
    fn align(&self, clean: &[Tensor3]) -> Alignment;
    /// Alignment used during pretraining.
    fn training_alignment(&self, feats: &[Tensor3]) -> Alignment;
    fn outputs(&self, feats: &[Tensor3], align: &Alignment) -> HeadOutputs;
    /// Gradient with respect to the features for an output gradient.
    /// Parameter gradients accumulate into `param_grads` when given.
    fn backward(
        &self,
        feats: &[Tensor3],
        align: &Alignment,
        grad: &HeadOutputs,
        param_grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<Tensor3>;
    fn supervised_loss(&self, out: &HeadOutputs, target: &Target, align: &Alignment) -> (f64, HeadOutputs);
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Cls(ClsHead),
    Pyramid(PyramidHead),
}

impl Head {
    fn inner(&self) -> &dyn TaskHead {
        match self {
            Head::Cls(h) => h,
            Head::Pyramid(h) => h,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn TaskHead {
        match self {
            Head::Cls(h) => h,
            Head::Pyramid(h) => h,
        }
    }
}

impl TaskHead for Head {
    fn task(&self) -> TaskKind {
        self.inner().task()
    }
    fn params(&self) -> &ParamSet {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        self.inner_mut().params_mut()
    }
    fn align(&self, clean: &[Tensor3]) -> Alignment {
        self.inner().align(clean)
    }
    fn training_alignment(&self, feats: &[Tensor3]) -> Alignment {
        self.inner().training_alignment(feats)
    }
    fn outputs(&self, feats: &[Tensor3], align: &Alignment) -> HeadOutputs {
        self.inner().outputs(feats, align)
    }
    fn backward(
        &self,
        feats: &[Tensor3],
        align: &Alignment,
        grad: &HeadOutputs,
        param_grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<Tensor3> {
        self.inner().backward(feats, align, grad, param_grads)
    }
    fn supervised_loss(&self, out: &HeadOutputs, target: &Target, align: &Alignment) -> (f64, HeadOutputs) {
        self.inner().supervised_loss(out, target, align)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Classification,
    Pyramid,
}

/// Construction parameters of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub kind: BundleKind,
    pub seed: u64,
    /// Classes (classification) or foreground shape classes (pyramid, fixed at 3).
    pub num_classes: usize,
    pub feature_channels: usize,
    /// Pyramid levels; 1 for classification.
    pub levels: usize,
    pub backbone_width: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    /// Minimum clean eval score accepted after pretraining.
    pub min_clean_score: f64,
    /// Pyramid only: ROIs per level.
    pub roi_top_k: usize,
    /// Pyramid only: ROI trunk width.
    pub roi_hidden: usize,
    /// Pyramid only: max-abs regression error counted as agreement.
    pub reg_threshold: f64,
    /// Pyramid only: mask IoU counted as a hit.
    pub mask_iou_threshold: f64,
}

impl BundleConfig {
    pub fn classification(seed: u64) -> Self {
        Self {
            kind: BundleKind::Classification,
            seed,
            num_classes: 8,
            feature_channels: 6,
            levels: 1,
            backbone_width: 16,
            train_size: 2048,
            eval_size: 512,
            pretrain_epochs: 20,
            pretrain_lr: 3e-3,
            batch_size: 32,
            min_clean_score: 0.90,
            roi_top_k: 0,
            roi_hidden: 0,
            reg_threshold: 0.0,
            mask_iou_threshold: 0.0,
        }
    }

    pub fn pyramid(seed: u64) -> Self {
        Self {
            kind: BundleKind::Pyramid,
            seed,
            num_classes: data::NUM_SHAPES,
            feature_channels: 32,
            levels: 2,
            backbone_width: 16,
            train_size: 2048,
            eval_size: 256,
            pretrain_epochs: 12,
            pretrain_lr: 3e-3,
            batch_size: 32,
            min_clean_score: 0.5,
            roi_top_k: 8,
            roi_hidden: 32,
            reg_threshold: 0.25,
            mask_iou_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.feature_channels == 0 || self.backbone_width == 0 || self.batch_size == 0 {
            return bad("widths and batch size must be positive".into());
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("train and eval sets must be nonempty".into());
        }
        if !(self.pretrain_lr > 0.0) {
            return bad("pretrain_lr must be positive".into());
        }
        match self.kind {
            BundleKind::Classification if self.levels != 1 => bad("classification bundles have one level".into()),
            BundleKind::Pyramid if self.levels < 2 => bad(format!("pyramid needs at least 2 levels, got {}", self.levels)),
            BundleKind::Pyramid if self.num_classes != data::NUM_SHAPES => {
                bad(format!("pyramid bundles have {} shape classes", data::NUM_SHAPES))
            }
            BundleKind::Pyramid if self.roi_top_k == 0 || self.roi_hidden == 0 => {
                bad("roi_top_k and roi_hidden must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn backbone_spec(&self) -> BackboneSpec {
        match self.kind {
            BundleKind::Classification => BackboneSpec {
                in_channels: 1,
                width: self.backbone_width,
                stages: 2,
                out_channels: self.feature_channels,
                first_emitting_stage: 1,
            },
            BundleKind::Pyramid => BackboneSpec {
                in_channels: 1,
                width: self.backbone_width,
                stages: self.levels,
                out_channels: self.feature_channels,
                first_emitting_stage: 0,
            },
        }
    }
}

/// A frozen backbone/head pair with its data and cached clean features.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub config: BundleConfig,
    pub backbone: Backbone,
    pub head: Head,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub train_features: Vec<Vec<Tensor3>>,
    pub eval_features: Vec<Vec<Tensor3>>,
    pub eval_alignments: Vec<Alignment>,
    pub clean_score: f64,
}

/// Serialized bundle summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub config: BundleConfig,
    pub task: TaskKind,
    pub level_ids: Vec<String>,
    pub level_shapes: Vec<Shape3>,
    pub clean_score: f64,
    pub backbone_checksum: String,
    pub head_checksum: String,
    pub checksum: String,
}

fn round_f32(t: Tensor3) -> Tensor3 {
    t.map(|v| v as f32 as f64)
}

fn generate(cfg: &BundleConfig, n: usize, stream: u64) -> Vec<Sample> {
    let mut rng = nn::rng(cfg.seed, stream);
    (0..n)
        .map(|i| match cfg.kind {
            BundleKind::Classification => {
                // balanced labels in a fixed interleaved order
                data::blob_sample(&mut rng, i % cfg.num_classes, cfg.num_classes)
            }
            BundleKind::Pyramid => data::shapes_sample(&mut rng, cfg.levels),
        })
        .collect()
}

/// Builds a classification bundle with default sizes.
pub fn make_cls_bundle(seed: u64, num_classes: usize, feature_channels: usize) -> Result<TaskBundle> {
    let mut cfg = BundleConfig::classification(seed);
    cfg.num_classes = num_classes;
    cfg.feature_channels = feature_channels;
    make_bundle(&cfg)
}

/// Builds a pyramid bundle with default sizes.
pub fn make_pyramid_bundle(seed: u64, levels: usize, feature_channels: usize) -> Result<TaskBundle> {
    let mut cfg = BundleConfig::pyramid(seed);
    cfg.levels = levels;
    cfg.feature_channels = feature_channels;
    make_bundle(&cfg)
}

/// Generates data, pretrains backbone and head, then freezes them.
/// Fails with a bundle-quality error below `min_clean_score`.
pub fn make_bundle(cfg: &BundleConfig) -> Result<TaskBundle> {
    let bundle = build_unchecked(cfg)?;
    if bundle.clean_score < cfg.min_clean_score {
        return Err(Error::BundleQuality(format!(
            "clean score {:.4} below {:.2} after {} epochs; try another seed or more epochs",
            bundle.clean_score, cfg.min_clean_score, cfg.pretrain_epochs
        )));
    }
    Ok(bundle)
}

fn build_unchecked(cfg: &BundleConfig) -> Result<TaskBundle> {
    cfg.validate()?;
    let train = generate(cfg, cfg.train_size, 1);
    let eval = generate(cfg, cfg.eval_size, 2);
    let mut backbone = Backbone::new(cfg.backbone_spec(), cfg.seed);
    let mut head = match cfg.kind {
        BundleKind::Classification => Head::Cls(ClsHead::new(cfg.feature_channels, cfg.num_classes, cfg.seed)),
        BundleKind::Pyramid => Head::Pyramid(PyramidHead::new(
            cfg.feature_channels,
            cfg.num_classes,
            cfg.roi_hidden,
            cfg.roi_top_k,
            cfg.seed,
        )),
    };
    pretrain(cfg, &mut backbone, &mut head, &train)?;
    backbone.params.round_to_f32();
    head.params_mut().round_to_f32();
    let features = |set: &[Sample]| -> Vec<Vec<Tensor3>> {
        set.par_iter()
            .map(|s| backbone.features(&s.image).into_iter().map(round_f32).collect())
            .collect()
    };
    let train_features = features(&train);
    let eval_features = features(&eval);
    let eval_alignments = eval_features.iter().map(|f| head.align(f)).collect();
    let mut bundle = TaskBundle {
        config: cfg.clone(),
        backbone,
        head,
        train,
        eval,
        train_features,
        eval_features,
        eval_alignments,
        clean_score: 0.0,
    };
    bundle.clean_score = bundle.performance(&bundle.eval_features)?;
    Ok(bundle)
}

fn pretrain(cfg: &BundleConfig, backbone: &mut Backbone, head: &mut Head, train: &[Sample]) -> Result<()> {
    let mut opt_b = Adam::new(&backbone.params, cfg.pretrain_lr);
    let mut opt_h = Adam::new(head.params(), cfg.pretrain_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = nn::rng(cfg.seed, 3);
    for _ in 0..cfg.pretrain_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let (feats, cache) = backbone.forward(&s.image);
                    let align = head.training_alignment(&feats);
                    let out = head.outputs(&feats, &align);
                    let (loss, g_out) = head.supervised_loss(&out, &s.target, &align);
                    let mut gh = head.params().zero_grads();
                    let g_feats = head.backward(&feats, &align, &g_out, Some(&mut gh));
                    let mut gb = backbone.params.zero_grads();
                    backbone.backward(&cache, &g_feats, Some(&mut gb), false);
                    (loss, gb, gh)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut gb = backbone.params.zero_grads();
            let mut gh = head.params().zero_grads();
            let mut total = 0.0;
            for (loss, b, h) in &per_sample {
                total += loss;
                accumulate(&mut gb, b, scale);
                accumulate(&mut gh, h, scale);
            }
            if !total.is_finite() {
                return Err(Error::BundleQuality("pretraining loss became non-finite".into()));
            }
            opt_b.step(&mut backbone.params, &gb)?;
            opt_h.step(head.params_mut(), &gh)?;
        }
    }
    Ok(())
}

fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

impl TaskBundle {
    pub fn task(&self) -> TaskKind {
        self.head.task()
    }

    pub fn level_ids(&self) -> Vec<String> {
        match self.config.kind {
            BundleKind::Classification => vec!["F".to_string()],
            BundleKind::Pyramid => (0..self.config.levels).map(|l| format!("P{}", l + 2)).collect(),
        }
    }

    pub fn level_shapes(&self) -> Vec<Shape3> {
        self.eval_features[0].iter().map(Tensor3::shape).collect()
    }

    pub fn backbone_checksum(&self) -> String {
        self.backbone.params.checksum()
    }

    pub fn head_checksum(&self) -> String {
        self.head.params().checksum()
    }

    /// Digest over every frozen parameter of the bundle.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backbone_checksum().as_bytes());
        h.update(self.head_checksum().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            config: self.config.clone(),
            task: self.task(),
            level_ids: self.level_ids(),
            level_shapes: self.level_shapes(),
            clean_score: self.clean_score,
            backbone_checksum: self.backbone_checksum(),
            head_checksum: self.head_checksum(),
            checksum: self.checksum(),
        }
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Head outputs for features of eval example `i`, using its clean alignment.
    pub fn eval_outputs(&self, i: usize, feats: &[Tensor3]) -> HeadOutputs {
        self.head.outputs(feats, &self.eval_alignments[i])
    }

    /// Task performance of (possibly distorted) features of the whole eval
    /// set, in eval order. ROIs always come from the clean eval features.
    pub fn performance(&self, feats: &[Vec<Tensor3>]) -> Result<f64> {
        if feats.len() != self.eval.len() {
            return Err(Error::shapes(self.eval.len(), feats.len()));
        }
        let idx: Vec<usize> = (0..feats.len()).collect();
        self.performance_subset(&idx, feats)
    }

    /// Performance over eval examples `indices`, `feats[j]` belonging to
    /// example `indices[j]`.
    pub fn performance_subset(&self, indices: &[usize], feats: &[Vec<Tensor3>]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Validation("empty evaluation set".into()));
        }
        if indices.len() != feats.len() {
            return Err(Error::shapes(indices.len(), feats.len()));
        }
        match &self.head {
            Head::Cls(h) => {
                let correct: usize = indices
                    .par_iter()
                    .zip(feats.par_iter())
                    .map(|(&i, f)| {
                        let Target::Class(k) = self.eval[i].target else { unreachable!() };
                        (nn::argmax(&h.logits(f)) == k) as usize
                    })
                    .sum();
                Ok(correct as f64 / indices.len() as f64)
            }
            Head::Pyramid(h) => {
                let per: Vec<PyramidCounts> = indices
                    .par_iter()
                    .zip(feats.par_iter())
                    .map(|(&i, f)| {
                        let Target::Objects(objs) = &self.eval[i].target else { unreachable!() };
                        let align = &self.eval_alignments[i];
                        let out = h.outputs(f, align);
                        pyramid::count_example(
                            h,
                            &out,
                            align,
                            objs,
                            self.config.reg_threshold,
                            self.config.mask_iou_threshold,
                        )
                    })
                    .collect();
                let mut total = PyramidCounts::default();
                per.iter().for_each(|c| total.add(c));
                Ok(total.score())
            }
        }
    }

    /// Chance accuracy of a constant prediction on the eval labels.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.config.num_classes];
        for s in &self.eval {
            if let Target::Class(k) = s.target {
                counts[k] += 1;
            }
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.eval.len() as f64
    }

    /// Clean eval features of example `i` as an interface pyramid.
    pub fn eval_pyramid(&self, i: usize) -> Result<FeaturePyramid> {
        let levels = self.eval_features[i]
            .iter()
            .map(FeatureTensor::from_tensor)
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(levels, self.level_ids())
    }

    /// Backbone + head logits for an image (classification only).
    pub fn image_logits(&self, image: &Tensor3) -> Result<Vec<f64>> {
        match &self.head {
            Head::Cls(h) => Ok(h.logits(&self.backbone.features(image))),
            Head::Pyramid(_) => Err(Error::Validation("image logits need a classification bundle".into())),
        }
    }
}
