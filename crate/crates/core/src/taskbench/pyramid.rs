//! Detection/mask-style heads over a feature pyramid.
//!
//! Every position of every level is an anchor with 2 objectness logits and
//! 4 regression outputs. ROIs are the top-k positions per level ranked by
//! clean objectness; the feature column at each ROI goes through a small
//! ReLU trunk into class logits (foreground classes plus background), box
//! regression and `4×4` mask logits. All weights are shared across levels.

use std::collections::HashMap;

use crate::discrepancy::{HeadOutputs, Matrix, TaskKind};
use crate::nn::{self, ParamSet};
use crate::tensor::Tensor3;

use super::data::{ObjectTarget, Target, MASK_GRID};
use super::{Alignment, Roi, TaskHead};

const MASK_CELLS: usize = MASK_GRID * MASK_GRID;
const OBJ_W: usize = 0;
const RREG_W: usize = 2;
const TRUNK_W: usize = 4;
const CLS_W: usize = 6;
const REG_W: usize = 8;
const MASK_W: usize = 10;

/// Positive-example weight in the pretraining classification losses.
const POSITIVE_WEIGHT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidHead {
    pub channels: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub top_k: usize,
    pub params: ParamSet,
}

fn layer(params: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, name: &str, out: usize, inp: usize) {
    params.push(
        format!("{name}.weight"),
        vec![out, inp],
        nn::normal_init(rng, out * inp, (1.0 / inp as f64).sqrt()),
        true,
    );
    params.push(format!("{name}.bias"), vec![out], vec![0.0; out], true);
}

struct RoiForward {
    col: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl PyramidHead {
    pub fn new(channels: usize, num_classes: usize, hidden: usize, top_k: usize, seed: u64) -> Self {
        let mut rng = nn::rng(seed, 0x707972);
        let mut params = ParamSet::default();
        layer(&mut params, &mut rng, "objectness", 2, channels);
        layer(&mut params, &mut rng, "anchor_reg", 4, channels);
        layer(&mut params, &mut rng, "roi_trunk", hidden, channels);
        layer(&mut params, &mut rng, "roi_cls", num_classes + 1, hidden);
        layer(&mut params, &mut rng, "roi_reg", 4, hidden);
        layer(&mut params, &mut rng, "mask", MASK_CELLS, hidden);
        Self {
            channels,
            num_classes,
            hidden,
            top_k,
            params,
        }
    }

    /// Background class index in the ROI logits.
    pub fn background(&self) -> usize {
        self.num_classes
    }

    fn lin(&self, slot: usize, x: &[f64]) -> Vec<f64> {
        nn::linear(x, self.params.get(slot), self.params.get(slot + 1))
    }

    fn roi_forward(&self, feats: &[Tensor3], r: &Roi) -> RoiForward {
        let col = feats[r.level].column(r.y, r.x);
        let pre = self.lin(TRUNK_W, &col);
        let hidden = pre.iter().map(|v| v.max(0.0)).collect();
        RoiForward { col, pre, hidden }
    }

    fn objectness_scores(&self, level: &Tensor3) -> Vec<f64> {
        let s = level.shape();
        let mut out = Vec::with_capacity(s.tokens());
        for y in 0..s.height {
            for x in 0..s.width {
                let l = self.lin(OBJ_W, &level.column(y, x));
                out.push(l[0] - l[1]);
            }
        }
        out
    }
}

fn all_positions(feats: &[Tensor3]) -> Vec<Roi> {
    let mut out = Vec::new();
    for (level, f) in feats.iter().enumerate() {
        let s = f.shape();
        for y in 0..s.height {
            for x in 0..s.width {
                out.push(Roi { level, y, x });
            }
        }
    }
    out
}

fn split_pair(g: &mut [Vec<f64>], slot: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = g.split_at_mut(slot + 1);
    (&mut lo[slot], &mut hi[0])
}

fn add_column(t: &mut Tensor3, y: usize, x: usize, g: &[f64]) {
    for (c, v) in g.iter().enumerate() {
        let cur = t.get(c, y, x);
        t.set(c, y, x, cur + v);
    }
}

fn bce_with_logits(z: f64, target: bool) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-z).exp());
    let t = if target { 1.0 } else { 0.0 };
    let loss = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    (loss, p - t)
}

impl TaskHead for PyramidHead {
    fn task(&self) -> TaskKind {
        TaskKind::InstanceSegmentation
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Top-k positions per level by clean objectness margin. Ties keep the
    /// lower raster index first.
    fn align(&self, clean: &[Tensor3]) -> Alignment {
        let mut rois = Vec::new();
        for (level, f) in clean.iter().enumerate() {
            let scores = self.objectness_scores(f);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let w = f.shape().width;
            rois.extend(
                order
                    .into_iter()
                    .take(self.top_k)
                    .map(|i| Roi { level, y: i / w, x: i % w }),
            );
        }
        Alignment { rois }
    }

    /// Every position becomes an ROI, in the same order as the anchors.
    fn training_alignment(&self, feats: &[Tensor3]) -> Alignment {
        Alignment {
            rois: all_positions(feats),
        }
    }

    fn outputs(&self, feats: &[Tensor3], align: &Alignment) -> HeadOutputs {
        let anchors = all_positions(feats);
        let mut rpn = Vec::with_capacity(anchors.len() * 2);
        let mut rpn_reg = Vec::with_capacity(anchors.len() * 4);
        for a in &anchors {
            let col = feats[a.level].column(a.y, a.x);
            rpn.extend(self.lin(OBJ_W, &col));
            rpn_reg.extend(self.lin(RREG_W, &col));
        }
        let k = align.rois.len();
        let mut cls = Vec::with_capacity(k * (self.num_classes + 1));
        let mut reg = Vec::with_capacity(k * 4);
        let mut mask = Vec::with_capacity(k * MASK_CELLS);
        for r in &align.rois {
            let h = self.roi_forward(feats, r).hidden;
            cls.extend(self.lin(CLS_W, &h));
            reg.extend(self.lin(REG_W, &h));
            mask.extend(self.lin(MASK_W, &h));
        }
        let n = anchors.len();
        HeadOutputs {
            rpn_logits: Some(Matrix { rows: n, cols: 2, data: rpn }),
            rpn_reg: Some(Matrix { rows: n, cols: 4, data: rpn_reg }),
            roi_logits: Some(Matrix { rows: k, cols: self.num_classes + 1, data: cls }),
            roi_reg: Some(Matrix { rows: k, cols: 4, data: reg }),
            mask_logits: Some(Matrix { rows: k, cols: MASK_CELLS, data: mask }),
            cls_logits: None,
        }
    }

    fn backward(
        &self,
        feats: &[Tensor3],
        align: &Alignment,
        grad: &HeadOutputs,
        param_grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<Tensor3> {
        let mut scratch;
        let pg = match param_grads {
            Some(p) => p,
            None => {
                scratch = self.params.zero_grads();
                &mut scratch[..]
            }
        };
        let mut out: Vec<Tensor3> = feats.iter().map(|f| Tensor3::zeros(f.shape())).collect();
        let anchors = all_positions(feats);
        for (i, a) in anchors.iter().enumerate() {
            let col = feats[a.level].column(a.y, a.x);
            let mut g_col = vec![0.0; col.len()];
            if let Some(g) = &grad.rpn_logits {
                let (gw, gb) = split_pair(pg, OBJ_W);
                let gc = nn::linear_backward(&col, self.params.get(OBJ_W), g.row(i), gw, gb);
                g_col.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
            }
            if let Some(g) = &grad.rpn_reg {
                let (gw, gb) = split_pair(pg, RREG_W);
                let gc = nn::linear_backward(&col, self.params.get(RREG_W), g.row(i), gw, gb);
                g_col.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
            }
            add_column(&mut out[a.level], a.y, a.x, &g_col);
        }
        for (i, r) in align.rois.iter().enumerate() {
            let fw = self.roi_forward(feats, r);
            let mut g_h = vec![0.0; self.hidden];
            for (field, slot) in [(&grad.roi_logits, CLS_W), (&grad.roi_reg, REG_W), (&grad.mask_logits, MASK_W)] {
                if let Some(g) = field {
                    let (gw, gb) = split_pair(pg, slot);
                    let gh = nn::linear_backward(&fw.hidden, self.params.get(slot), g.row(i), gw, gb);
                    g_h.iter_mut().zip(gh).for_each(|(a, b)| *a += b);
                }
            }
            let g_pre: Vec<f64> = g_h
                .iter()
                .zip(&fw.pre)
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            let (gw, gb) = split_pair(pg, TRUNK_W);
            let g_col = nn::linear_backward(&fw.col, self.params.get(TRUNK_W), &g_pre, gw, gb);
            add_column(&mut out[r.level], r.y, r.x, &g_col);
        }
        out
    }

    /// Multi-task pretraining loss. `align` must be the training alignment,
    /// so ROI row `i` and anchor row `i` refer to the same position.
    fn supervised_loss(&self, out: &HeadOutputs, target: &Target, align: &Alignment) -> (f64, HeadOutputs) {
        let Target::Objects(objects) = target else {
            panic!("pyramid head needs object targets")
        };
        let lookup = object_lookup(objects);
        let rpn = out.rpn_logits.as_ref().expect("rpn_logits");
        let rpn_reg = out.rpn_reg.as_ref().expect("rpn_reg");
        let roi = out.roi_logits.as_ref().expect("roi_logits");
        let roi_reg = out.roi_reg.as_ref().expect("roi_reg");
        let mask = out.mask_logits.as_ref().expect("mask_logits");
        let mut grad = out.zeros_like();
        let n = align.rois.len() as f64;
        let mut loss = 0.0;
        for (i, r) in align.rois.iter().enumerate() {
            let obj = lookup.get(&(r.level, r.y, r.x)).copied();
            let w = if obj.is_some() { POSITIVE_WEIGHT } else { 1.0 } / n;
            let (l, g) = nn::cross_entropy(rpn.row(i), if obj.is_some() { 0 } else { 1 });
            loss += w * l;
            for (d, v) in grad.rpn_logits.as_mut().unwrap().row_mut(i).iter_mut().zip(g) {
                *d = w * v;
            }
            let cls_target = obj.map_or(self.background(), |o| o.class);
            let (l, g) = nn::cross_entropy(roi.row(i), cls_target);
            loss += w * l;
            for (d, v) in grad.roi_logits.as_mut().unwrap().row_mut(i).iter_mut().zip(g) {
                *d = w * v;
            }
            let Some(o) = obj else { continue };
            for (src, dst) in [(rpn_reg, grad.rpn_reg.as_mut().unwrap()), (roi_reg, grad.roi_reg.as_mut().unwrap())] {
                for j in 0..4 {
                    let d = src.row(i)[j] - o.reg[j];
                    loss += 0.5 * d * d;
                    dst.row_mut(i)[j] = d;
                }
            }
            for j in 0..MASK_CELLS {
                let (l, g) = bce_with_logits(mask.row(i)[j], o.mask[j]);
                loss += l / MASK_CELLS as f64;
                grad.mask_logits.as_mut().unwrap().row_mut(i)[j] = g / MASK_CELLS as f64;
            }
        }
        (loss, grad)
    }
}

fn object_lookup(objects: &[ObjectTarget]) -> HashMap<(usize, usize, usize), &ObjectTarget> {
    objects.iter().map(|o| ((o.level, o.y, o.x), o)).collect()
}

/// Counts behind the pyramid surrogate score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PyramidCounts {
    pub rois: usize,
    pub cls_correct: usize,
    pub positives: usize,
    pub reg_ok: usize,
    pub mask_ok: usize,
}

impl PyramidCounts {
    pub fn add(&mut self, o: &PyramidCounts) {
        self.rois += o.rois;
        self.cls_correct += o.cls_correct;
        self.positives += o.positives;
        self.reg_ok += o.reg_ok;
        self.mask_ok += o.mask_ok;
    }

    /// Mean of ROI class accuracy, regression agreement rate and mask-IoU rate.
    pub fn score(&self) -> f64 {
        let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (rate(self.cls_correct, self.rois) + rate(self.reg_ok, self.positives) + rate(self.mask_ok, self.positives))
            / 3.0
    }
}

pub fn mask_iou(logits: &[f64], target: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (z, &t) in logits.iter().zip(target) {
        let p = *z > 0.0;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Scores one example's ROI outputs against its ground truth.
pub fn count_example(
    head: &PyramidHead,
    out: &HeadOutputs,
    align: &Alignment,
    objects: &[ObjectTarget],
    reg_threshold: f64,
    mask_iou_threshold: f64,
) -> PyramidCounts {
    let lookup = object_lookup(objects);
    let roi = out.roi_logits.as_ref().expect("roi_logits");
    let reg = out.roi_reg.as_ref().expect("roi_reg");
    let mask = out.mask_logits.as_ref().expect("mask_logits");
    let mut c = PyramidCounts::default();
    for (i, r) in align.rois.iter().enumerate() {
        let obj = lookup.get(&(r.level, r.y, r.x)).copied();
        c.rois += 1;
        let truth = obj.map_or(head.background(), |o| o.class);
        if nn::argmax(roi.row(i)) == truth {
            c.cls_correct += 1;
        }
        if let Some(o) = obj {
            c.positives += 1;
            let err = reg
                .row(i)
                .iter()
                .zip(&o.reg)
                .fold(0.0f64, |m, (p, t)| m.max((p - t).abs()));
            if err < reg_threshold {
                c.reg_ok += 1;
            }
            if mask_iou(mask.row(i), &o.mask) >= mask_iou_threshold {
                c.mask_ok += 1;
            }
        }
    }
    c
}
