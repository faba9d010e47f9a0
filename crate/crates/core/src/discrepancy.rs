//! Differentiable task discrepancies between clean and distorted head outputs.
//!
//! The clean outputs are always the reference distribution of the KL terms
//! (`KL(clean ‖ distorted)`). Gradients are taken with respect to the
//! distorted outputs only, since the clean outputs do not depend on the
//! estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of head outputs. Each row is one anchor, ROI or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shapes((rows, cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                left: format!("{what} {}x{}", self.rows, self.cols),
                right: format!("{what} {}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}

/// Bundled task-head outputs. Fields absent for a task are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadOutputs {
    /// Objectness logits, one row of (object, background) per anchor.
    pub rpn_logits: Option<Matrix>,
    /// Per-ROI class logits.
    pub roi_logits: Option<Matrix>,
    pub rpn_reg: Option<Matrix>,
    pub roi_reg: Option<Matrix>,
    pub mask_logits: Option<Matrix>,
    /// Classification logits (classification task only).
    pub cls_logits: Option<Matrix>,
}

impl HeadOutputs {
    fn fields(&self) -> [(&'static str, Option<&Matrix>); 6] {
        [
            ("rpn_logits", self.rpn_logits.as_ref()),
            ("roi_logits", self.roi_logits.as_ref()),
            ("rpn_reg", self.rpn_reg.as_ref()),
            ("roi_reg", self.roi_reg.as_ref()),
            ("mask_logits", self.mask_logits.as_ref()),
            ("cls_logits", self.cls_logits.as_ref()),
        ]
    }

    /// Zero-valued outputs with the same field presence and shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Option<Matrix>| m.as_ref().map(Matrix::zeros_like);
        Self {
            rpn_logits: z(&self.rpn_logits),
            roi_logits: z(&self.roi_logits),
            rpn_reg: z(&self.rpn_reg),
            roi_reg: z(&self.roi_reg),
            mask_logits: z(&self.mask_logits),
            cls_logits: z(&self.cls_logits),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.fields()
            .iter()
            .filter_map(|(_, m)| *m)
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    /// Checks the aligned-output contract: same fields present, same shapes.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        for ((name, a), (_, b)) in self.fields().into_iter().zip(other.fields()) {
            match (a, b) {
                (Some(a), Some(b)) => a.same_shape(b, name)?,
                (None, None) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "field `{name}` present on one side only"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Detection,
    InstanceSegmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyConfig {
    pub temperature: f64,
    pub task: TaskKind,
    /// Transition point of the smooth-ℓ1 penalty.
    #[serde(default = "default_beta")]
    pub smooth_l1_beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl DiscrepancyConfig {
    pub fn new(task: TaskKind, temperature: f64) -> Self {
        Self {
            temperature,
            task,
            smooth_l1_beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Validation("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

fn softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let exps: Vec<f64> = logits.iter().map(|&v| (v / t - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
    let lse = logits.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v / t - lse).collect()
}

fn check_logits(y: &[f64], y_tilde: &[f64]) -> Result<()> {
    if y.len() != y_tilde.len() {
        return Err(Error::shapes(y.len(), y_tilde.len()));
    }
    if y.len() < 2 {
        return Err(Error::Validation("need at least two logits".into()));
    }
    if !y.iter().chain(y_tilde).all(|v| v.is_finite()) {
        return Err(Error::Validation("non-finite logits".into()));
    }
    Ok(())
}

/// `T² · KL(softmax(y/T) ‖ softmax(ỹ/T))`.
pub fn kl_temperature(y: &[f64], y_tilde: &[f64], t: f64) -> Result<f64> {
    Ok(kl_temperature_with_grad(y, y_tilde, t)?.0)
}

/// KL value and its gradient with respect to `y_tilde`, which is `T (q − p)`.
pub fn kl_temperature_with_grad(y: &[f64], y_tilde: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
    check_logits(y, y_tilde)?;
    if !(t > 0.0) {
        return Err(Error::Validation(format!("temperature must be positive, got {t}")));
    }
    let p = softmax_scaled(y, t);
    let log_p = log_softmax_scaled(y, t);
    let log_q = log_softmax_scaled(y_tilde, t);
    let kl: f64 = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, (lp, lq))| pk * (lp - lq))
        .sum();
    let grad = p
        .iter()
        .zip(&log_q)
        .map(|(pk, lq)| t * (lq.exp() - pk))
        .collect();
    Ok((t * t * kl.max(0.0), grad))
}

/// Mean over rows of the row-wise temperature KL.
fn kl_rows(y: &Matrix, y_tilde: &Matrix, t: f64, what: &str) -> Result<(f64, Matrix)> {
    y.same_shape(y_tilde, what)?;
    let mut grad = y.zeros_like();
    if y.rows == 0 {
        return Ok((0.0, grad));
    }
    let n = y.rows as f64;
    let mut total = 0.0;
    for r in 0..y.rows {
        let (v, g) = kl_temperature_with_grad(y.row(r), y_tilde.row(r), t)?;
        total += v;
        for (dst, src) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = src / n;
        }
    }
    Ok((total / n, grad))
}

/// Smooth-ℓ1 (Huber) with transition `beta`, mean over elements.
pub fn smooth_l1_beta(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    Ok(smooth_l1_with_grad(a, b, beta)?.0)
}

/// Smooth-ℓ1 with the default transition `beta = 1`.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    smooth_l1_beta(a, b, 1.0)
}

/// Value and gradient with respect to `b`.
pub fn smooth_l1_with_grad(a: &[f64], b: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::shapes(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        if d.abs() < beta {
            total += 0.5 * d * d / beta;
            grad.push(-d / beta / n);
        } else {
            total += d.abs() - 0.5 * beta;
            grad.push(-d.signum() / n);
        }
    }
    Ok((total / n, grad))
}

/// Mean squared error and its gradient with respect to `b`.
pub fn mse_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::shapes(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            total += (y - x) * (y - x);
            2.0 * (y - x) / n
        })
        .collect();
    Ok((total / n, grad))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(mse_with_grad(a, b)?.0)
}

/// Individual terms of a discrepancy evaluation. Terms not used by the
/// task stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscrepancyTerms {
    pub cls: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub mask: f64,
}

impl DiscrepancyTerms {
    pub fn total(&self) -> f64 {
        self.cls + self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg + self.mask
    }
}

fn field<'a>(m: &'a Option<Matrix>, name: &'static str) -> Result<&'a Matrix> {
    m.as_ref().ok_or(Error::MissingField(name))
}

/// Classification discrepancy on `cls_logits`.
pub fn d_cls(out: &HeadOutputs, out_tilde: &HeadOutputs, cfg: &DiscrepancyConfig) -> Result<f64> {
    Ok(d_cls_with_grad(out, out_tilde, cfg)?.0.total())
}

fn d_cls_with_grad(
    out: &HeadOutputs,
    out_tilde: &HeadOutputs,
    cfg: &DiscrepancyConfig,
) -> Result<(DiscrepancyTerms, HeadOutputs)> {
    let y = field(&out.cls_logits, "cls_logits")?;
    let yt = field(&out_tilde.cls_logits, "cls_logits")?;
    let (v, g) = kl_rows(y, yt, cfg.temperature, "cls_logits")?;
    let mut grad = HeadOutputs::default();
    grad.cls_logits = Some(g);
    Ok((
        DiscrepancyTerms {
            cls: v,
            ..Default::default()
        },
        grad,
    ))
}

/// Sum of the four detection terms (RPN/ROI classification and regression).
pub fn d_det(out: &HeadOutputs, out_tilde: &HeadOutputs, cfg: &DiscrepancyConfig) -> Result<f64> {
    Ok(d_det_with_grad(out, out_tilde, cfg)?.0.total())
}

fn d_det_with_grad(
    out: &HeadOutputs,
    out_tilde: &HeadOutputs,
    cfg: &DiscrepancyConfig,
) -> Result<(DiscrepancyTerms, HeadOutputs)> {
    let rpn = field(&out.rpn_logits, "rpn_logits")?;
    let rpn_t = field(&out_tilde.rpn_logits, "rpn_logits")?;
    let roi = field(&out.roi_logits, "roi_logits")?;
    let roi_t = field(&out_tilde.roi_logits, "roi_logits")?;
    let rpn_reg = field(&out.rpn_reg, "rpn_reg")?;
    let rpn_reg_t = field(&out_tilde.rpn_reg, "rpn_reg")?;
    let roi_reg = field(&out.roi_reg, "roi_reg")?;
    let roi_reg_t = field(&out_tilde.roi_reg, "roi_reg")?;
    if roi.rows != roi_t.rows || roi_reg.rows != roi_reg_t.rows || roi.rows != roi_reg.rows {
        return Err(Error::ShapeMismatch {
            left: format!("{} clean ROIs", roi.rows),
            right: format!("{} distorted ROIs (aligned-ROI contract violated)", roi_t.rows),
        });
    }
    let t = cfg.temperature;
    let (rpn_cls, g_rpn) = kl_rows(rpn, rpn_t, t, "rpn_logits")?;
    let (roi_cls, g_roi) = kl_rows(roi, roi_t, t, "roi_logits")?;
    rpn_reg.same_shape(rpn_reg_t, "rpn_reg")?;
    roi_reg.same_shape(roi_reg_t, "roi_reg")?;
    let (rpn_reg_v, g_rpn_reg) = smooth_l1_with_grad(&rpn_reg.data, &rpn_reg_t.data, cfg.smooth_l1_beta)?;
    let (roi_reg_v, g_roi_reg) = smooth_l1_with_grad(&roi_reg.data, &roi_reg_t.data, cfg.smooth_l1_beta)?;
    let grad = HeadOutputs {
        rpn_logits: Some(g_rpn),
        roi_logits: Some(g_roi),
        rpn_reg: Some(Matrix::new(rpn_reg.rows, rpn_reg.cols, g_rpn_reg)?),
        roi_reg: Some(Matrix::new(roi_reg.rows, roi_reg.cols, g_roi_reg)?),
        mask_logits: None,
        cls_logits: None,
    };
    Ok((
        DiscrepancyTerms {
            rpn_cls,
            rpn_reg: rpn_reg_v,
            roi_cls,
            roi_reg: roi_reg_v,
            ..Default::default()
        },
        grad,
    ))
}

/// Detection discrepancy plus the mask MSE term.
pub fn d_ins(out: &HeadOutputs, out_tilde: &HeadOutputs, cfg: &DiscrepancyConfig) -> Result<f64> {
    Ok(d_ins_with_grad(out, out_tilde, cfg)?.0.total())
}

fn d_ins_with_grad(
    out: &HeadOutputs,
    out_tilde: &HeadOutputs,
    cfg: &DiscrepancyConfig,
) -> Result<(DiscrepancyTerms, HeadOutputs)> {
    let m = field(&out.mask_logits, "mask_logits")?;
    let mt = field(&out_tilde.mask_logits, "mask_logits")?;
    m.same_shape(mt, "mask_logits")?;
    let (mut terms, mut grad) = d_det_with_grad(out, out_tilde, cfg)?;
    let (mask, g) = mse_with_grad(&m.data, &mt.data)?;
    terms.mask = mask;
    grad.mask_logits = Some(Matrix::new(m.rows, m.cols, g)?);
    Ok((terms, grad))
}

/// Task-selected discrepancy `D_t(out, out_tilde)` with per-term breakdown.
pub fn discrepancy_terms(
    out: &HeadOutputs,
    out_tilde: &HeadOutputs,
    cfg: &DiscrepancyConfig,
) -> Result<DiscrepancyTerms> {
    Ok(discrepancy_with_grad(out, out_tilde, cfg)?.0)
}

pub fn discrepancy(out: &HeadOutputs, out_tilde: &HeadOutputs, cfg: &DiscrepancyConfig) -> Result<f64> {
    Ok(discrepancy_terms(out, out_tilde, cfg)?.total())
}

/// Discrepancy terms and the gradient with respect to `out_tilde`.
/// The gradient has a field for each output the task reads.
pub fn discrepancy_with_grad(
    out: &HeadOutputs,
    out_tilde: &HeadOutputs,
    cfg: &DiscrepancyConfig,
) -> Result<(DiscrepancyTerms, HeadOutputs)> {
    cfg.validate()?;
    match cfg.task {
        TaskKind::Classification => d_cls_with_grad(out, out_tilde, cfg),
        TaskKind::Detection => d_det_with_grad(out, out_tilde, cfg),
        TaskKind::InstanceSegmentation => d_ins_with_grad(out, out_tilde, cfg),
    }
}
