//! Distortion-strength and similarity metrics.
//!
//! All reductions accumulate in f64. Normalization is always over the whole
//! tensor (not per channel).

use crate::error::{Error, Result};
use crate::feature::{FeaturePyramid, FeatureTensor};
use crate::tensor::Tensor3;

/// Default stabilizer for the NRMSE/NMSE denominators.
pub const DEFAULT_EPS: f64 = 1e-8;

/// NRMSE, NMSE and cosine similarity of one (clean, distorted) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionReading {
    pub nrmse: f64,
    pub nmse: f64,
    pub cosine: f64,
}

struct Moments {
    ref_sq: f64,
    err_sq: f64,
    cross: f64,
    other_sq: f64,
}

fn moments(f: &FeatureTensor, g: &FeatureTensor) -> Result<Moments> {
    if f.shape() != g.shape() {
        return Err(Error::shape3(f.shape(), g.shape()));
    }
    let mut m = Moments {
        ref_sq: 0.0,
        err_sq: 0.0,
        cross: 0.0,
        other_sq: 0.0,
    };
    for (&a, &b) in f.values().iter().zip(g.values()) {
        let (a, b) = (a as f64, b as f64);
        m.ref_sq += a * a;
        m.other_sq += b * b;
        m.cross += a * b;
        m.err_sq += (b - a) * (b - a);
    }
    Ok(m)
}

/// `‖f̃ − f‖₂ / (‖f‖₂ + eps)`.
pub fn nrmse(f: &FeatureTensor, f_tilde: &FeatureTensor, eps: f64) -> Result<f64> {
    let m = moments(f, f_tilde)?;
    Ok(m.err_sq.sqrt() / (m.ref_sq.sqrt() + eps))
}

/// `‖f̃ − f‖₂² / (‖f‖₂² + eps)`.
pub fn nmse(f: &FeatureTensor, f_tilde: &FeatureTensor, eps: f64) -> Result<f64> {
    let m = moments(f, f_tilde)?;
    Ok(m.err_sq / (m.ref_sq + eps))
}

pub fn cosine(f: &FeatureTensor, f_tilde: &FeatureTensor) -> Result<f64> {
    let m = moments(f, f_tilde)?;
    if m.ref_sq == 0.0 || m.other_sq == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm tensor".into()));
    }
    Ok((m.cross / (m.ref_sq.sqrt() * m.other_sq.sqrt())).clamp(-1.0, 1.0))
}

pub fn reading(f: &FeatureTensor, f_tilde: &FeatureTensor, eps: f64) -> Result<DistortionReading> {
    Ok(DistortionReading {
        nrmse: nrmse(f, f_tilde, eps)?,
        nmse: nmse(f, f_tilde, eps)?,
        cosine: cosine(f, f_tilde)?,
    })
}

/// Cosine similarity predicted for a perturbation orthogonal to the feature
/// with relative magnitude `r = ‖e‖ / ‖f‖`.
pub fn orthogonal_cosine_prediction(r: f64) -> f64 {
    1.0 / (1.0 + r * r).sqrt()
}

/// Arithmetic mean of the per-level NRMSE.
pub fn pyramid_nrmse(p: &FeaturePyramid, p_tilde: &FeaturePyramid, eps: f64) -> Result<f64> {
    if !p.same_structure(p_tilde) {
        return Err(Error::ShapeMismatch {
            left: format!("{:?}", p.level_ids()),
            right: format!("{:?}", p_tilde.level_ids()),
        });
    }
    let total = p
        .levels()
        .iter()
        .zip(p_tilde.levels())
        .map(|(a, b)| nrmse(a, b, eps))
        .sum::<Result<f64>>()?;
    Ok(total / p.len() as f64)
}

/// Per-level mean NRMSE on compute tensors.
pub fn levels_nrmse(clean: &[Tensor3], distorted: &[Tensor3], eps: f64) -> Result<f64> {
    if clean.len() != distorted.len() || clean.is_empty() {
        return Err(Error::shapes(clean.len(), distorted.len()));
    }
    let mut total = 0.0;
    for (a, b) in clean.iter().zip(distorted) {
        total += b.sub(a)?.l2_norm() / (a.l2_norm() + eps);
    }
    Ok(total / clean.len() as f64)
}
