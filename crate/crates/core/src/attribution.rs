//! Path-integral attribution from a zero baseline, discretized with the
//! gradient at the right endpoint of each of `K` steps:
//!
//! `Attr(I) = Σ_{i=1..K} ∇h(i·I/K) ⊙ (I/K)`

use std::path::Path;

use image::{GrayImage, Luma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, EstimatorParams, Mode};
use crate::nn;
use crate::taskbench::{Head, TaskBundle};
use crate::tensor::Tensor3;

pub const DEFAULT_STEPS: usize = 20;

/// Right-endpoint Riemann sum of `grad ⊙ dI` along the straight path from
/// zero to `input`. `model` returns the scalar output and its gradient.
pub fn integrated_attribution<F>(model: F, input: &Tensor3, steps: usize) -> Result<Tensor3>
where
    F: Fn(&Tensor3) -> Result<(f64, Tensor3)> + Sync,
{
    if steps == 0 {
        return Err(Error::Validation("attribution needs at least one step".into()));
    }
    let k = steps as f64;
    let grads: Vec<Result<Tensor3>> = (1..=steps)
        .into_par_iter()
        .map(|i| {
            let point = input.scale(i as f64 / k);
            let (_, g) = model(&point)?;
            if !g.is_finite() {
                return Err(Error::Degenerate(format!("non-finite gradient at path point {i}")));
            }
            Ok(g)
        })
        .collect();
    let mut sum = Tensor3::zeros(input.shape());
    for g in grads {
        sum.add_assign(&g?)?;
    }
    sum.zip_map(input, |g, x| g * x / k)
}

/// Classification pipeline `image → logit[target]`, optionally with the
/// estimator's perturbation added at the split point.
pub struct ClsPipeline<'a> {
    pub bundle: &'a TaskBundle,
    pub estimator: Option<(&'a EstimatorParams, &'a EstimatorConfig)>,
    pub target: usize,
}

impl ClsPipeline<'_> {
    pub fn value_and_grad(&self, image: &Tensor3) -> Result<(f64, Tensor3)> {
        let Head::Cls(head) = &self.bundle.head else {
            return Err(Error::Validation("attribution needs a classification bundle".into()));
        };
        let (feats, bcache) = self.bundle.backbone.forward(image);
        let (input, ecache) = match self.estimator {
            Some((p, cfg)) => {
                let (delta, cache) = estimator::forward_batch(p, cfg, &feats, Mode::Inference)?;
                (vec![feats[0].add(&delta[0])?], Some(cache))
            }
            None => (feats.clone(), None),
        };
        let logits = head.logits(&input);
        if self.target >= logits.len() {
            return Err(Error::Validation(format!("target class {} out of range", self.target)));
        }
        let mut g_logits = vec![0.0; logits.len()];
        g_logits[self.target] = 1.0;
        let pooled_grad = {
            let mut gw = vec![0.0; head.params.get(0).len()];
            let mut gb = vec![0.0; head.num_classes];
            let pooled = nn::global_avg_pool(&input[0]);
            nn::linear_backward(&pooled, head.params.get(0), &g_logits, &mut gw, &mut gb)
        };
        let mut g_feat = nn::global_avg_pool_backward(input[0].shape(), &pooled_grad);
        if let (Some((p, cfg)), Some(cache)) = (self.estimator, ecache) {
            let through = estimator::backward_batch(p, cfg, &cache, std::slice::from_ref(&g_feat), true)?
                .inputs
                .expect("input gradient requested");
            g_feat.add_assign(&through[0])?;
        }
        let g_img = self
            .bundle
            .backbone
            .backward(&bcache, &[g_feat], None, true)
            .expect("input gradient requested");
        Ok((logits[self.target], g_img))
    }
}

/// Clean-pipeline argmax class; fails on non-finite or all-equal logits.
pub fn target_class(bundle: &TaskBundle, image: &Tensor3) -> Result<usize> {
    let logits = bundle.image_logits(image)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite logits".into()));
    }
    if logits.iter().all(|v| *v == logits[0]) {
        return Err(Error::Degenerate("all logits equal; no top class".into()));
    }
    Ok(nn::argmax(&logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTriple {
    pub target: usize,
    pub clean: Tensor3,
    pub distorted: Tensor3,
    pub difference: Tensor3,
}

/// Attributions of the clean pipeline and of the pipeline with the
/// estimator's perturbation, both for the clean top class. `None` for the
/// estimator means a zero perturbation.
pub fn attribution_delta(
    bundle: &TaskBundle,
    estimator: Option<(&EstimatorParams, &EstimatorConfig)>,
    image: &Tensor3,
    steps: usize,
) -> Result<AttributionTriple> {
    let target = target_class(bundle, image)?;
    let clean_model = ClsPipeline {
        bundle,
        estimator: None,
        target,
    };
    let dist_model = ClsPipeline {
        bundle,
        estimator,
        target,
    };
    let clean = integrated_attribution(|x| clean_model.value_and_grad(x), image, steps)?;
    let distorted = integrated_attribution(|x| dist_model.value_and_grad(x), image, steps)?;
    let difference = distorted.sub(&clean)?;
    Ok(AttributionTriple {
        target,
        clean,
        distorted,
        difference,
    })
}

/// Display reduction: per-pixel sum over channels of `|attr|`.
pub fn display_map(attr: &Tensor3) -> Vec<f64> {
    let s = attr.shape();
    let mut out = vec![0.0; s.tokens()];
    for c in 0..s.channels {
        for (o, v) in out.iter_mut().zip(attr.plane(c)) {
            *o += v.abs();
        }
    }
    out
}

/// Writes a grayscale PNG of [`display_map`], `scale` mapping to white and
/// each pixel enlarged `zoom` times.
pub fn render_png(attr: &Tensor3, scale: f64, zoom: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = attr.shape();
    let m = display_map(attr);
    let (w, h) = (s.width as u32 * zoom, s.height as u32 * zoom);
    let img = GrayImage::from_fn(w, h, |x, y| {
        let i = (y / zoom) as usize * s.width + (x / zoom) as usize;
        let v = if scale > 0.0 { (m[i] / scale).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    fn linear_model(w: Tensor3) -> impl Fn(&Tensor3) -> Result<(f64, Tensor3)> + Sync {
        move |x: &Tensor3| Ok((w.dot(x)?, w.clone()))
    }

    #[test]
    fn exact_on_linear_models() {
        let mut r = nn::rng(2, 0);
        let s = Shape3::new(2, 3, 3);
        let w = Tensor3::from_vec(s, nn::normal_init(&mut r, s.len(), 1.0)).unwrap();
        let x = Tensor3::from_vec(s, nn::normal_init(&mut r, s.len(), 1.0)).unwrap();
        for k in [1, 5, 20] {
            let a = integrated_attribution(linear_model(w.clone()), &x, k).unwrap();
            let expect = w.zip_map(&x, |a, b| a * b).unwrap();
            for (u, v) in a.data().iter().zip(expect.data()) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
            let total: f64 = a.data().iter().sum();
            assert!((total - w.dot(&x).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_input_gives_zero_map() {
        let s = Shape3::new(1, 2, 2);
        let a = integrated_attribution(|x: &Tensor3| Ok((x.sum_squares(), x.scale(2.0))), &Tensor3::zeros(s), 7).unwrap();
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_right_endpoint_bias() {
        let s = Shape3::new(1, 1, 1);
        let one = Tensor3::from_vec(s, vec![1.0]).unwrap();
        let sq = |x: &Tensor3| Ok((x.data()[0].powi(2), x.scale(2.0)));
        let a = integrated_attribution(sq, &one, 20).unwrap();
        assert!((a.data()[0] - 1.05).abs() < 1e-12);
        let a = integrated_attribution(sq, &one, 1000).unwrap();
        assert!((a.data()[0] - 1.001).abs() < 1e-12);
        assert!(integrated_attribution(sq, &one, 0).is_err());
    }
}
