//! Attribution maps for the clean classifier and for the classifier with
//! the trained perturbation added to its features, plus their difference.
//!
//! Usage: `attribution_maps [out_dir] [examples] [steps]`

use std::path::PathBuf;

use featjnd::attribution::{self, ClsPipeline};
use featjnd::estimator::EstimatorConfig;
use featjnd::feature::{save_feature, FeatureTensor};
use featjnd::taskbench::{make_bundle, BundleConfig};
use featjnd::training::{self, TrainConfig};

fn main() -> featjnd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "attribution_out".into()));
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(attribution::DEFAULT_STEPS);
    std::fs::create_dir_all(&out).map_err(|e| featjnd::Error::Io { path: out.clone(), source: e })?;

    let bundle = make_bundle(&BundleConfig::classification(0))?;
    let mut cfg = TrainConfig::classification();
    cfg.epochs = 10;
    cfg.learning_rate = 1e-3;
    let mut est = EstimatorConfig::new(bundle.level_shapes()[0].channels);
    est.hidden_width = 32;
    let (params, _) = training::train_loop(&bundle, &est, &cfg)?;

    for i in 0..count.min(bundle.eval.len()) {
        let image = &bundle.eval[i].image;
        let triple = attribution::attribution_delta(&bundle, Some((&params, &est)), image, steps)?;

        // Completeness: the sum of a fine-grained map matches h(I) - h(0).
        let pipe = ClsPipeline { bundle: &bundle, estimator: None, target: triple.target };
        let fine = attribution::integrated_attribution(|x| pipe.value_and_grad(x), image, 200)?;
        let (h_in, _) = pipe.value_and_grad(image)?;
        let (h_zero, _) = pipe.value_and_grad(&image.scale(0.0))?;
        let total: f64 = fine.data().iter().sum();

        let zero = attribution::attribution_delta(&bundle, None, image, steps)?;
        let zero_max = zero.difference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

        println!(
            "example {i} class {} | sum {:.4} vs h(I)-h(0) {:.4} | |diff|/|clean| {:.3} | zero-delta max {:e}",
            triple.target,
            total,
            h_in - h_zero,
            triple.difference.l2_norm() / triple.clean.l2_norm(),
            zero_max
        );

        let scale = attribution::display_map(&triple.clean)
            .into_iter()
            .chain(attribution::display_map(&triple.distorted))
            .fold(0.0f64, f64::max);
        for (name, map) in [("clean", &triple.clean), ("distorted", &triple.distorted), ("difference", &triple.difference)] {
            attribution::render_png(map, scale, 8, out.join(format!("{i:04}_{name}.png")))?;
            save_feature(&FeatureTensor::from_tensor(map)?, out.join(format!("{i:04}_{name}.fjnd")))?;
        }
    }
    println!("wrote maps to {}", out.display());
    Ok(())
}
