//! Trains an estimator on a toy bundle and compares scaled perturbation
//! maps with Gaussian noise at matched NRMSE.
//!
//! Usage: `matched_distortion [cls|pyramid] [epochs] [lr] [lambda] [hidden]`

use std::time::Instant;

use featjnd::estimator::EstimatorConfig;
use featjnd::evaluation::{self, DEFAULT_SEEDS};
use featjnd::taskbench::{make_bundle, BundleConfig};
use featjnd::training::{self, TrainConfig};

fn main() -> featjnd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let pyramid = args.get(1).is_some_and(|s| s == "pyramid");
    let t = Instant::now();
    let (bundle, mut cfg) = if pyramid {
        (make_bundle(&BundleConfig::pyramid(0))?, TrainConfig::multi_head())
    } else {
        (make_bundle(&BundleConfig::classification(0))?, TrainConfig::classification())
    };
    println!("bundle clean {:.4} ({:.1}s)", bundle.clean_score, t.elapsed().as_secs_f64());
    cfg.epochs = arg(2, 10.0) as usize;
    cfg.learning_rate = arg(3, 1e-3);
    cfg.lambda_t = arg(4, cfg.lambda_t);
    let mut est = EstimatorConfig::new(bundle.level_shapes()[0].channels);
    est.hidden_width = arg(5, 32.0) as usize;

    let t = Instant::now();
    let (params, log) = training::train_loop(&bundle, &est, &cfg)?;
    for row in &log {
        println!(
            "epoch {:>3} loss {:>10.4} |δ| {:>8.4} D {:>8.5} nrmse {:.4}",
            row.epoch, row.mean_loss, row.mean_magnitude, row.mean_discrepancy, row.mean_nrmse
        );
    }
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let deltas = training::predict_eval(&params, &est, &bundle)?;
    for r in evaluation::alpha_sweep(&bundle, &deltas, &evaluation::default_alphas())? {
        println!("alpha {:.2} nrmse {:.4} perf {:.4} drop {:+.4}", r.alpha, r.nrmse, r.performance, r.drop);
    }
    let targets = evaluation::default_sigma_targets();
    let sigmas = evaluation::sigma_grid(&bundle, &targets);
    let sweep = evaluation::matched_sweep(&bundle, &deltas, &evaluation::default_alphas(), &sigmas, &DEFAULT_SEEDS)?;
    for p in evaluation::matched_comparison(&sweep, &evaluation::nrmse_grid()) {
        println!(
            "nrmse {:.1} featjnd {:?} gaussian {:?} margin {:?}",
            p.nrmse,
            p.featjnd.map(|v| (v * 1e4).round() / 1e4),
            p.gaussian.map(|v| (v * 1e4).round() / 1e4),
            p.margin().map(|v| (v * 1e4).round() / 1e4)
        );
    }
    Ok(())
}
