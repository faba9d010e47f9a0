//! Trains a perturbation estimator against the frozen classification head,
//! prints the per-epoch log, saves a checkpoint and checks that reloading it
//! reproduces the predictions.
//!
//! Usage: `train_estimator [epochs] [out_dir]`

use std::collections::BTreeMap;

use featjnd::estimator::{self, EstimatorConfig};
use featjnd::taskbench::{make_bundle, BundleConfig};
use featjnd::training::{self, TrainConfig};

fn main() -> featjnd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let out = args.get(2).cloned().unwrap_or_else(|| "target/train_estimator".into());

    let bundle = make_bundle(&BundleConfig::classification(0))?;
    let frozen = bundle.checksum();
    let mut est = EstimatorConfig::new(bundle.level_shapes()[0].channels);
    est.hidden_width = 16;
    let cfg = TrainConfig { epochs, learning_rate: 1e-3, ..TrainConfig::classification() };

    let (params, log) = training::train_loop(&bundle, &est, &cfg)?;
    println!("epoch  loss       |delta|   D         nrmse");
    for e in &log {
        println!(
            "{:>5}  {:<9.4}  {:<8.4}  {:<8.5}  {:.4}",
            e.epoch, e.mean_loss, e.mean_magnitude, e.mean_discrepancy, e.mean_nrmse
        );
    }
    assert_eq!(bundle.checksum(), frozen, "task bundle must stay frozen");

    let dir = std::path::Path::new(&out).join("checkpoint");
    estimator::save_checkpoint(&params, &est, BTreeMap::new(), &dir)?;
    let (loaded, manifest) = estimator::load_checkpoint(&dir)?;
    let a = training::predict_eval(&params, &est, &bundle)?;
    let b = training::predict_eval(&loaded, &manifest.config, &bundle)?;
    println!("checkpoint {} reloads identically: {}", dir.display(), a == b);
    training::write_log_csv(&log, std::path::Path::new(&out).join("train_log.csv"))?;
    Ok(())
}
