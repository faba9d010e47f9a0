//! Token-wise quantization guided by a trained estimator versus a randomly
//! permuted allocation and a global uniform step, at equal noise budget.
//!
//! Usage: `token_quantization [cls|pyramid] [epochs] [lr] [eps] [mean|min|max]`

use featjnd::estimator::EstimatorConfig;
use featjnd::quantization::{self, QuantConfig};
use featjnd::taskbench::{make_bundle, BundleConfig};
use featjnd::training::{self, TrainConfig};

fn main() -> featjnd::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let pyramid = args.get(1).is_some_and(|s| s == "pyramid");
    let (bundle, mut cfg) = if pyramid {
        (make_bundle(&BundleConfig::pyramid(0))?, TrainConfig::multi_head())
    } else {
        (make_bundle(&BundleConfig::classification(0))?, TrainConfig::classification())
    };
    cfg.epochs = arg(2, 10.0) as usize;
    cfg.learning_rate = arg(3, 1e-3);
    let mut est = EstimatorConfig::new(bundle.level_shapes()[0].channels);
    est.hidden_width = 32;
    let (params, _) = training::train_loop(&bundle, &est, &cfg)?;
    let deltas = training::predict_eval(&params, &est, &bundle)?;

    let qcfg = QuantConfig {
        eps: arg(4, quantization::DEFAULT_TOLERANCE_EPS),
        agg: match args.get(5).map(String::as_str) {
            Some("min") => quantization::ChannelAgg::ChannelMin,
            Some("max") => quantization::ChannelAgg::ChannelMax,
            _ => quantization::ChannelAgg::ChannelMean,
        },
        sigma_fractions: std::env::var("FRACTIONS")
            .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect())
            .unwrap_or_else(|_| QuantConfig::default().sigma_fractions),
        ..QuantConfig::default()
    };
    let rows = quantization::quant_experiment(&bundle, &deltas, &qcfg)?;
    println!("clean {:.4}", bundle.clean_score);
    for s in quantization::summarize(&rows) {
        println!(
            "sigma {:.4}: featjnd {:.4} random {:.4} uniform {:.4} budget exact {}",
            s.sigma_tgt, s.featjnd, s.random_mean, s.uniform, s.budgets_exact
        );
    }
    Ok(())
}
