//! Task-head discrepancy on the two bench bundles: how much the frozen
//! head's outputs move under growing Gaussian feature noise, term by term.
//!
//! Usage: `head_discrepancy [temperature]`

use featjnd::discrepancy::{self, DiscrepancyConfig};
use featjnd::nn;
use featjnd::taskbench::{make_bundle, BundleConfig, TaskHead};
use featjnd::tensor::Tensor3;

fn main() -> featjnd::Result<()> {
    let temperature: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    for cfg in [BundleConfig::classification(0), BundleConfig::pyramid(0)] {
        let bundle = make_bundle(&cfg)?;
        let disc = DiscrepancyConfig::new(bundle.task(), temperature);
        println!("{:?} bundle, clean score {:.4}", bundle.task(), bundle.clean_score);
        let f = &bundle.eval_features[0];
        let align = bundle.head.align(f);
        let clean = bundle.head.outputs(f, &align);
        let mut rng = nn::rng(1, 0);
        for sigma in [0.0, 0.1, 0.3, 1.0] {
            let noisy: Vec<Tensor3> = f
                .iter()
                .map(|l| {
                    let n = nn::normal_init(&mut rng, l.shape().len(), sigma);
                    l.add(&Tensor3::from_vec(l.shape(), n)?)
                })
                .collect::<featjnd::Result<_>>()?;
            let t = discrepancy::discrepancy_terms(&clean, &bundle.head.outputs(&noisy, &align), &disc)?;
            println!("  sigma {sigma:.1}: total {:.5} {:?}", t.total(), t);
        }
    }
    Ok(())
}
