//! Builds both toy task bundles and prints their clean scores.

use std::time::Instant;

use featjnd::taskbench::{make_bundle, BundleConfig};

fn main() -> featjnd::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for cfg in [BundleConfig::classification(seed), BundleConfig::pyramid(seed)] {
        let t = Instant::now();
        let b = make_bundle(&cfg)?;
        println!(
            "{:?}: clean score {:.4}, levels {:?}, checksum {} ({:.1}s)",
            cfg.kind,
            b.clean_score,
            b.level_shapes().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            &b.checksum()[..12],
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
