//! Feature files and distortion readings: writes a tensor and a two-level
//! pyramid to disk, reads them back, then reports NRMSE, NMSE and cosine
//! for scaled and orthogonally perturbed copies.
//!
//! Usage: `feature_metrics [out_dir]`

use featjnd::feature::{self, FeaturePyramid, FeatureTensor};
use featjnd::metrics;
use featjnd::tensor::Shape3;

fn main() -> featjnd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/feature_metrics".into());
    let shape = Shape3::new(4, 8, 8);
    let values: Vec<f32> = (0..shape.len()).map(|i| ((i * 37 % 17) as f32 - 8.0) / 4.0).collect();
    let f = FeatureTensor::new(shape, values)?;

    let path = std::path::Path::new(&out).join("single.fjnd");
    std::fs::create_dir_all(&out).map_err(|e| featjnd::Error::io(&out, e))?;
    feature::save_feature(&f, &path)?;
    assert_eq!(feature::load_feature(&path)?, f);
    println!("wrote {} ({} bytes)", path.display(), feature::encode_feature(&f).len());

    let coarse = FeatureTensor::zeros(Shape3::new(4, 4, 4))?;
    let pyramid = FeaturePyramid::with_default_ids(vec![f.clone(), coarse], 2)?;
    let dir = std::path::Path::new(&out).join("pyramid");
    feature::save_pyramid(&pyramid, &dir)?;
    let back = feature::load_pyramid(&dir)?;
    println!("pyramid levels {:?} round trip {}", back.level_ids(), back == pyramid);

    println!("{:>10} {:>8} {:>8} {:>8}", "copy", "nrmse", "nmse", "cosine");
    for gamma in [0.5f32, 1.0, 1.5, 2.0] {
        let g = FeatureTensor::new(shape, f.values().iter().map(|v| v * gamma).collect())?;
        let r = metrics::reading(&f, &g, metrics::DEFAULT_EPS)?;
        println!("{:>10} {:>8.4} {:>8.4} {:>8.4}", format!("x{gamma}"), r.nrmse, r.nmse, r.cosine);
    }
    // A perturbation on a checkerboard of zeros of f is orthogonal to f.
    let mut noisy = f.values().to_vec();
    let scale = (f.l2_norm() / (shape.len() as f64).sqrt()) as f32;
    let mut free = 0;
    for v in noisy.iter_mut().filter(|v| **v == 0.0) {
        *v = if free % 2 == 0 { scale } else { -scale };
        free += 1;
    }
    let g = FeatureTensor::new(shape, noisy)?;
    let r = metrics::reading(&f, &g, metrics::DEFAULT_EPS)?;
    println!(
        "orthogonal: nrmse {:.4} cosine {:.4} predicted {:.4}",
        r.nrmse,
        r.cosine,
        metrics::orthogonal_cosine_prediction(r.nrmse)
    );
    Ok(())
}
