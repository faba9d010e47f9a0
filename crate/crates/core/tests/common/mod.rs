//! Small bundles that build in about a second, for tests that exercise
//! plumbing rather than task quality.
#![allow(dead_code)]

use featjnd::estimator::EstimatorConfig;
use featjnd::taskbench::{make_bundle, BundleConfig, TaskBundle};
use featjnd::training::TrainConfig;

pub fn small_cls_config(seed: u64) -> BundleConfig {
    BundleConfig {
        train_size: 256,
        eval_size: 64,
        pretrain_epochs: 6,
        min_clean_score: 0.0,
        ..BundleConfig::classification(seed)
    }
}

pub fn small_pyramid_config(seed: u64) -> BundleConfig {
    BundleConfig {
        train_size: 128,
        eval_size: 32,
        pretrain_epochs: 2,
        min_clean_score: 0.0,
        ..BundleConfig::pyramid(seed)
    }
}

pub fn small_cls() -> TaskBundle {
    make_bundle(&small_cls_config(0)).expect("small classification bundle")
}

pub fn small_pyramid() -> TaskBundle {
    make_bundle(&small_pyramid_config(0)).expect("small pyramid bundle")
}

pub fn small_estimator(bundle: &TaskBundle) -> EstimatorConfig {
    EstimatorConfig {
        hidden_width: 8,
        num_residual_blocks: 1,
        ..EstimatorConfig::new(bundle.level_shapes()[0].channels)
    }
}

pub fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-3,
        ..TrainConfig::classification()
    }
}
