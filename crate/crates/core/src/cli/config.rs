//! Run configuration. A TOML file names only what differs from the
//! defaults of its bundle kind; the fully resolved form is written next to
//! every command's outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attribution;
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::evaluation;
use crate::quantization::QuantConfig;
use crate::taskbench::{BundleConfig, BundleKind};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    /// Gaussian σ values are chosen to hit these NRMSE levels...
    pub nrmse_targets: Vec<f64>,
    /// ...unless absolute values are listed here.
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// NRMSE points where the two curves are compared.
    pub matched_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: evaluation::default_alphas(),
            nrmse_targets: evaluation::default_sigma_targets(),
            sigmas: Vec::new(),
            seeds: evaluation::DEFAULT_SEEDS.to_vec(),
            matched_grid: evaluation::nrmse_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    pub steps: usize,
    pub indices: Vec<usize>,
    /// Pixel enlargement of rendered maps.
    pub zoom: u32,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: attribution::DEFAULT_STEPS,
            indices: vec![0, 1, 2, 3],
            zoom: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub bundle: BundleConfig,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub quant: QuantConfig,
    pub attribution: AttributionConfig,
}

const SECTIONS: [&str; 6] = ["bundle", "estimator", "train", "eval", "quant", "attribution"];

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Replaces fields of `base` by the entries of `over`, rejecting keys that
/// `base` does not have.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: &toml::Table, section: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(config_err)?;
    for (k, v) in over {
        if !table.contains_key(k) {
            return Err(config_err(format!("unknown key `{section}.{k}`")));
        }
        table.insert(k.clone(), v.clone());
    }
    table.try_into().map_err(|e| config_err(format!("in [{section}]: {e}")))
}

fn section<'a>(root: &'a toml::Table, name: &str, empty: &'a toml::Table) -> Result<&'a toml::Table> {
    match root.get(name) {
        None => Ok(empty),
        Some(toml::Value::Table(t)) => Ok(t),
        Some(_) => Err(config_err(format!("`{name}` must be a table"))),
    }
}

impl RunConfig {
    /// Defaults for a bundle kind.
    pub fn defaults(kind: BundleKind, seed: u64) -> Self {
        let (bundle, train) = match kind {
            BundleKind::Classification => (BundleConfig::classification(seed), TrainConfig::classification()),
            BundleKind::Pyramid => (BundleConfig::pyramid(seed), TrainConfig::multi_head()),
        };
        Self {
            output_dir: PathBuf::from("featjnd_run"),
            estimator: EstimatorConfig::new(bundle.feature_channels),
            bundle,
            train,
            eval: EvalConfig::default(),
            quant: QuantConfig::default(),
            attribution: AttributionConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: toml::Table = text.parse().map_err(|e| config_err(format!("invalid TOML: {e}")))?;
        for key in root.keys() {
            if key != "output_dir" && !SECTIONS.contains(&key.as_str()) {
                return Err(config_err(format!("unknown key `{key}`")));
            }
        }
        let empty = toml::Table::new();
        let bundle_over = section(&root, "bundle", &empty)?;
        let kind: BundleKind = match bundle_over.get("kind") {
            Some(v) => v.clone().try_into().map_err(|e| config_err(format!("bundle.kind: {e}")))?,
            None => BundleKind::Classification,
        };
        let seed = match bundle_over.get("seed") {
            Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(_) => return Err(config_err("bundle.seed must be a non-negative integer")),
            None => 0,
        };
        let base = Self::defaults(kind, seed);
        let bundle: BundleConfig = overlay(&base.bundle, bundle_over, "bundle")?;
        // The estimator width follows the (possibly overridden) bundle.
        let est_base = EstimatorConfig {
            in_channels: bundle.feature_channels,
            ..base.estimator
        };
        let cfg = Self {
            output_dir: match root.get("output_dir") {
                Some(toml::Value::String(s)) => PathBuf::from(s),
                Some(_) => return Err(config_err("output_dir must be a string")),
                None => base.output_dir,
            },
            estimator: overlay(&est_base, section(&root, "estimator", &empty)?, "estimator")?,
            train: overlay(&base.train, section(&root, "train", &empty)?, "train")?,
            eval: overlay(&base.eval, section(&root, "eval", &empty)?, "eval")?,
            quant: overlay(&base.quant, section(&root, "quant", &empty)?, "quant")?,
            attribution: overlay(&base.attribution, section(&root, "attribution", &empty)?, "attribution")?,
            bundle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.bundle.validate().map_err(config_err)?;
        self.estimator.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        if self.estimator.in_channels != self.bundle.feature_channels {
            return Err(config_err(format!(
                "estimator.in_channels {} does not match bundle.feature_channels {}",
                self.estimator.in_channels, self.bundle.feature_channels
            )));
        }
        let e = &self.eval;
        if e.alphas.is_empty() || e.seeds.is_empty() || (e.sigmas.is_empty() && e.nrmse_targets.is_empty()) {
            return Err(config_err("eval grids must be nonempty"));
        }
        if e.alphas.iter().chain(&e.sigmas).chain(&e.nrmse_targets).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err("eval grid values must be finite and non-negative"));
        }
        let q = &self.quant;
        if q.seeds.is_empty() || (q.sigma_tgt.is_empty() && q.sigma_fractions.is_empty()) {
            return Err(config_err("quant budgets and seeds must be nonempty"));
        }
        if q.sigma_tgt.iter().chain(&q.sigma_fractions).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(config_err("quant budgets must be positive"));
        }
        if !(q.eps >= 0.0 && q.floor_factor >= 0.0) {
            return Err(config_err("quant.eps and quant.floor_factor must be non-negative"));
        }
        if self.attribution.steps == 0 || self.attribution.zoom == 0 {
            return Err(config_err("attribution.steps and attribution.zoom must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
