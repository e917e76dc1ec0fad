//! Declarative run configuration: a single TOML file covering every stage,
//! with command-line flags taking precedence. The effective configuration is
//! written next to each stage's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use driverid_core::encoding::BasicFeature;
use driverid_core::error::{Error, Result};

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub drivers: usize,
    pub trajectories: usize,
    #[serde(default = "default_one")]
    pub separation: f64,
    pub duration_min: i64,
    pub duration_max: i64,
    pub start_time: i64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = driverid_core::synth::SynthConfig::default();
        SynthSection {
            drivers: base.n_drivers,
            trajectories: base.n_trajectories,
            separation: base.separation,
            duration_min: base.duration_range.0,
            duration_max: base.duration_range.1,
            start_time: base.start_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub trim_seconds: i64,
    pub min_duration: i64,
    pub max_duration: i64,
    pub drop_missing: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let base = driverid_core::telemetry::PreprocessConfig::default();
        PreprocessSection {
            trim_seconds: base.trim_seconds,
            min_duration: base.min_duration,
            max_duration: base.max_duration,
            drop_missing: base.drop_missing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilaritySection {
    pub tau: f64,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection { tau: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub strategy: String,
    pub nu: f64,
    pub thresholds: Vec<f64>,
    pub n_trajectories: usize,
    pub n_drivers: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            strategy: "threshold".into(),
            nu: 0.2,
            thresholds: vec![0.2, 0.25, 0.3],
            n_trajectories: 50,
            n_drivers: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeSection {
    pub l1: usize,
    pub l2: usize,
    pub features: Vec<String>,
}

impl Default for EncodeSection {
    fn default() -> Self {
        let base = driverid_core::encoding::EncodingConfig::default();
        EncodeSection {
            l1: base.l1,
            l2: base.l2,
            features: base.features.iter().map(|f| f.name().to_string()).collect(),
        }
    }
}

impl EncodeSection {
    pub fn to_core(&self) -> Result<driverid_core::encoding::EncodingConfig> {
        let features = self
            .features
            .iter()
            .map(|s| BasicFeature::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let cfg = driverid_core::encoding::EncodingConfig {
            l1: self.l1,
            l2: self.l2,
            features,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub train_fraction: f64,
    pub eval_every: usize,
    pub ablation: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = driverid_core::train::TrainConfig::default();
        TrainSection {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.optimizer.learning_rate,
            momentum: base.optimizer.momentum,
            epsilon: base.optimizer.epsilon,
            rho: base.optimizer.rho,
            train_fraction: base.train_fraction,
            eval_every: base.eval_every,
            ablation: false,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> Result<driverid_core::train::TrainConfig> {
        let cfg = driverid_core::train::TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: driverid_core::nn::OptimizerConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                epsilon: self.epsilon,
                rho: self.rho,
            },
            train_fraction: self.train_fraction,
            seed,
            eval_every: self.eval_every,
            stop_at_accuracy: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolveSection {
    pub subsets: usize,
    pub drivers_per_subset: usize,
    pub damping: f64,
    pub preference: Option<f64>,
    pub max_iter: usize,
    pub convergence_window: usize,
}

impl Default for ResolveSection {
    fn default() -> Self {
        let base = driverid_core::resolution::ApConfig::default();
        ResolveSection {
            subsets: 200,
            drivers_per_subset: 10,
            damping: base.damping,
            preference: base.preference,
            max_iter: base.max_iter,
            convergence_window: base.convergence_window,
        }
    }
}

impl ResolveSection {
    pub fn ap_config(&self) -> Result<driverid_core::resolution::ApConfig> {
        let cfg = driverid_core::resolution::ApConfig {
            damping: self.damping,
            preference: self.preference,
            max_iter: self.max_iter,
            convergence_window: self.convergence_window,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The whole-run configuration as loaded from `--config` and overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub similarity: SimilaritySection,
    pub sample: SampleSection,
    pub encode: EncodeSection,
    pub train: TrainSection,
    pub resolve: ResolveSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::validation(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::validation(e.to_string()))
    }
}
