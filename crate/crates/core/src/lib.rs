//! Driver identification from 1 Hz vehicle telemetry.
//!
//! The pipeline turns raw trajectories into per-driver style predictions:
//! parsing and preprocessing ([`telemetry`]), spatial-similarity scoring
//! ([`similarity`]), bias-controlled dataset sampling ([`sampling`]),
//! statistical feature encoding ([`encoding`]), a convolutional-recurrent
//! classifier built on hand-written forward/backward kernels ([`nn`],
//! [`dcrnn`]), training and trajectory-level evaluation ([`train`]), and
//! clustering-based driver resolution ([`resolution`]). A synthetic
//! telemetry generator ([`synth`]) provides labeled data with controllable
//! per-driver style for end-to-end validation.

pub mod dcrnn;
pub mod encoding;
pub mod error;
pub mod nn;
pub mod resolution;
pub mod sampling;
pub mod seeding;
pub mod similarity;
pub mod stats;
pub mod synth;
pub mod telemetry;
pub mod train;

pub use dcrnn::{ArchitectureConfig, Dcrnn, ForwardTrace};
pub use encoding::{AggregateFeatureMap, BasicFeature, BasicFeatureMap, EncodingConfig};
pub use error::{Error, Result};
pub use nn::{Mode, OptimizerConfig, ParameterStore, Tensor};
pub use resolution::{ApConfig, ApResult, ResolutionReport};
pub use sampling::{DatasetManifest, ManifestEntry, SamplingParams, Split, Strategy};
pub use similarity::{MatchThreshold, SimilarityMatrix, SimilarityStats};
pub use synth::{StyleProfile, SynthConfig};
pub use telemetry::{DataPoint, PreprocessConfig, Trajectory};
pub use train::{EpochStats, ProbVector, TrainConfig};
