//! Training and evaluation: per-driver splits, the mini-batch loop,
//! segment- and trajectory-level prediction, and the feature-subset
//! experiment harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dcrnn::{ArchitectureConfig, Dcrnn};
use crate::encoding::{encode_trajectory, AggregateFeatureMap, EncodingConfig, SegmentRecord};
use crate::error::{Error, Result};
use crate::nn::layers::{softmax, Mode};
use crate::nn::params::{rmsprop_step, OptimizerConfig};
use crate::nn::tensor::Tensor;
use crate::sampling::{DatasetManifest, Split};
use crate::seeding::{derive_seed, stream_rng};
use crate::telemetry::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub train_fraction: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Stop once trajectory-level test accuracy reaches this value, if set
    /// (checked on eval epochs only).
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 150,
            optimizer: OptimizerConfig::default(),
            train_fraction: 0.85,
            seed: 0,
            eval_every: 0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::validation(
                "batch_size must be at least 2 (batch normalization)",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Per-driver stratified split: trajectories shuffle under a driver-keyed
/// stream of `seed` and the first ceil(fraction * n) go to train.
pub fn split_manifest(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation(
            "train_fraction must lie strictly between 0 and 1",
        ));
    }
    let mut out = manifest.clone();
    let mut assignment: BTreeMap<(String, String), Split> = BTreeMap::new();
    for driver in manifest.drivers() {
        let mut trajs = manifest.trajectories_of(&driver, None);
        if trajs.len() < 2 {
            return Err(Error::validation(format!(
                "driver {driver} has {} trajectory(ies), need at least 2 to split",
                trajs.len()
            )));
        }
        trajs.sort();
        let mut rng = stream_rng(seed, &format!("split.{driver}"));
        trajs.shuffle(&mut rng);
        let n_train = (train_fraction * trajs.len() as f64).ceil() as usize;
        for (i, t) in trajs.into_iter().enumerate() {
            let split = if i < n_train { Split::Train } else { Split::Test };
            assignment.insert((driver.clone(), t), split);
        }
    }
    for entry in &mut out.entries {
        entry.split = assignment[&(entry.driver_id.clone(), entry.trajectory_id.clone())];
    }
    Ok(out)
}

/// A segment ready for the model: its driver index and input tensor.
pub struct Sample {
    pub driver_index: usize,
    pub trajectory_id: String,
    pub input: Tensor,
}

/// Segments grouped by split, with the driver index mapping.
pub struct Dataset {
    pub drivers: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Join encoded segments with a split manifest. Every manifest trajectory
/// must have at least one segment; segments for trajectories outside the
/// manifest are ignored.
pub fn assemble_dataset(records: &[SegmentRecord], manifest: &DatasetManifest) -> Result<Dataset> {
    let drivers = manifest.drivers();
    let driver_index: BTreeMap<&str, usize> = drivers
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let mut split_of: BTreeMap<&str, (usize, Split)> = BTreeMap::new();
    for e in &manifest.entries {
        let idx = driver_index[e.driver_id.as_str()];
        if split_of
            .insert(e.trajectory_id.as_str(), (idx, e.split))
            .is_some()
        {
            return Err(Error::validation(format!(
                "trajectory id {} appears more than once in the manifest",
                e.trajectory_id
            )));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in records {
        let Some(&(driver_index, split)) = split_of.get(rec.trajectory_id.as_str()) else {
            continue;
        };
        *seen.entry(rec.trajectory_id.as_str()).or_insert(0) += 1;
        let input = Tensor::from_vec(&[rec.map.rows, rec.map.cols], rec.map.data.clone())?;
        let sample = Sample {
            driver_index,
            trajectory_id: rec.trajectory_id.clone(),
            input,
        };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    for e in &manifest.entries {
        if !seen.contains_key(e.trajectory_id.as_str()) {
            return Err(Error::validation(format!(
                "no encoded segments for manifest trajectory {}",
                e.trajectory_id
            )));
        }
    }
    Ok(Dataset {
        drivers,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traj_accuracy: Option<f64>,
}

/// Per-row mean/std over the train segments; rows with no spread get unit
/// scale.
fn input_statistics(samples: &[Sample], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; rows];
    let mut var = vec![0.0; rows];
    let count = (samples.len() * cols) as f64;
    for s in samples {
        for r in 0..rows {
            for v in s.input.row(r) {
                mean[r] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in samples {
        for r in 0..rows {
            for v in s.input.row(r) {
                let c = v - mean[r];
                var[r] += c * c;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Mini-batch training with RMSProp. Batches are seeded shuffles of the
/// train segments; input standardization is estimated from the train split
/// before the first epoch. History is bitwise reproducible for a fixed seed.
pub fn train(model: &mut Dcrnn, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::validation("train split is empty"));
    }
    let shapes = model.shapes();
    let (mean, std) = input_statistics(&dataset.train, shapes.input.0, shapes.input.1);
    model.set_input_norm(&mean, &std)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream_rng(cfg.seed, &format!("train.shuffle.{epoch}"));
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_index, batch) in indices.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue; // batch normalization needs at least two samples
            }
            let inputs: Vec<&Tensor> = batch.iter().map(|&i| &dataset.train[i].input).collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| dataset.train[i].driver_index)
                .collect();
            let forward_seed = derive_seed(cfg.seed, &format!("train.fwd.{epoch}.{batch_index}"));
            let trace = model.forward(&inputs, Mode::Train, forward_seed)?;
            let loss = model.backward(trace, &labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged at epoch {epoch} batch {batch_index}"
                )));
            }
            rmsprop_step(&mut model.store, &cfg.optimizer);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let mut stats = EpochStats {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            seg_accuracy: None,
            traj_accuracy: None,
        };
        let evaluate = cfg.eval_every > 0
            && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)
            && !dataset.test.is_empty();
        if evaluate {
            let (seg, traj) = evaluate_split(model, &dataset.test, cfg.batch_size)?;
            stats.seg_accuracy = Some(seg);
            stats.traj_accuracy = Some(traj);
        }
        history.push(stats);
        if let (Some(target), Some(traj)) = (
            cfg.stop_at_accuracy,
            history.last().and_then(|s| s.traj_accuracy),
        ) {
            if traj >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Segment- and trajectory-level accuracy over a split.
pub fn evaluate_split(
    model: &mut Dcrnn,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::validation("empty evaluation split"));
    }
    let probs = infer_probabilities(model, samples, batch_size)?;
    let mut seg_correct = 0usize;
    let mut per_traj: BTreeMap<&str, (usize, ProbVector)> = BTreeMap::new();
    for (sample, p) in samples.iter().zip(probs.iter()) {
        if argmax(p) == sample.driver_index {
            seg_correct += 1;
        }
        let entry = per_traj
            .entry(sample.trajectory_id.as_str())
            .or_insert_with(|| (sample.driver_index, ProbVector::zeros(p.len())));
        entry.1.accumulate(p);
    }
    let seg_accuracy = seg_correct as f64 / samples.len() as f64;
    let mut traj_correct = 0usize;
    let n_traj = per_traj.len();
    for (_, (label, acc)) in per_traj {
        let mean = acc.into_mean();
        if argmax(mean.probabilities()) == label {
            traj_correct += 1;
        }
    }
    Ok((seg_accuracy, traj_correct as f64 / n_traj as f64))
}

/// Softmax outputs for a list of samples, batched for throughput.
fn infer_probabilities(
    model: &mut Dcrnn,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&Tensor> = batch.iter().map(|s| &s.input).collect();
        let trace = model.forward(&inputs, Mode::Infer, 0)?;
        let probs = softmax(&trace.logits)?;
        for row in 0..batch.len() {
            out.push(probs.row(row).to_vec());
        }
    }
    Ok(out)
}

/// A per-driver probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    count: usize,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("empty probability vector"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(ProbVector { probs, count: 1 })
    }

    fn zeros(len: usize) -> Self {
        ProbVector {
            probs: vec![0.0; len],
            count: 0,
        }
    }

    fn accumulate(&mut self, p: &[f64]) {
        for (a, b) in self.probs.iter_mut().zip(p.iter()) {
            *a += b;
        }
        self.count += 1;
    }

    fn into_mean(mut self) -> Self {
        let n = self.count.max(1) as f64;
        self.probs.iter_mut().for_each(|p| *p /= n);
        self.count = 1;
        self
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax output for one segment map.
pub fn predict_segment(model: &mut Dcrnn, map: &AggregateFeatureMap) -> Result<ProbVector> {
    let (probs, _) = model.predict_map(map)?;
    ProbVector::new(probs)
}

/// Component-wise mean of probability vectors; the average of simplex
/// points stays on the simplex.
pub fn average_probabilities(vectors: &[Vec<f64>]) -> Result<ProbVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::validation("no probability vectors to average"))?;
    let mut acc = ProbVector::zeros(first.len());
    for v in vectors {
        if v.len() != first.len() {
            return Err(Error::shape("probability vectors of mixed lengths"));
        }
        acc.accumulate(v);
    }
    ProbVector::new(acc.into_mean().probs)
}

/// Trajectory-level prediction: the component-wise mean of the segment
/// probability vectors, argmax with ties to the lowest driver index.
pub fn predict_trajectory_from_maps(
    model: &mut Dcrnn,
    maps: &[AggregateFeatureMap],
) -> Result<(usize, ProbVector)> {
    if maps.is_empty() {
        return Err(Error::validation(
            "trajectory yields no segments to predict from",
        ));
    }
    let mut probs = Vec::with_capacity(maps.len());
    for map in maps {
        probs.push(model.predict_map(map)?.0);
    }
    let mean = average_probabilities(&probs)?;
    Ok((argmax(mean.probabilities()), mean))
}

/// Encode a raw trajectory and predict its driver.
pub fn predict_trajectory(
    model: &mut Dcrnn,
    trajectory: &Trajectory,
    enc: &EncodingConfig,
) -> Result<(usize, ProbVector)> {
    let maps = encode_trajectory(trajectory, enc)?;
    predict_trajectory_from_maps(model, &maps)
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("empty prediction set"));
    }
    let correct = predictions
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetResult {
    pub features: String,
    pub seg_accuracy: f64,
    pub traj_accuracy: f64,
}

/// Train one model per feature subset on identical splits and seeds and
/// report test accuracy for each.
pub fn feature_subset_experiment(
    trajectories: &BTreeMap<String, Trajectory>,
    manifest: &DatasetManifest,
    subsets: &[Vec<crate::encoding::BasicFeature>],
    base_enc: &EncodingConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SubsetResult>> {
    cfg.validate()?;
    let split = split_manifest(manifest, cfg.train_fraction, cfg.seed)?;
    let mut out = Vec::with_capacity(subsets.len());
    for features in subsets {
        let enc = EncodingConfig {
            features: features.clone(),
            ..base_enc.clone()
        };
        enc.validate()?;
        let mut records = Vec::new();
        for entry in &split.entries {
            let traj = trajectories.get(&entry.trajectory_id).ok_or_else(|| {
                Error::validation(format!("trajectory {} not loaded", entry.trajectory_id))
            })?;
            for (i, map) in encode_trajectory(traj, &enc)?.into_iter().enumerate() {
                records.push(SegmentRecord {
                    trajectory_id: entry.trajectory_id.clone(),
                    segment_index: i as u32,
                    map,
                });
            }
        }
        let dataset = assemble_dataset(&records, &split)?;
        let arch =
            ArchitectureConfig::new(enc.features.len(), enc.time_len(), dataset.drivers.len());
        let mut model = Dcrnn::build(arch, derive_seed(cfg.seed, "model-init"))?;
        train(&mut model, &dataset, cfg)?;
        let (seg, traj) = evaluate_split(&mut model, &dataset.test, cfg.batch_size)?;
        let names: Vec<&str> = enc.features.iter().map(|f| f.name()).collect();
        out.push(SubsetResult {
            features: names.join("+"),
            seg_accuracy: seg,
            traj_accuracy: traj,
        });
    }
    Ok(out)
}
