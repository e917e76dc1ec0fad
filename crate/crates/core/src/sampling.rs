//! Bias-controlled dataset manifests.
//!
//! Three strategies build (driver, trajectory) sample sets from per-driver
//! similarity matrices: threshold-based (keep only mutually dissimilar
//! trajectories), stratified (equal counts per similarity bucket), and plain
//! random. Manifests are fully determined by (input, params, seed).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::similarity::{SimilarityMatrix, SimilarityStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Threshold,
    Stratified,
    Random,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Strategy::Threshold),
            "stratified" => Ok(Strategy::Stratified),
            "random" => Ok(Strategy::Random),
            other => Err(Error::validation(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub driver_id: String,
    pub trajectory_id: String,
    pub split: Split,
}

/// Strategy parameters as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    pub n_trajectories: usize,
    pub n_drivers: usize,
}

/// A curated sample set with split assignments and provenance. Sampling
/// emits every entry as `train`; the split step reassigns per driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub strategy: Strategy,
    pub params: ParamsRecord,
    pub seed: u64,
    pub stats: SimilarityStats,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::validation(format!("manifest serialization: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::validation(format!("manifest deserialization: {e}")))
    }

    /// Distinct driver ids, sorted.
    pub fn drivers(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.iter().map(|e| e.driver_id.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Trajectory ids of one driver, optionally restricted to a split.
    pub fn trajectories_of(&self, driver: &str, split: Option<Split>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.driver_id == driver && split.map_or(true, |s| e.split == s))
            .map(|e| e.trajectory_id.clone())
            .collect()
    }
}

/// Inputs for the sampling strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Similarity threshold for threshold-based sampling, in (0, 1].
    pub nu: f64,
    /// Bucket boundaries for stratified sampling, strictly increasing.
    pub thresholds: Vec<f64>,
    pub n_trajectories: usize,
    pub n_drivers: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            nu: 0.2,
            thresholds: vec![0.2, 0.25, 0.3],
            n_trajectories: 50,
            n_drivers: 50,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self, strategy: Strategy) -> Result<()> {
        if self.n_trajectories == 0 || self.n_drivers == 0 {
            return Err(Error::validation(
                "n_trajectories and n_drivers must be positive",
            ));
        }
        match strategy {
            Strategy::Threshold => {
                if !(self.nu > 0.0 && self.nu <= 1.0) {
                    return Err(Error::validation(format!(
                        "nu must lie in (0, 1], got {}",
                        self.nu
                    )));
                }
            }
            Strategy::Stratified => {
                if self.thresholds.is_empty() {
                    return Err(Error::validation("thresholds must be non-empty"));
                }
                if !self.thresholds.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::validation("thresholds must be strictly increasing"));
                }
                if self.thresholds[0] <= 0.0 || *self.thresholds.last().unwrap() > 1.0 {
                    return Err(Error::validation("thresholds must lie in (0, 1]"));
                }
                if self.n_trajectories % self.thresholds.len() != 0 {
                    return Err(Error::validation(format!(
                        "n_trajectories ({}) must be divisible by the bucket count ({})",
                        self.n_trajectories,
                        self.thresholds.len()
                    )));
                }
            }
            Strategy::Random => {}
        }
        Ok(())
    }
}

fn sorted_entries(per_driver: BTreeMap<String, Vec<String>>) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    for (driver_id, mut trajs) in per_driver {
        trajs.sort();
        for trajectory_id in trajs {
            entries.push(ManifestEntry {
                driver_id: driver_id.clone(),
                trajectory_id,
                split: Split::Train,
            });
        }
    }
    entries
}

/// Pick `m` drivers uniformly at random from the sorted eligible set.
fn pick_drivers(
    eligible: &BTreeMap<String, Vec<String>>,
    m: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<String>> {
    if eligible.len() < m {
        return Err(Error::validation(format!(
            "only {} eligible driver(s), need {m}",
            eligible.len()
        )));
    }
    let mut ids: Vec<String> = eligible.keys().cloned().collect();
    let mut rng = stream_rng(seed, label);
    ids.shuffle(&mut rng);
    ids.truncate(m);
    Ok(ids)
}

/// Percentile summary of all intra-driver pairwise scores among the
/// trajectories the manifest keeps.
pub fn manifest_stats(
    manifest: &DatasetManifest,
    matrices: &BTreeMap<String, SimilarityMatrix>,
) -> Result<SimilarityStats> {
    let mut scores = Vec::new();
    for driver in manifest.drivers() {
        let kept = manifest.trajectories_of(&driver, None);
        if kept.len() < 2 {
            continue;
        }
        let matrix = matrices
            .get(&driver)
            .ok_or_else(|| Error::validation(format!("no similarity matrix for driver {driver}")))?;
        let idx: Vec<usize> = kept
            .iter()
            .map(|t| {
                matrix.index_of(t).ok_or_else(|| {
                    Error::validation(format!("trajectory {t} missing from matrix of {driver}"))
                })
            })
            .collect::<Result<_>>()?;
        for (a, &i) in idx.iter().enumerate() {
            for &j in idx.iter().skip(a + 1) {
                scores.push(matrix.score(i, j));
            }
        }
    }
    if scores.is_empty() {
        return Ok(SimilarityStats::zero());
    }
    SimilarityStats::from_scores(&scores)
}

/// Threshold-based sampling: per driver, grow a subset greedily in seeded
/// random order, admitting a trajectory only when its similarity to every
/// accepted one stays below `nu`. Drivers whose subset reaches
/// `n_trajectories` are eligible; `n_drivers` of them are drawn at random.
pub fn threshold_sample(
    matrices: &BTreeMap<String, SimilarityMatrix>,
    params: &SamplingParams,
) -> Result<DatasetManifest> {
    params.validate(Strategy::Threshold)?;
    let mut eligible: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (driver, matrix) in matrices {
        let n = matrix.n();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(params.seed, &format!("threshold.greedy.{driver}"));
        order.shuffle(&mut rng);
        let mut accepted: Vec<usize> = Vec::new();
        for &cand in &order {
            if accepted.iter().all(|&a| matrix.score(cand, a) < params.nu) {
                accepted.push(cand);
                if accepted.len() == params.n_trajectories {
                    break;
                }
            }
        }
        if accepted.len() >= params.n_trajectories {
            eligible.insert(
                driver.clone(),
                accepted
                    .iter()
                    .map(|&i| matrix.trajectory_ids[i].clone())
                    .collect(),
            );
        }
    }
    let chosen = pick_drivers(&eligible, params.n_drivers, params.seed, "threshold.drivers")?;
    let per_driver: BTreeMap<String, Vec<String>> = chosen
        .into_iter()
        .map(|d| {
            let trajs = eligible.remove(&d).unwrap();
            (d, trajs)
        })
        .collect();
    let mut manifest = DatasetManifest {
        name: format!("Tb-{}_{}", params.n_drivers, params.nu),
        strategy: Strategy::Threshold,
        params: ParamsRecord {
            nu: Some(params.nu),
            thresholds: None,
            n_trajectories: params.n_trajectories,
            n_drivers: params.n_drivers,
        },
        seed: params.seed,
        stats: SimilarityStats::zero(),
        entries: sorted_entries(per_driver),
    };
    manifest.stats = manifest_stats(&manifest, matrices)?;
    Ok(manifest)
}

/// Bucket index for an average-similarity value under boundaries
/// {nu_1..nu_m} with nu_0 = 0: bucket i covers [nu_i, nu_{i+1}). Values at
/// or above the last boundary fall outside every bucket.
fn bucket_of(avg: f64, thresholds: &[f64]) -> Option<usize> {
    let mut lo = 0.0;
    for (i, hi) in thresholds.iter().enumerate() {
        if avg >= lo && avg < *hi {
            return Some(i);
        }
        lo = *hi;
    }
    None
}

/// Stratified sampling: per driver, each trajectory is scored by its average
/// similarity to the driver's other trajectories and bucketed by the
/// threshold intervals; drivers with at least N/m trajectories in every
/// bucket are eligible, and N/m are drawn per bucket.
pub fn stratified_sample(
    matrices: &BTreeMap<String, SimilarityMatrix>,
    params: &SamplingParams,
) -> Result<DatasetManifest> {
    params.validate(Strategy::Stratified)?;
    let m = params.thresholds.len();
    let per_bucket = params.n_trajectories / m;
    let mut eligible: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (driver, matrix) in matrices {
        let n = matrix.n();
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); m];
        for i in 0..n {
            if let Some(b) = bucket_of(matrix.average_of(i), &params.thresholds) {
                buckets[b].push(i);
            }
        }
        if buckets.iter().any(|b| b.len() < per_bucket) {
            continue;
        }
        let mut kept = Vec::with_capacity(params.n_trajectories);
        for (b, bucket) in buckets.iter().enumerate() {
            let mut order = bucket.clone();
            let mut rng = stream_rng(params.seed, &format!("stratified.bucket.{driver}.{b}"));
            order.shuffle(&mut rng);
            order.truncate(per_bucket);
            kept.extend(order);
        }
        eligible.insert(
            driver.clone(),
            kept.iter()
                .map(|&i| matrix.trajectory_ids[i].clone())
                .collect(),
        );
    }
    let chosen = pick_drivers(&eligible, params.n_drivers, params.seed, "stratified.drivers")?;
    let per_driver: BTreeMap<String, Vec<String>> = chosen
        .into_iter()
        .map(|d| {
            let trajs = eligible.remove(&d).unwrap();
            (d, trajs)
        })
        .collect();
    let mut manifest = DatasetManifest {
        name: format!("St-{}", params.n_drivers),
        strategy: Strategy::Stratified,
        params: ParamsRecord {
            nu: None,
            thresholds: Some(params.thresholds.clone()),
            n_trajectories: params.n_trajectories,
            n_drivers: params.n_drivers,
        },
        seed: params.seed,
        stats: SimilarityStats::zero(),
        entries: sorted_entries(per_driver),
    };
    manifest.stats = manifest_stats(&manifest, matrices)?;
    Ok(manifest)
}

/// Random sampling: `n_drivers` drivers with at least `n_trajectories`
/// trajectories, and that many trajectories drawn uniformly per driver.
/// Stats are left zeroed; callers with similarity matrices can fill them
/// via [`manifest_stats`].
pub fn random_sample(
    trajectories_by_driver: &BTreeMap<String, Vec<String>>,
    params: &SamplingParams,
) -> Result<DatasetManifest> {
    params.validate(Strategy::Random)?;
    let mut eligible: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (driver, trajs) in trajectories_by_driver {
        if trajs.len() < params.n_trajectories {
            continue;
        }
        let mut sorted = trajs.clone();
        sorted.sort();
        let mut rng = stream_rng(params.seed, &format!("random.trajs.{driver}"));
        sorted.shuffle(&mut rng);
        sorted.truncate(params.n_trajectories);
        eligible.insert(driver.clone(), sorted);
    }
    let chosen = pick_drivers(&eligible, params.n_drivers, params.seed, "random.drivers")?;
    let per_driver: BTreeMap<String, Vec<String>> = chosen
        .into_iter()
        .map(|d| {
            let trajs = eligible.remove(&d).unwrap();
            (d, trajs)
        })
        .collect();
    Ok(DatasetManifest {
        name: format!("Rd-{}", params.n_drivers),
        strategy: Strategy::Random,
        params: ParamsRecord {
            nu: None,
            thresholds: None,
            n_trajectories: params.n_trajectories,
            n_drivers: params.n_drivers,
        },
        seed: params.seed,
        stats: SimilarityStats::zero(),
        entries: sorted_entries(per_driver),
    })
}
