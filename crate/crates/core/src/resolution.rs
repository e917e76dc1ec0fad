//! Driver resolution: cluster trajectory-level latent vectors to estimate
//! how many drivers produced an unlabeled trajectory set and how well the
//! partition matches ground truth.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcrnn::Dcrnn;
use crate::encoding::AggregateFeatureMap;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::stats::{mean, population_std};

/// Trajectory latent representation: the component-wise mean of its
/// segments' sigmoid dense outputs in infer mode.
pub fn latent_trajectory(model: &mut Dcrnn, maps: &[AggregateFeatureMap]) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::validation(
            "trajectory yields no segments to embed",
        ));
    }
    let dim = model.config().fc1_units;
    let mut acc = vec![0.0; dim];
    for map in maps {
        let (_, latent) = model.predict_map(map)?;
        for (a, v) in acc.iter_mut().zip(latent.iter()) {
            *a += v;
        }
    }
    let k = maps.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite latent vector"));
    }
    Ok(acc)
}

/// Affinity propagation settings. `preference` defaults to the median of
/// the off-diagonal similarities when unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApConfig {
    pub damping: f64,
    pub preference: Option<f64>,
    pub max_iter: usize,
    pub convergence_window: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        ApConfig {
            damping: 0.5,
            preference: None,
            max_iter: 200,
            convergence_window: 15,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.damping) {
            return Err(Error::validation(format!(
                "damping must lie in [0.5, 1), got {}",
                self.damping
            )));
        }
        if self.max_iter == 0 || self.convergence_window == 0 {
            return Err(Error::validation(
                "max_iter and convergence_window must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Cluster label per point, 0..num_clusters.
    pub labels: Vec<usize>,
    /// Point indices serving as exemplars, ascending.
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl ApResult {
    pub fn num_clusters(&self) -> usize {
        self.exemplars.len()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Standard affinity propagation over points with similarity
/// s(i,k) = -||xi - xk||^2 and s(k,k) = preference. Messages damp by
/// `damping`; the run converges when a non-empty exemplar set is stable for
/// `convergence_window` iterations. No jitter is added, so the outcome is a
/// pure function of the inputs; ties break toward the lowest index.
pub fn affinity_propagation(points: &[Vec<f64>], cfg: &ApConfig) -> Result<ApResult> {
    cfg.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "affinity propagation needs at least 2 points, got {n}"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("latent vectors have mixed dimensions"));
    }

    let mut s = vec![0.0f64; n * n];
    let mut off_diag = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for k in 0..n {
            if i != k {
                let sim = -squared_distance(&points[i], &points[k]);
                s[i * n + k] = sim;
                off_diag.push(sim);
            }
        }
    }
    let preference = cfg.preference.unwrap_or_else(|| {
        off_diag.sort_by(|a, b| a.partial_cmp(b).expect("finite similarities"));
        crate::stats::percentile_nearest_rank(&off_diag, 50.0)
    });
    for k in 0..n {
        s[k * n + k] = preference;
    }

    let lambda = cfg.damping;
    let mut r = vec![0.0f64; n * n];
    let mut a = vec![0.0f64; n * n];
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        // responsibilities
        for i in 0..n {
            let row = i * n;
            let mut max1 = f64::NEG_INFINITY;
            let mut max2 = f64::NEG_INFINITY;
            let mut arg1 = 0usize;
            for k in 0..n {
                let v = a[row + k] + s[row + k];
                if v > max1 {
                    max2 = max1;
                    max1 = v;
                    arg1 = k;
                } else if v > max2 {
                    max2 = v;
                }
            }
            for k in 0..n {
                let other = if k == arg1 { max2 } else { max1 };
                let new_r = s[row + k] - other;
                r[row + k] = lambda * r[row + k] + (1.0 - lambda) * new_r;
            }
        }
        // availabilities
        for k in 0..n {
            let mut sum_pos = 0.0;
            for i in 0..n {
                if i != k {
                    sum_pos += r[i * n + k].max(0.0);
                }
            }
            let rkk = r[k * n + k];
            for i in 0..n {
                let new_a = if i == k {
                    sum_pos
                } else {
                    (rkk + sum_pos - r[i * n + k].max(0.0)).min(0.0)
                };
                a[i * n + k] = lambda * a[i * n + k] + (1.0 - lambda) * new_a;
            }
        }
        let current: Vec<usize> = (0..n)
            .filter(|&k| r[k * n + k] + a[k * n + k] > 0.0)
            .collect();
        if !current.is_empty() && current == exemplars {
            stable += 1;
            if stable >= cfg.convergence_window {
                converged = true;
                break;
            }
        } else {
            stable = 0;
            exemplars = current;
        }
    }

    if exemplars.is_empty() {
        // degenerate run: fall back to the strongest self-message
        let best = (0..n)
            .max_by(|&x, &y| {
                let vx = r[x * n + x] + a[x * n + x];
                let vy = r[y * n + y] + a[y * n + y];
                vx.partial_cmp(&vy).expect("finite messages")
            })
            .unwrap_or(0);
        exemplars = vec![best];
        converged = false;
    }

    // assign every point to its most similar exemplar; exemplars to themselves
    let mut labels = vec![0usize; n];
    for i in 0..n {
        if let Some(pos) = exemplars.iter().position(|&e| e == i) {
            labels[i] = pos;
            continue;
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, &e) in exemplars.iter().enumerate() {
            let sim = s[i * n + e];
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        labels[i] = best;
    }
    Ok(ApResult {
        labels,
        exemplars,
        converged,
        iterations,
    })
}

/// Adjusted mutual information with the exact hypergeometric expectation and
/// arithmetic-mean entropy normalization. When the denominator vanishes and
/// MI equals its expectation, identical partitions score 1 and anything
/// else 0.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "label vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::validation("empty labelings"));
    }
    let n = a.len();
    let nf = n as f64;

    let mut count_a: BTreeMap<usize, usize> = BTreeMap::new();
    let mut count_b: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *count_a.entry(x).or_insert(0) += 1;
        *count_b.entry(y).or_insert(0) += 1;
        *joint.entry((x, y)).or_insert(0) += 1;
    }

    let entropy = |counts: &BTreeMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&count_a);
    let h_b = entropy(&count_b);

    let mut mi = 0.0;
    for (&(x, y), &nij) in &joint {
        let ai = count_a[&x] as f64;
        let bj = count_b[&y] as f64;
        mi += (nij as f64 / nf) * ((nf * nij as f64) / (ai * bj)).ln();
    }

    // ln k! table for the hypergeometric expectation
    let mut ln_fact = vec![0.0f64; n + 1];
    for k in 1..=n {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let mut emi = 0.0;
    for &ai in count_a.values() {
        for &bj in count_b.values() {
            let lo = if ai + bj > n { ai + bj - n } else { 1 };
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let ln_p = ln_fact[ai] + ln_fact[bj] + ln_fact[n - ai] + ln_fact[n - bj]
                    - ln_fact[n]
                    - ln_fact[nij]
                    - ln_fact[ai - nij]
                    - ln_fact[bj - nij]
                    - ln_fact[n + nij - ai - bj];
                let term = (nij as f64 / nf) * ((nf * nij as f64) / (ai as f64 * bj as f64)).ln();
                emi += term * ln_p.exp();
            }
        }
    }

    let denom = 0.5 * (h_a + h_b) - emi;
    if denom.abs() < 1e-12 {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}

/// True when the two labelings induce identical partitions (a relabeling
/// bijection exists).
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd: BTreeMap<usize, usize> = BTreeMap::new();
    let mut bwd: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Absolute error between the estimated and true driver counts.
pub fn estimation_error(num_clusters: usize, num_true_drivers: usize) -> usize {
    num_clusters.abs_diff(num_true_drivers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub subsets: usize,
    pub drivers_per_subset: usize,
    pub average_ami: f64,
    pub std_ami: f64,
    pub average_ee: f64,
    pub std_ee: f64,
    /// Fraction of subsets whose message passing converged.
    pub converged_fraction: f64,
}

/// Repeatedly sample driver subsets, cluster their trajectory latents, and
/// score AMI and the cluster-count error against ground truth. `latents`
/// maps driver id to (trajectory id, latent vector) pairs, typically the
/// test split only. Subsets run in parallel; aggregation order is fixed.
pub fn resolution_experiment(
    latents: &BTreeMap<String, Vec<(String, Vec<f64>)>>,
    subsets: usize,
    drivers_per_subset: usize,
    seed: u64,
    ap: &ApConfig,
) -> Result<ResolutionReport> {
    ap.validate()?;
    if subsets == 0 {
        return Err(Error::validation("subset count must be positive"));
    }
    let drivers: Vec<&String> = latents.keys().collect();
    if drivers.len() < drivers_per_subset {
        return Err(Error::validation(format!(
            "{} driver(s) available, need {drivers_per_subset} per subset",
            drivers.len()
        )));
    }
    for (driver, trajs) in latents {
        if trajs.is_empty() {
            return Err(Error::validation(format!(
                "driver {driver} has no latent vectors"
            )));
        }
    }

    let results: Vec<Result<(f64, f64, bool)>> = (0..subsets)
        .into_par_iter()
        .map(|subset_index| {
            let mut rng = stream_rng(seed, &format!("resolution.subset.{subset_index}"));
            let mut chosen = drivers.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(drivers_per_subset);
            chosen.sort();
            let mut points = Vec::new();
            let mut truth = Vec::new();
            for (label, driver) in chosen.iter().enumerate() {
                for (_, latent) in &latents[driver.as_str()] {
                    points.push(latent.clone());
                    truth.push(label);
                }
            }
            let clustering = affinity_propagation(&points, ap)?;
            let score = ami(&clustering.labels, &truth)?;
            let ee = estimation_error(clustering.num_clusters(), drivers_per_subset);
            Ok((score, ee as f64, clustering.converged))
        })
        .collect();

    let mut amis = Vec::with_capacity(subsets);
    let mut ees = Vec::with_capacity(subsets);
    let mut converged = 0usize;
    for r in results {
        let (score, ee, conv) = r?;
        amis.push(score);
        ees.push(ee);
        if conv {
            converged += 1;
        }
    }
    Ok(ResolutionReport {
        subsets,
        drivers_per_subset,
        average_ami: mean(&amis),
        std_ami: population_std(&amis),
        average_ee: mean(&ees),
        std_ee: population_std(&ees),
        converged_fraction: converged as f64 / subsets as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_identical_points_form_one_cluster() {
        let points = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let cfg = ApConfig {
            preference: Some(-1.0),
            ..ApConfig::default()
        };
        let res = affinity_propagation(&points, &cfg).unwrap();
        assert_eq!(res.num_clusters(), 1);
        assert_eq!(res.labels, vec![0, 0]);
    }

    fn blobs(centers: &[(f64, f64)], per_blob: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream_rng(seed, "blobs");
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (b, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                points.push(vec![
                    cx + rng.gen_range(-spread..spread),
                    cy + rng.gen_range(-spread..spread),
                ]);
                labels.push(b);
            }
        }
        (points, labels)
    }

    #[test]
    fn three_separated_blobs_give_three_clusters() {
        let (points, truth) = blobs(&[(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)], 8, 0.5, 3);
        let res = affinity_propagation(&points, &ApConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.num_clusters(), 3);
        // membership must match the generating blobs exactly
        assert!((ami(&res.labels, &truth).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn very_negative_preference_merges_clusters() {
        let (points, _) = blobs(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)], 6, 1.0, 5);
        let median_run = affinity_propagation(&points, &ApConfig::default()).unwrap();
        // far below the similarity scale but within the stable regime;
        // extreme magnitudes (say -1e6) make the messages oscillate without
        // converging, which is also what reference implementations do
        let merged_run = affinity_propagation(
            &points,
            &ApConfig {
                preference: Some(-400.0),
                ..ApConfig::default()
            },
        )
        .unwrap();
        assert!(
            merged_run.num_clusters() <= median_run.num_clusters(),
            "{} vs {}",
            merged_run.num_clusters(),
            median_run.num_clusters()
        );
        assert_eq!(merged_run.num_clusters(), 1);
    }

    #[test]
    fn ap_rejects_degenerate_inputs() {
        assert!(affinity_propagation(&[vec![1.0]], &ApConfig::default()).is_err());
        let bad = ApConfig {
            damping: 0.4,
            ..ApConfig::default()
        };
        assert!(affinity_propagation(&[vec![1.0], vec![2.0]], &bad).is_err());
    }

    #[test]
    fn ami_identical_partitions_is_one() {
        let labels = [0usize, 0, 1, 1, 2, 2, 2];
        assert!((ami(&labels, &labels).unwrap() - 1.0).abs() < 1e-9);
        // invariant under relabeling
        let relabeled = [5usize, 5, 9, 9, 1, 1, 1];
        assert!((ami(&labels, &relabeled).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ami_single_cluster_vs_singletons_is_zero() {
        let pred = [0usize; 6];
        let truth = [0usize, 1, 2, 3, 4, 5];
        assert_eq!(ami(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn ami_symmetry_and_permutation_invariance() {
        let a = [0usize, 0, 1, 1, 2, 2, 0, 1];
        let b = [1usize, 0, 0, 1, 2, 2, 2, 2];
        let ab = ami(&a, &b).unwrap();
        let ba = ami(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let permuted: Vec<usize> = b.iter().map(|&x| (x + 7) * 2).collect();
        assert!((ami(&a, &permuted).unwrap() - ab).abs() < 1e-12);
    }

    /// Independent oracle: expected mutual information by direct summation
    /// with plain factorial products (exact for n this small).
    fn emi_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let count = |xs: &[usize]| {
            let mut c: BTreeMap<usize, usize> = BTreeMap::new();
            for &x in xs {
                *c.entry(x).or_insert(0) += 1;
            }
            c
        };
        fn fact(k: usize) -> f64 {
            (1..=k).map(|x| x as f64).product()
        }
        let nf = n as f64;
        let mut emi = 0.0;
        for &ai in count(a).values() {
            for &bj in count(b).values() {
                let lo = if ai + bj > n { ai + bj - n } else { 1 };
                for nij in lo..=ai.min(bj) {
                    let p = fact(ai) * fact(bj) * fact(n - ai) * fact(n - bj)
                        / (fact(n)
                            * fact(nij)
                            * fact(ai - nij)
                            * fact(bj - nij)
                            * fact(n + nij - ai - bj));
                    emi += p * (nij as f64 / nf) * ((nf * nij as f64) / ((ai * bj) as f64)).ln();
                }
            }
        }
        emi
    }

    #[test]
    fn ami_eight_point_fixture_matches_oracle() {
        let truth = [0usize, 0, 0, 1, 1, 1, 2, 2];
        let pred = [0usize, 0, 1, 1, 2, 2, 2, 2];
        let value = ami(&pred, &truth).unwrap();

        // rebuild AMI from the independent expected-MI summation
        let n = 8.0;
        let mi: f64 = {
            let pairs: [((usize, usize), f64, f64, f64); 5] = [
                ((0, 0), 2.0, 3.0, 2.0),
                ((0, 1), 1.0, 3.0, 2.0),
                ((1, 1), 1.0, 3.0, 2.0),
                ((1, 2), 2.0, 3.0, 4.0),
                ((2, 2), 2.0, 2.0, 4.0),
            ];
            pairs
                .iter()
                .map(|&(_, nij, ai, bj)| (nij / n) * ((n * nij) / (ai * bj)).ln())
                .sum()
        };
        let h_true = -(3.0 / n * (3.0f64 / n).ln()) * 2.0 - 2.0 / n * (2.0f64 / n).ln();
        let h_pred = -(2.0 / n * (2.0f64 / n).ln()) * 2.0 - 4.0 / n * (4.0f64 / n).ln();
        let emi = emi_oracle(&truth, &pred);
        let expect = (mi - emi) / (0.5 * (h_true + h_pred) - emi);
        assert!((value - expect).abs() < 1e-10, "{value} vs oracle {expect}");
        // frozen from the pre-build oracle run
        assert!((value - 0.2745416497368319).abs() < 1e-10, "{value}");
    }

    #[test]
    fn ami_rejects_length_mismatch() {
        assert!(ami(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn estimation_error_fixtures() {
        assert_eq!(estimation_error(10, 10), 0);
        assert_eq!(estimation_error(12, 10), 2);
        assert_eq!(estimation_error(7, 10), 3);
    }

    #[test]
    fn resolution_with_ideal_latents_is_perfect() {
        // inject well-separated constant latents per driver
        let mut latents: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
        for d in 0..6 {
            let base = [10.0 * d as f64, -5.0 * d as f64, 1.0];
            latents.insert(
                format!("d{d:02}"),
                (0..5)
                    .map(|t| {
                        // tiny within-driver spread; exact duplicates leave
                        // the exemplar choice symmetric and jitter-free
                        // message passing deadlocked
                        let v: Vec<f64> =
                            base.iter().map(|x| x + 1e-3 * t as f64).collect();
                        (format!("d{d:02}_t{t}"), v)
                    })
                    .collect(),
            );
        }
        let report =
            resolution_experiment(&latents, 8, 4, 7, &ApConfig::default()).unwrap();
        assert!((report.average_ami - 1.0).abs() < 1e-9, "{report:?}");
        assert_eq!(report.average_ee, 0.0);
        assert_eq!(report.std_ami, 0.0);
    }

    #[test]
    fn resolution_with_random_latents_is_near_zero() {
        let mut rng = stream_rng(13, "random-latents");
        let mut latents: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
        for d in 0..10 {
            latents.insert(
                format!("d{d:02}"),
                (0..7)
                    .map(|t| {
                        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        (format!("d{d:02}_t{t}"), v)
                    })
                    .collect(),
            );
        }
        let report =
            resolution_experiment(&latents, 6, 10, 3, &ApConfig::default()).unwrap();
        assert!(report.average_ami.abs() < 0.1, "{report:?}");
    }

    #[test]
    fn resolution_rejects_small_datasets() {
        let mut latents: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
        latents.insert("d00".into(), vec![("t0".into(), vec![0.0])]);
        assert!(resolution_experiment(&latents, 4, 10, 3, &ApConfig::default()).is_err());
    }
}
