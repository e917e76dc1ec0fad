//! Spatial similarity between trajectories.
//!
//! Two points match when their haversine distance is below a threshold tau;
//! the score between two trajectories is the size of a greedy point matching
//! divided by the shorter length. The greedy scan is quadratic, so the inner
//! loop carries conservative distance lower bounds that skip pairs which
//! provably cannot match without ever changing the result.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_nearest_rank;
use crate::telemetry::Trajectory;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Point-matching distance threshold in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThreshold {
    pub tau: f64,
}

impl Default for MatchThreshold {
    fn default() -> Self {
        MatchThreshold { tau: 100.0 }
    }
}

impl MatchThreshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::validation(format!("tau must be positive, got {tau}")));
        }
        Ok(MatchThreshold { tau })
    }
}

/// Great-circle distance in meters between two (lat, lng) pairs in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lat1 = a.0.to_radians();
    let lat2 = b.0.to_radians();
    let dlat = (b.0 - a.0).to_radians();
    let dlng = (b.1 - a.1).to_radians();
    let s1 = (dlat / 2.0).sin();
    let s2 = (dlng / 2.0).sin();
    let h = s1 * s1 + lat1.cos() * lat2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Trajectory coordinates unpacked to radians, with the values the inner
/// matching loop reuses per point.
struct Coords {
    lat: Vec<f64>,
    lng: Vec<f64>,
    cos_lat: Vec<f64>,
    lat_min: f64,
    lat_max: f64,
}

impl Coords {
    fn from_trajectory(t: &Trajectory) -> Result<Self> {
        if t.points.is_empty() {
            return Err(Error::validation(format!(
                "trajectory {}/{} is empty",
                t.driver_id, t.trajectory_id
            )));
        }
        let mut lat = Vec::with_capacity(t.points.len());
        let mut lng = Vec::with_capacity(t.points.len());
        let mut cos_lat = Vec::with_capacity(t.points.len());
        for (i, p) in t.points.iter().enumerate() {
            let (la, ln) = match (p.lat, p.lng) {
                (Some(la), Some(ln)) => (la, ln),
                _ => {
                    return Err(Error::validation(format!(
                        "trajectory {}/{} point {i} lacks coordinates",
                        t.driver_id, t.trajectory_id
                    )))
                }
            };
            lat.push(la.to_radians());
            lng.push(ln.to_radians());
            cos_lat.push(la.to_radians().cos());
        }
        let lat_min = lat.iter().copied().fold(f64::INFINITY, f64::min);
        let lat_max = lat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Coords {
            lat,
            lng,
            cos_lat,
            lat_min,
            lat_max,
        })
    }

    fn len(&self) -> usize {
        self.lat.len()
    }
}

/// Distance in meters between two points given in radians.
fn haversine_rad(lat1: f64, lng1: f64, cos1: f64, lat2: f64, lng2: f64, cos2: f64) -> f64 {
    let s1 = ((lat2 - lat1) / 2.0).sin();
    let s2 = ((lng2 - lng1) / 2.0).sin();
    let h = s1 * s1 + cos1 * cos2 * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn greedy_match_count(a: &Coords, b: &Coords, tau: f64) -> usize {
    // The central angle is at least |dlat|, so R*|dlat| lower-bounds the
    // distance; if even the closest latitudes are too far apart no pair can
    // match and the whole scan is skipped.
    let tau_rad = tau / EARTH_RADIUS_M;
    let lat_gap = (b.lat_min - a.lat_max).max(a.lat_min - b.lat_max);
    if lat_gap >= tau_rad {
        return 0;
    }
    let n_b = b.len();
    let mut matched = vec![false; n_b];
    let mut count = 0usize;
    for i in 0..a.len() {
        let (la, ln, ca) = (a.lat[i], a.lng[i], a.cos_lat[i]);
        for j in 0..n_b {
            if matched[j] {
                continue;
            }
            if (b.lat[j] - la).abs() >= tau_rad {
                continue;
            }
            let d = haversine_rad(la, ln, ca, b.lat[j], b.lng[j], b.cos_lat[j]);
            if d < tau {
                matched[j] = true;
                count += 1;
                break;
            }
        }
        if count == n_b {
            break;
        }
    }
    count
}

/// Greedy point-matching similarity in [0, 1]. Scans `t1` in order, matching
/// each point to the first unmatched point of `t2` within `thr.tau`; the
/// score is the match count over the shorter trajectory length.
///
/// The score is not guaranteed symmetric; callers that need a convention use
/// the lower-index trajectory as `t1` (see [`pairwise_similarity`]).
pub fn similarity_score(t1: &Trajectory, t2: &Trajectory, thr: &MatchThreshold) -> Result<f64> {
    let a = Coords::from_trajectory(t1)?;
    let b = Coords::from_trajectory(t2)?;
    let count = greedy_match_count(&a, &b, thr.tau);
    Ok(count as f64 / a.len().min(b.len()) as f64)
}

/// Per-driver similarity summary (nearest-rank percentiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl SimilarityStats {
    pub fn zero() -> Self {
        SimilarityStats {
            p50: 0.0,
            p90: 0.0,
            max: 0.0,
        }
    }

    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::validation("no similarity scores to summarize"));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("similarity scores are finite"));
        Ok(SimilarityStats {
            p50: percentile_nearest_rank(&sorted, 50.0),
            p90: percentile_nearest_rank(&sorted, 90.0),
            max: *sorted.last().unwrap(),
        })
    }
}

/// Symmetric pairwise similarity matrix for one driver's trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub trajectory_ids: Vec<String>,
    scores: Vec<f64>, // row-major n x n
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.trajectory_ids.len()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n() + j]
    }

    pub fn index_of(&self, trajectory_id: &str) -> Option<usize> {
        self.trajectory_ids.iter().position(|t| t == trajectory_id)
    }

    /// All upper-triangle entries (i < j).
    pub fn pair_scores(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.score(i, j));
            }
        }
        out
    }

    /// Mean similarity of trajectory `i` against all others.
    pub fn average_of(&self, i: usize) -> f64 {
        let n = self.n();
        assert!(n >= 2, "average over fewer than 2 trajectories");
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                sum += self.score(i, j);
            }
        }
        sum / (n - 1) as f64
    }

    pub fn stats(&self) -> Result<SimilarityStats> {
        SimilarityStats::from_scores(&self.pair_scores())
    }
}

/// Pairwise matrix over one driver's trajectories, evaluating each (i, j)
/// with the lower-index trajectory as `t1` and mirroring the result. Cells
/// are computed in parallel; assembly order is fixed.
pub fn pairwise_similarity(
    trajectories: &[Trajectory],
    thr: &MatchThreshold,
) -> Result<SimilarityMatrix> {
    let n = trajectories.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "pairwise similarity needs at least 2 trajectories, got {n}"
        )));
    }
    let coords: Vec<Coords> = trajectories
        .iter()
        .map(Coords::from_trajectory)
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let cells: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let count = greedy_match_count(&coords[i], &coords[j], thr.tau);
            count as f64 / coords[i].len().min(coords[j].len()) as f64
        })
        .collect();
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        scores[i * n + i] = 1.0;
    }
    for (&(i, j), &s) in pairs.iter().zip(cells.iter()) {
        scores[i * n + j] = s;
        scores[j * n + i] = s;
    }
    Ok(SimilarityMatrix {
        trajectory_ids: trajectories
            .iter()
            .map(|t| t.trajectory_id.clone())
            .collect(),
        scores,
    })
}

/// Matrix CSV layout: first cell empty, then trajectory ids as both column
/// and row headers.
pub fn write_matrix_csv<W: Write>(writer: W, matrix: &SimilarityMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![String::new()];
    header.extend(matrix.trajectory_ids.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..matrix.n() {
        let mut row = vec![matrix.trajectory_ids[i].clone()];
        for j in 0..matrix.n() {
            row.push(matrix.score(i, j).to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(reader: R) -> Result<SimilarityMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let trajectory_ids: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .skip(1)
        .map(|s| s.to_string())
        .collect();
    let n = trajectory_ids.len();
    let mut scores = vec![0.0; n * n];
    let mut row_count = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if i >= n || record.len() != n + 1 || record[0] != *trajectory_ids[i] {
            return Err(Error::validation("similarity matrix CSV is not square"));
        }
        for j in 0..n {
            scores[i * n + j] = record[j + 1].parse().map_err(|_| Error::Parse {
                line: i as u64 + 2,
                message: format!("bad matrix cell {:?}", &record[j + 1]),
            })?;
        }
        row_count += 1;
    }
    if row_count != n {
        return Err(Error::validation("similarity matrix CSV is not square"));
    }
    Ok(SimilarityMatrix {
        trajectory_ids,
        scores,
    })
}

/// Per-driver pairwise matrices for a whole dataset, drivers keyed by id.
/// Drivers with fewer than two trajectories are skipped.
pub fn matrices_by_driver(
    trajectories: &[Trajectory],
    thr: &MatchThreshold,
) -> Result<BTreeMap<String, SimilarityMatrix>> {
    let mut by_driver: BTreeMap<String, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        by_driver.entry(t.driver_id.clone()).or_default().push(t);
    }
    let mut out = BTreeMap::new();
    for (driver, mut trajs) in by_driver {
        if trajs.len() < 2 {
            continue;
        }
        trajs.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
        let owned: Vec<Trajectory> = trajs.into_iter().cloned().collect();
        out.insert(driver, pairwise_similarity(&owned, thr)?);
    }
    Ok(out)
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::SimilarityMatrix;

    /// Build a matrix directly from a score function (fixtures only).
    pub(crate) fn matrix_from_scores<F: Fn(usize, usize) -> f64>(
        trajectory_ids: Vec<String>,
        f: F,
    ) -> SimilarityMatrix {
        let n = trajectory_ids.len();
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scores[i * n + j] = f(i, j);
            }
        }
        SimilarityMatrix {
            trajectory_ids,
            scores,
        }
    }
}
