//! Telemetry domain types, CSV ingestion, and preprocessing filters.
//!
//! A trajectory is a time-ordered 1 Hz sequence of sensor readings from one
//! trip, labeled with the driver who produced it. Sensor fields are optional
//! so that records with missing readings stay representable; preprocessing
//! decides whether to drop them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Exact CSV column order for trajectory files.
pub const CSV_HEADER: [&str; 12] = [
    "driver_id",
    "trajectory_id",
    "t",
    "speed",
    "accel",
    "rpm",
    "lat",
    "lng",
    "head",
    "acl_x",
    "acl_y",
    "acl_z",
];

/// One telemetry record. `t` is Unix epoch seconds; every sensor field may
/// be absent to represent a missing reading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DataPoint {
    pub t: i64,
    /// Ground velocity, m/s.
    pub speed: Option<f64>,
    /// Rate of change of velocity, m/s².
    pub accel: Option<f64>,
    /// Engine revolutions per minute, non-negative.
    pub rpm: Option<f64>,
    /// Latitude, degrees in [-90, 90].
    pub lat: Option<f64>,
    /// Longitude, degrees in [-180, 180].
    pub lng: Option<f64>,
    /// Heading, integer degrees in [0, 359]; 0 is north.
    pub head: Option<f64>,
    pub acl_x: Option<f64>,
    pub acl_y: Option<f64>,
    pub acl_z: Option<f64>,
}

impl DataPoint {
    /// True when every sensor field carries a value.
    pub fn is_complete(&self) -> bool {
        self.speed.is_some()
            && self.accel.is_some()
            && self.rpm.is_some()
            && self.lat.is_some()
            && self.lng.is_some()
            && self.head.is_some()
            && self.acl_x.is_some()
            && self.acl_y.is_some()
            && self.acl_z.is_some()
    }

    fn check_ranges(&self) -> std::result::Result<(), String> {
        if let Some(lat) = self.lat {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(format!("lat {lat} outside [-90, 90]"));
            }
        }
        if let Some(lng) = self.lng {
            if !(-180.0..=180.0).contains(&lng) {
                return Err(format!("lng {lng} outside [-180, 180]"));
            }
        }
        if let Some(head) = self.head {
            if !(0.0..=359.0).contains(&head) {
                return Err(format!("head {head} outside [0, 359]"));
            }
        }
        if let Some(rpm) = self.rpm {
            if rpm < 0.0 {
                return Err(format!("rpm {rpm} is negative"));
            }
        }
        Ok(())
    }
}

/// A labeled trip: at least two points with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub driver_id: String,
    pub trajectory_id: String,
    pub points: Vec<DataPoint>,
}

impl Trajectory {
    pub fn new(
        driver_id: impl Into<String>,
        trajectory_id: impl Into<String>,
        points: Vec<DataPoint>,
    ) -> Result<Self> {
        let driver_id = driver_id.into();
        let trajectory_id = trajectory_id.into();
        if points.len() < 2 {
            return Err(Error::validation(format!(
                "trajectory {driver_id}/{trajectory_id} has {} point(s), need at least 2",
                points.len()
            )));
        }
        for w in points.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::validation(format!(
                    "trajectory {driver_id}/{trajectory_id}: timestamps not strictly increasing at t={}",
                    w[1].t
                )));
            }
        }
        Ok(Trajectory {
            driver_id,
            trajectory_id,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Elapsed seconds between first and last point.
    pub fn duration(&self) -> i64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

/// Preprocessing filter settings. `trim_seconds` is removed from each end
/// by timestamp; the duration bounds apply to the trimmed trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub trim_seconds: i64,
    pub min_duration: i64,
    pub max_duration: i64,
    pub drop_missing: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            trim_seconds: 120,
            min_duration: 600,
            max_duration: 1800,
            drop_missing: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trim_seconds < 0 {
            return Err(Error::validation("trim_seconds must be >= 0"));
        }
        if self.min_duration > self.max_duration {
            return Err(Error::validation(format!(
                "min_duration {} exceeds max_duration {}",
                self.min_duration, self.max_duration
            )));
        }
        Ok(())
    }
}

fn parse_opt_f64(field: &str, name: &str, line: u64) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse {
            line,
            message: format!("field {name} is not a number: {field:?}"),
        })
}

/// Parse the documented CSV format into trajectories.
///
/// Rows are grouped by (driver_id, trajectory_id) regardless of input order;
/// points are sorted by timestamp. Output trajectories are ordered by
/// (driver_id, trajectory_id).
pub fn parse_trajectories<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let expect: Vec<&str> = CSV_HEADER.to_vec();
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {:?}", got.join(",")),
            });
        }
    }

    // (driver, trajectory) -> [(t, source line, point)]
    let mut groups: BTreeMap<(String, String), Vec<(i64, u64, DataPoint)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), record.len()),
            });
        }
        let driver_id = record[0].to_string();
        let trajectory_id = record[1].to_string();
        if driver_id.is_empty() || trajectory_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "driver_id and trajectory_id must be non-empty".into(),
            });
        }
        let t: i64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp is not an integer: {:?}", &record[2]),
        })?;
        let point = DataPoint {
            t,
            speed: parse_opt_f64(&record[3], "speed", line)?,
            accel: parse_opt_f64(&record[4], "accel", line)?,
            rpm: parse_opt_f64(&record[5], "rpm", line)?,
            lat: parse_opt_f64(&record[6], "lat", line)?,
            lng: parse_opt_f64(&record[7], "lng", line)?,
            head: parse_opt_f64(&record[8], "head", line)?,
            acl_x: parse_opt_f64(&record[9], "acl_x", line)?,
            acl_y: parse_opt_f64(&record[10], "acl_y", line)?,
            acl_z: parse_opt_f64(&record[11], "acl_z", line)?,
        };
        if let Err(msg) = point.check_ranges() {
            return Err(Error::Parse { line, message: msg });
        }
        groups
            .entry((driver_id, trajectory_id))
            .or_default()
            .push((t, line, point));
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((driver_id, trajectory_id), mut rows) in groups {
        rows.sort_by_key(|(t, _, _)| *t);
        for w in rows.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::Parse {
                    line: w[1].1,
                    message: format!(
                        "duplicate timestamp {} in trajectory {driver_id}/{trajectory_id}",
                        w[1].0
                    ),
                });
            }
        }
        let points: Vec<DataPoint> = rows.into_iter().map(|(_, _, p)| p).collect();
        out.push(Trajectory::new(driver_id, trajectory_id, points)?);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serialize trajectories to the documented CSV format.
pub fn write_trajectories<W: Write>(writer: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_HEADER)?;
    for traj in trajectories {
        for p in &traj.points {
            wtr.write_record([
                traj.driver_id.as_str(),
                traj.trajectory_id.as_str(),
                &p.t.to_string(),
                &fmt_opt(p.speed),
                &fmt_opt(p.accel),
                &fmt_opt(p.rpm),
                &fmt_opt(p.lat),
                &fmt_opt(p.lng),
                &fmt_opt(p.head),
                &fmt_opt(p.acl_x),
                &fmt_opt(p.acl_y),
                &fmt_opt(p.acl_z),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Apply the trim/duration/missing-value filters. Returns `None` when the
/// trajectory does not survive; the input is never modified.
pub fn preprocess(trajectory: &Trajectory, cfg: &PreprocessConfig) -> Option<Trajectory> {
    let first = trajectory.points.first()?.t;
    let last = trajectory.points.last()?.t;
    let lo = first + cfg.trim_seconds;
    let hi = last - cfg.trim_seconds;
    let kept: Vec<DataPoint> = trajectory
        .points
        .iter()
        .filter(|p| p.t >= lo && p.t <= hi)
        .copied()
        .collect();
    if kept.len() < 2 {
        return None;
    }
    let duration = kept.last().unwrap().t - kept.first().unwrap().t;
    if duration < cfg.min_duration || duration > cfg.max_duration {
        return None;
    }
    if cfg.drop_missing && kept.iter().any(|p| !p.is_complete()) {
        return None;
    }
    Some(Trajectory {
        driver_id: trajectory.driver_id.clone(),
        trajectory_id: trajectory.trajectory_id.clone(),
        points: kept,
    })
}
