//! Statistical feature encoding of trajectories.
//!
//! A trajectory becomes overlapping fixed-length segments; each segment
//! becomes a basic feature map (one row per selected feature) and then an
//! aggregate feature map of frame-level statistics, which is what the model
//! consumes. The aggregate layout is 7 statistic rows per feature: mean,
//! min, max, P25, P50, P75, population stddev.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::haversine;
use crate::stats::percentile_linear;
use crate::telemetry::Trajectory;

/// The ten per-point basic features. Three are derived from GPS and heading;
/// the rest are read straight off the data point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasicFeature {
    Speed,
    Accel,
    GpsSpeed,
    GpsAccel,
    AngularSpeed,
    Rpm,
    Head,
    AclX,
    AclY,
    AclZ,
}

impl BasicFeature {
    pub const ALL: [BasicFeature; 10] = [
        BasicFeature::Speed,
        BasicFeature::Accel,
        BasicFeature::GpsSpeed,
        BasicFeature::GpsAccel,
        BasicFeature::AngularSpeed,
        BasicFeature::Rpm,
        BasicFeature::Head,
        BasicFeature::AclX,
        BasicFeature::AclY,
        BasicFeature::AclZ,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BasicFeature::Speed => "speed",
            BasicFeature::Accel => "accel",
            BasicFeature::GpsSpeed => "gps_speed",
            BasicFeature::GpsAccel => "gps_accel",
            BasicFeature::AngularSpeed => "angular_speed",
            BasicFeature::Rpm => "rpm",
            BasicFeature::Head => "head",
            BasicFeature::AclX => "acl_x",
            BasicFeature::AclY => "acl_y",
            BasicFeature::AclZ => "acl_z",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown feature {s:?}")))
    }

    fn index(&self) -> usize {
        Self::ALL.iter().position(|f| f == self).unwrap()
    }
}

impl fmt::Display for BasicFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Segment and frame geometry plus the selected feature subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Segment length in points; segments shift by l1/2.
    pub l1: usize,
    /// Frame length in columns; frames shift by l2/2.
    pub l2: usize,
    pub features: Vec<BasicFeature>,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            l1: 256,
            l2: 4,
            features: vec![BasicFeature::Speed, BasicFeature::Accel, BasicFeature::Rpm],
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::validation("feature subset must be non-empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.features {
            if !seen.insert(*f) {
                return Err(Error::validation(format!("duplicate feature {f}")));
            }
        }
        if self.l1 % 2 != 0 || self.l2 % 2 != 0 {
            return Err(Error::validation("l1 and l2 must be even"));
        }
        if self.l2 >= self.l1 {
            return Err(Error::validation(format!(
                "l2 ({}) must be smaller than l1 ({})",
                self.l2, self.l1
            )));
        }
        if (2 * self.l1) % self.l2 != 0 {
            return Err(Error::validation("l2 must divide 2*l1"));
        }
        Ok(())
    }

    /// Columns of the aggregate map: 2*l1/l2.
    pub fn time_len(&self) -> usize {
        2 * self.l1 / self.l2
    }

    /// Rows of the aggregate map: 7 statistics per feature.
    pub fn aggregate_rows(&self) -> usize {
        7 * self.features.len()
    }
}

/// Per-point values for all ten basic features over one trajectory; `None`
/// marks a missing underlying reading.
pub struct FeatureTable {
    pub len: usize,
    values: [Vec<Option<f64>>; 10],
}

impl FeatureTable {
    pub fn get(&self, feature: BasicFeature, i: usize) -> Option<f64> {
        self.values[feature.index()][i]
    }
}

/// Wrap a heading difference into (-180, 180].
fn wrap_heading_delta(d: f64) -> f64 {
    let mut w = d % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

/// Backfill leading `None`s with the first defined value.
fn backfill(v: &mut [Option<f64>]) {
    if let Some(first_defined) = v.iter().flatten().next().copied() {
        for slot in v.iter_mut() {
            if slot.is_some() {
                break;
            }
            *slot = Some(first_defined);
        }
    }
}

/// Compute the per-point feature table: raw features pass through; GPS
/// speed/acceleration and angular speed are differenced from coordinates and
/// heading, with the leading undefined entries backfilled.
pub fn derive_point_features(trajectory: &Trajectory) -> Result<FeatureTable> {
    let n = trajectory.points.len();
    let pts = &trajectory.points;
    let mut values: [Vec<Option<f64>>; 10] = Default::default();
    for v in values.iter_mut() {
        v.resize(n, None);
    }

    for (i, p) in pts.iter().enumerate() {
        values[BasicFeature::Speed.index()][i] = p.speed;
        values[BasicFeature::Accel.index()][i] = p.accel;
        values[BasicFeature::Rpm.index()][i] = p.rpm;
        values[BasicFeature::Head.index()][i] = p.head;
        values[BasicFeature::AclX.index()][i] = p.acl_x;
        values[BasicFeature::AclY.index()][i] = p.acl_y;
        values[BasicFeature::AclZ.index()][i] = p.acl_z;
    }

    // GPS speed from consecutive coordinates
    for i in 1..n {
        let dt = (pts[i].t - pts[i - 1].t) as f64;
        if dt == 0.0 {
            return Err(Error::validation(format!(
                "zero time delta at point {i} of trajectory {}/{}",
                trajectory.driver_id, trajectory.trajectory_id
            )));
        }
        if let (Some(la0), Some(lo0), Some(la1), Some(lo1)) =
            (pts[i - 1].lat, pts[i - 1].lng, pts[i].lat, pts[i].lng)
        {
            let d = haversine((la0, lo0), (la1, lo1));
            values[BasicFeature::GpsSpeed.index()][i] = Some(d / dt);
        }
        if let (Some(h0), Some(h1)) = (pts[i - 1].head, pts[i].head) {
            values[BasicFeature::AngularSpeed.index()][i] =
                Some(wrap_heading_delta(h1 - h0) / dt);
        }
    }
    // GPS acceleration differences GPS speed once more
    for i in 2..n {
        let dt = (pts[i].t - pts[i - 1].t) as f64;
        let gs = &values[BasicFeature::GpsSpeed.index()];
        if let (Some(v0), Some(v1)) = (gs[i - 1], gs[i]) {
            values[BasicFeature::GpsAccel.index()][i] = Some((v1 - v0) / dt);
        }
    }
    backfill(&mut values[BasicFeature::GpsSpeed.index()]);
    backfill(&mut values[BasicFeature::GpsAccel.index()]);
    backfill(&mut values[BasicFeature::AngularSpeed.index()]);

    Ok(FeatureTable { len: n, values })
}

/// Window starts at multiples of l1/2; exactly floor(2n/l1) - 1 full windows,
/// the trailing remainder is discarded. Empty when n < l1.
pub fn segment(n: usize, cfg: &EncodingConfig) -> Vec<Range<usize>> {
    if n < cfg.l1 {
        return Vec::new();
    }
    let k = (2 * n / cfg.l1).saturating_sub(1);
    let half = cfg.l1 / 2;
    (0..k).map(|i| i * half..i * half + cfg.l1).collect()
}

/// Raw per-point series for one segment: |F| rows by l1 columns, rows in
/// configured feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicFeatureMap {
    pub features: Vec<BasicFeature>,
    pub l1: usize,
    /// Row-major |F| x l1.
    pub data: Vec<f64>,
}

pub fn basic_feature_map(
    table: &FeatureTable,
    window: &Range<usize>,
    cfg: &EncodingConfig,
) -> Result<BasicFeatureMap> {
    if window.end > table.len || window.end - window.start != cfg.l1 {
        return Err(Error::validation(format!(
            "window {window:?} does not fit table of length {} with l1 {}",
            table.len, cfg.l1
        )));
    }
    let mut data = Vec::with_capacity(cfg.features.len() * cfg.l1);
    for feature in &cfg.features {
        for i in window.clone() {
            match table.get(*feature, i) {
                Some(v) => data.push(v),
                None => {
                    return Err(Error::validation(format!(
                        "missing feature {feature} at point {i}"
                    )))
                }
            }
        }
    }
    Ok(BasicFeatureMap {
        features: cfg.features.clone(),
        l1: cfg.l1,
        data,
    })
}

/// Frame statistics of a basic map: 7|F| rows by 2*l1/l2 columns. Statistic
/// row order per feature: mean, min, max, P25, P50, P75, stddev.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateFeatureMap {
    pub features: Vec<BasicFeature>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major rows x cols.
    pub data: Vec<f64>,
}

pub const STATS_PER_FEATURE: usize = 7;

/// Frames of width l2 advance by l2/2 along the time axis; the final frame
/// is completed with l2/2 zero columns so the output always has 2*l1/l2
/// frames. Percentiles interpolate linearly; stddev is the population form.
pub fn aggregate_feature_map(
    basic: &BasicFeatureMap,
    cfg: &EncodingConfig,
) -> Result<AggregateFeatureMap> {
    if basic.features != cfg.features || basic.l1 != cfg.l1 {
        return Err(Error::validation(
            "basic map does not match the encoding config",
        ));
    }
    let n_feat = cfg.features.len();
    let cols = cfg.time_len();
    let rows = cfg.aggregate_rows();
    let half = cfg.l2 / 2;
    let mut data = vec![0.0; rows * cols];
    let mut frame = vec![0.0; cfg.l2];
    let mut sorted = vec![0.0; cfg.l2];
    for f in 0..n_feat {
        let series = &basic.data[f * cfg.l1..(f + 1) * cfg.l1];
        for j in 0..cols {
            let start = j * half;
            for (k, slot) in frame.iter_mut().enumerate() {
                let idx = start + k;
                *slot = if idx < cfg.l1 { series[idx] } else { 0.0 };
            }
            sorted.copy_from_slice(&frame);
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite feature values"));
            let mean = frame.iter().sum::<f64>() / cfg.l2 as f64;
            let var =
                frame.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cfg.l2 as f64;
            let stats = [
                mean,
                sorted[0],
                sorted[cfg.l2 - 1],
                percentile_linear(&sorted, 25.0),
                percentile_linear(&sorted, 50.0),
                percentile_linear(&sorted, 75.0),
                var.sqrt(),
            ];
            for (s, v) in stats.iter().enumerate() {
                data[(f * STATS_PER_FEATURE + s) * cols + j] = *v;
            }
        }
    }
    Ok(AggregateFeatureMap {
        features: cfg.features.clone(),
        rows,
        cols,
        data,
    })
}

/// Derive, window, and aggregate one trajectory end to end. Trajectories
/// shorter than l1 yield an empty list.
pub fn encode_trajectory(
    trajectory: &Trajectory,
    cfg: &EncodingConfig,
) -> Result<Vec<AggregateFeatureMap>> {
    cfg.validate()?;
    let table = derive_point_features(trajectory)?;
    segment(table.len, cfg)
        .iter()
        .map(|w| {
            let basic = basic_feature_map(&table, w, cfg)?;
            aggregate_feature_map(&basic, cfg)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// binary container for encoded segments
// ---------------------------------------------------------------------------

const CONTAINER_MAGIC: &[u8; 4] = b"DPFM";
const CONTAINER_VERSION: u16 = 1;

/// One encoded segment as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub trajectory_id: String,
    pub segment_index: u32,
    pub map: AggregateFeatureMap,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::validation(format!("string too long: {s:?}")));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

/// Header: magic, version u16, |F| u16, rows u32, cols u32, then the feature
/// name table. Records follow to EOF: trajectory_id, segment index u32, and
/// the row-major little-endian f64 map.
pub fn write_segments<W: Write>(
    mut w: W,
    cfg: &EncodingConfig,
    records: &[SegmentRecord],
) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.features.len() as u16).to_le_bytes())?;
    w.write_all(&(cfg.aggregate_rows() as u32).to_le_bytes())?;
    w.write_all(&(cfg.time_len() as u32).to_le_bytes())?;
    for f in &cfg.features {
        write_str(&mut w, f.name())?;
    }
    for rec in records {
        if rec.map.rows != cfg.aggregate_rows() || rec.map.cols != cfg.time_len() {
            return Err(Error::shape(format!(
                "segment {}/{} has {}x{} map, container is {}x{}",
                rec.trajectory_id,
                rec.segment_index,
                rec.map.rows,
                rec.map.cols,
                cfg.aggregate_rows(),
                cfg.time_len()
            )));
        }
        write_str(&mut w, &rec.trajectory_id)?;
        w.write_all(&rec.segment_index.to_le_bytes())?;
        for v in &rec.map.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Container header as read back.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub features: Vec<BasicFeature>,
    pub rows: usize,
    pub cols: usize,
}

pub fn read_segments<R: Read>(mut r: R) -> Result<(ContainerHeader, Vec<SegmentRecord>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::validation("not a feature container (bad magic)"));
    }
    let mut u2 = [0u8; 2];
    r.read_exact(&mut u2)?;
    if u16::from_le_bytes(u2) != CONTAINER_VERSION {
        return Err(Error::validation("unsupported feature container version"));
    }
    r.read_exact(&mut u2)?;
    let n_feat = u16::from_le_bytes(u2) as usize;
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4)?;
    let rows = u32::from_le_bytes(u4) as usize;
    r.read_exact(&mut u4)?;
    let cols = u32::from_le_bytes(u4) as usize;
    if rows != STATS_PER_FEATURE * n_feat {
        return Err(Error::validation(format!(
            "container declares {rows} rows for {n_feat} features"
        )));
    }
    let mut features = Vec::with_capacity(n_feat);
    for _ in 0..n_feat {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf)
            .map_err(|e| Error::validation(format!("bad UTF-8 in container: {e}")))?;
        features.push(BasicFeature::parse(&name)?);
    }
    let mut records = Vec::new();
    loop {
        // records run to EOF; probe with the id length prefix
        let mut len = [0u8; 2];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id)?;
        let trajectory_id = String::from_utf8(id)
            .map_err(|e| Error::validation(format!("bad UTF-8 in container: {e}")))?;
        r.read_exact(&mut u4)?;
        let segment_index = u32::from_le_bytes(u4);
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| {
                Error::validation(format!(
                    "container truncated in segment {trajectory_id}/{segment_index}"
                ))
            })?;
            *slot = f64::from_le_bytes(buf);
        }
        records.push(SegmentRecord {
            trajectory_id,
            segment_index,
            map: AggregateFeatureMap {
                features: features.clone(),
                rows,
                cols,
                data,
            },
        });
    }
    Ok((
        ContainerHeader {
            features,
            rows,
            cols,
        },
        records,
    ))
}
