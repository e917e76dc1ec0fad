//! Synthetic telemetry with controllable per-driver style.
//!
//! Styles enter through the speed, acceleration, and engine-speed dynamics;
//! routes are independent random walks from random starting points, so
//! spatial overlap between trajectories is negligible by construction and a
//! classifier cannot win by memorizing geography.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, stream_rng};
use crate::similarity::EARTH_RADIUS_M;
use crate::telemetry::{DataPoint, PreprocessConfig, Trajectory};

/// Per-driver driving style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    /// Preferred cruising speed, m/s.
    pub cruise_speed_mean: f64,
    /// Spread of successive cruise targets, m/s.
    pub cruise_speed_std: f64,
    /// Scales acceleration and braking magnitudes.
    pub accel_aggressiveness: f64,
    /// Piecewise-linear (speed m/s, rpm) gear profile, monotone in both.
    pub rpm_curve: Vec<(f64, f64)>,
    /// Full stops per minute of driving.
    pub stop_frequency: f64,
    /// Magnitude of the heading drift, degrees per second.
    pub heading_drift_rate: f64,
    /// Low-pass coefficient on acceleration in (0, 1); higher is smoother.
    pub smoothness: f64,
}

impl StyleProfile {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("cruise_speed_mean", self.cruise_speed_mean),
            ("cruise_speed_std", self.cruise_speed_std),
            ("accel_aggressiveness", self.accel_aggressiveness),
            ("stop_frequency", self.stop_frequency),
            ("heading_drift_rate", self.heading_drift_rate),
            ("smoothness", self.smoothness),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.smoothness >= 1.0 {
            return Err(Error::validation("smoothness must be below 1"));
        }
        if self.rpm_curve.len() < 2 {
            return Err(Error::validation("rpm curve needs at least two points"));
        }
        for w in self.rpm_curve.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return Err(Error::validation(
                    "rpm curve must be monotone non-decreasing in speed",
                ));
            }
        }
        Ok(())
    }

    fn rpm_at(&self, speed: f64) -> f64 {
        let curve = &self.rpm_curve;
        if speed <= curve[0].0 {
            return curve[0].1;
        }
        for w in curve.windows(2) {
            if speed <= w[1].0 {
                let frac = (speed - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + frac * (w[1].1 - w[0].1);
            }
        }
        curve.last().unwrap().1
    }
}

/// Dataset-level generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_drivers: usize,
    pub n_trajectories: usize,
    /// Trajectory duration range in seconds, inclusive.
    pub duration_range: (i64, i64),
    /// Style spread in [0, 1]: 0 makes every driver identical.
    pub separation: f64,
    pub seed: u64,
    /// Epoch base for the first timestamp of each trajectory.
    pub start_time: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_drivers: 10,
            n_trajectories: 40,
            duration_range: (900, 1500),
            separation: 1.0,
            seed: 0,
            start_time: 1_700_000_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_drivers == 0 || self.n_trajectories == 0 {
            return Err(Error::validation("driver and trajectory counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::validation("separation must lie in [0, 1]"));
        }
        let (lo, hi) = self.duration_range;
        if lo > hi {
            return Err(Error::validation("duration range is inverted"));
        }
        // every generated trajectory must survive the default preprocess
        let pp = PreprocessConfig::default();
        let post_lo = lo - 2 * pp.trim_seconds;
        let post_hi = hi - 2 * pp.trim_seconds;
        if post_lo < pp.min_duration || post_hi > pp.max_duration {
            return Err(Error::validation(format!(
                "duration range {lo}..{hi} s does not survive default preprocessing \
                 (trimmed duration must stay within {}..{} s)",
                pp.min_duration, pp.max_duration
            )));
        }
        Ok(())
    }
}

/// Approximate standard normal draw (Box-Muller).
fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw a style whose distance from the shared baseline scales with
/// `separation`: at 0 every seed yields the identical baseline profile.
pub fn generate_profile(seed: u64, separation: f64) -> StyleProfile {
    let mut rng = stream_rng(seed, "profile");
    let mut u = |spread: f64| separation * spread * rng.gen_range(-1.0f64..1.0);

    let cruise_speed_mean = 22.0 + u(10.0);
    let cruise_speed_std = 1.5 + u(1.0);
    let accel_aggressiveness = 1.0 + u(0.7);
    let idle = 750.0 + u(150.0);
    let slope = 95.0 + u(55.0);
    let stop_frequency = 0.6 + u(0.5);
    let heading_drift_rate = 1.5 + u(1.4);
    let smoothness = 0.55 + u(0.35);

    // gear-like profile: steeper at low speed, flattening at highway speed
    let gear_mults = [1.6, 1.2, 0.9, 0.7];
    let speeds = [0.0, 8.0, 16.0, 25.0, 40.0];
    let mut rpm_curve = Vec::with_capacity(speeds.len());
    let mut rpm = idle;
    rpm_curve.push((speeds[0], rpm));
    for (k, w) in speeds.windows(2).enumerate() {
        rpm += slope * gear_mults[k] * (w[1] - w[0]);
        rpm_curve.push((w[1], rpm));
    }

    StyleProfile {
        cruise_speed_mean,
        cruise_speed_std,
        accel_aggressiveness,
        rpm_curve,
        stop_frequency,
        heading_drift_rate,
        smoothness,
    }
}

enum Regime {
    Drive,
    Braking,
    Stopped { remaining: i64 },
}

/// Simulate one 1 Hz trip of `duration` seconds (duration + 1 points).
///
/// Speed integrates a smoothed, style-scaled acceleration toward a cruise
/// target that is redrawn periodically and interrupted by full stops;
/// position integrates speed along a drifting heading; the recorded `accel`
/// field is the realized speed delta so the kinematic identity holds
/// exactly; rpm follows the gear profile of the current speed.
pub fn generate_trajectory(
    profile: &StyleProfile,
    driver_id: &str,
    trajectory_id: &str,
    duration: i64,
    seed: u64,
    start_time: i64,
) -> Result<Trajectory> {
    profile.validate()?;
    if duration < 1 {
        return Err(Error::validation("duration must be at least one second"));
    }
    let n = duration as usize + 1;
    let mut rng = stream_rng(seed, "trajectory");

    let mut lat = rng.gen_range(39.5f64..40.5);
    let mut lng = rng.gen_range(-83.5f64..-82.5);
    let mut heading = rng.gen_range(0.0f64..360.0);
    let mut drift_dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };

    let draw_target = |rng: &mut ChaCha8Rng| {
        normal(rng, profile.cruise_speed_mean, profile.cruise_speed_std).max(3.0)
    };
    let mut target = draw_target(&mut rng);
    let mut regime = Regime::Drive;
    let mut speed = target;
    let mut accel_state = 0.0f64;

    let mut speeds = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    let agg = profile.accel_aggressiveness;
    let alpha = profile.smoothness;

    for i in 0..n {
        speeds.push(speed);

        // regime transitions
        match regime {
            Regime::Drive => {
                if rng.gen::<f64>() < profile.stop_frequency / 60.0 {
                    regime = Regime::Braking;
                } else if rng.gen::<f64>() < 1.0 / 45.0 {
                    target = draw_target(&mut rng);
                }
            }
            Regime::Braking => {
                if speed < 0.3 {
                    regime = Regime::Stopped {
                        remaining: rng.gen_range(5..=20),
                    };
                }
            }
            Regime::Stopped { remaining } => {
                if remaining <= 1 {
                    target = draw_target(&mut rng);
                    regime = Regime::Drive;
                } else {
                    regime = Regime::Stopped {
                        remaining: remaining - 1,
                    };
                }
            }
        }
        let desired = match regime {
            Regime::Drive => target,
            Regime::Braking | Regime::Stopped { .. } => 0.0,
        };

        let raw = (0.35 * (desired - speed)).clamp(-3.5 * agg, 2.5 * agg)
            + normal(&mut rng, 0.0, 0.25 * agg);
        accel_state = alpha * accel_state + (1.0 - alpha) * raw;
        let mut next = (speed + accel_state).max(0.0);
        if matches!(regime, Regime::Stopped { .. }) {
            next = 0.0;
        }

        // heading random walk with style drift
        let prev_heading = heading;
        if rng.gen::<f64>() < 0.02 {
            drift_dir = -drift_dir;
        }
        let turning = speed > 0.5;
        if turning {
            heading += drift_dir * profile.heading_drift_rate + normal(&mut rng, 0.0, 0.8);
        }
        let yaw_rate = (heading - prev_heading).to_radians();

        let rpm = (profile.rpm_at(speed) * (1.0 + normal(&mut rng, 0.0, 0.01)))
            .clamp(600.0, 6500.0);
        let head_field = {
            let wrapped = ((heading % 360.0) + 360.0) % 360.0;
            (wrapped.round() as i64).rem_euclid(360) as f64
        };
        points.push(DataPoint {
            t: start_time + i as i64,
            speed: Some(speed),
            accel: Some(0.0), // realized delta patched in below
            rpm: Some(rpm),
            lat: Some(lat),
            lng: Some(lng),
            head: Some(head_field),
            acl_x: Some(accel_state + normal(&mut rng, 0.0, 0.05)),
            acl_y: Some(speed * yaw_rate + normal(&mut rng, 0.0, 0.05)),
            acl_z: Some(9.81 + normal(&mut rng, 0.0, 0.05)),
        });

        // advance position along the pre-turn heading with this second's speed
        let theta = prev_heading.to_radians();
        lat += (speed * theta.cos() / EARTH_RADIUS_M).to_degrees();
        lng += (speed * theta.sin() / (EARTH_RADIUS_M * lat.to_radians().cos())).to_degrees();
        speed = next;
    }
    speeds.push(speed);
    for (i, p) in points.iter_mut().enumerate() {
        p.accel = Some(if i + 1 < n { speeds[i + 1] - speeds[i] } else { 0.0 });
    }
    Trajectory::new(driver_id, trajectory_id, points)
}

/// Generate the labeled dataset: one style per driver, independent random
/// routes per trajectory, everything derived from the root seed.
pub fn generate_dataset(
    cfg: &SynthConfig,
) -> Result<(Vec<Trajectory>, BTreeMap<String, StyleProfile>)> {
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(cfg.n_drivers * cfg.n_trajectories);
    let mut profiles = BTreeMap::new();
    for d in 0..cfg.n_drivers {
        let driver_id = format!("d{d:02}");
        let profile = generate_profile(
            derive_seed(cfg.seed, &format!("profile.{driver_id}")),
            cfg.separation,
        );
        for t in 0..cfg.n_trajectories {
            let trajectory_id = format!("{driver_id}_t{t:03}");
            let mut rng = stream_rng(cfg.seed, &format!("duration.{trajectory_id}"));
            let duration = rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
            trajectories.push(generate_trajectory(
                &profile,
                &driver_id,
                &trajectory_id,
                duration,
                derive_seed(cfg.seed, &format!("traj.{trajectory_id}")),
                cfg.start_time,
            )?);
        }
        profiles.insert(driver_id, profile);
    }
    Ok((trajectories, profiles))
}
