//! Dead reckoning with a scalar Kalman filter on heading.
//!
//! The filter predicts heading from the bicycle-model yaw rate derived from
//! the CAN steering angle and velocity, corrects it with the IMU heading, and
//! integrates velocity along the fused heading in the planar NED frame
//! (x north, y east, heading clockwise from north).

use std::f64::consts::FRAC_PI_2;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};

/// Smallest heading variance the filter will hold (rad²).
pub const MIN_HEADING_VARIANCE: f64 = 1e-12;

/// One reading of the CAN bus and IMU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    /// Seconds.
    pub timestamp: f64,
    /// m/s, from CAN.
    pub velocity: f64,
    /// Front-wheel steering angle (rad), from CAN.
    pub steering_angle: f64,
    /// IMU heading (rad), clockwise from north.
    pub compass_heading: f64,
    /// IMU yaw rate (rad/s).
    pub gyro_rate: f64,
}

/// Source of the yaw rate used in the prediction step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawRateSource {
    Steering,
    Gyro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryParams {
    /// Wheelbase of the bicycle model (m).
    pub wheelbase: f64,
    /// Heading process noise spectral density (rad²/s).
    pub process_noise: f64,
    /// Variance of the IMU heading measurement (rad²).
    pub measurement_noise: f64,
    pub yaw_source: YawRateSource,
    /// Apply the IMU heading correction.
    pub use_compass: bool,
    /// Heading variance of the initial state (rad²).
    pub initial_variance: f64,
    /// Odometry-edge translational noise (m per √m travelled).
    pub sigma_xy: f64,
    /// Odometry-edge heading noise (rad).
    pub sigma_theta: f64,
    /// Floor added to each diagonal entry of an odometry covariance.
    pub min_variance: f64,
}

impl Default for OdometryParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            process_noise: 0.5f64.to_radians().powi(2),
            measurement_noise: 2.0f64.to_radians().powi(2),
            yaw_source: YawRateSource::Steering,
            use_compass: true,
            initial_variance: 1e-6,
            sigma_xy: 0.02,
            sigma_theta: 0.3f64.to_radians(),
            min_variance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdoState {
    /// Dead-reckoned pose; `pose.theta` is the fused heading estimate.
    pub pose: Pose2,
    pub heading_variance: f64,
    pub last_timestamp: f64,
    /// Odometer reading (m).
    pub distance: f64,
}

impl OdoState {
    pub fn new(pose: Pose2, timestamp: f64, heading_variance: f64) -> Self {
        Self {
            pose,
            heading_variance: heading_variance.max(MIN_HEADING_VARIANCE),
            last_timestamp: timestamp,
            distance: 0.0,
        }
    }

    pub fn heading_estimate(&self) -> f64 {
        self.pose.theta
    }
}

/// Bicycle-model yaw rate `v·tan(δ)/L`.
pub fn bicycle_yaw_rate(velocity: f64, steering: f64, wheelbase: f64) -> f64 {
    velocity * steering.tan() / wheelbase
}

/// One predict/update/integrate cycle.
pub fn kf_step(
    state: &OdoState,
    sample: &MotionSample,
    params: &OdometryParams,
) -> Result<OdoState> {
    let dt = sample.timestamp - state.last_timestamp;
    if !(dt > 0.0) {
        return Err(Error::NonMonotonicTime {
            previous: state.last_timestamp,
            current: sample.timestamp,
        });
    }
    let yaw_rate = match params.yaw_source {
        YawRateSource::Steering => {
            bicycle_yaw_rate(sample.velocity, sample.steering_angle, params.wheelbase)
        }
        YawRateSource::Gyro => sample.gyro_rate,
    };
    let mut heading = state.pose.theta + yaw_rate * dt;
    let mut variance = state.heading_variance + params.process_noise * dt;

    if params.use_compass {
        let s = variance + params.measurement_noise;
        let gain = if s > 0.0 { variance / s } else { 1.0 };
        heading += gain * wrap_angle(sample.compass_heading - heading);
        variance *= 1.0 - gain;
    }
    let heading = wrap_angle(heading);
    let step = sample.velocity * dt;
    let (s, c) = heading.sin_cos();
    Ok(OdoState {
        pose: Pose2::new(state.pose.x + step * c, state.pose.y + step * s, heading),
        heading_variance: variance.max(MIN_HEADING_VARIANCE),
        last_timestamp: sample.timestamp,
        distance: state.distance + step.abs(),
    })
}

/// Runs the filter over a whole stream, returning the initial state followed
/// by one state per sample.
pub fn run(
    initial: OdoState,
    samples: &[MotionSample],
    params: &OdometryParams,
) -> Result<Vec<OdoState>> {
    let mut out = Vec::with_capacity(samples.len() + 1);
    out.push(initial);
    let mut s = initial;
    for m in samples {
        s = kf_step(&s, m, params)?;
        out.push(s);
    }
    Ok(out)
}

/// Odometry constraint from `a` to `b`: the relative pose in `a`'s frame and
/// a diagonal covariance growing with distance travelled and heading change.
pub fn relative_pose(a: &OdoState, b: &OdoState, params: &OdometryParams) -> (Pose2, Matrix3<f64>) {
    let rel = a.pose.between(&b.pose);
    let d = (b.distance - a.distance).abs();
    let dtheta = wrap_angle(b.pose.theta - a.pose.theta).abs();
    let sxy = params.sigma_xy * params.sigma_xy * d + params.min_variance;
    let sth = params.sigma_theta * params.sigma_theta * (dtheta + d / params.wheelbase)
        + params.min_variance;
    (
        rel,
        Matrix3::from_diagonal(&nalgebra::Vector3::new(sxy, sxy, sth)),
    )
}

/// Closed-form steady-state predicted variance and gain of the scalar filter
/// with constant sample period `dt`.
pub fn stationary_gain(params: &OdometryParams, dt: f64) -> (f64, f64) {
    let qd = params.process_noise * dt;
    let r = params.measurement_noise;
    let p_pred = 0.5 * (qd + (qd * qd + 4.0 * qd * r).sqrt());
    (p_pred, p_pred / (p_pred + r))
}

/// Linear interpolation of the dead-reckoned state at time `t`. `states`
/// must be sorted by timestamp; times outside the range clamp to the ends.
pub fn state_at(states: &[OdoState], t: f64) -> Option<OdoState> {
    let first = states.first()?;
    let last = states.last()?;
    if t <= first.last_timestamp {
        return Some(*first);
    }
    if t >= last.last_timestamp {
        return Some(*last);
    }
    let i = states.partition_point(|s| s.last_timestamp <= t);
    let (a, b) = (&states[i - 1], &states[i]);
    let span = b.last_timestamp - a.last_timestamp;
    let w = if span > 0.0 {
        (t - a.last_timestamp) / span
    } else {
        0.0
    };
    let dth = wrap_angle(b.pose.theta - a.pose.theta);
    Some(OdoState {
        pose: Pose2::new(
            a.pose.x + w * (b.pose.x - a.pose.x),
            a.pose.y + w * (b.pose.y - a.pose.y),
            a.pose.theta + w * dth,
        ),
        heading_variance: a.heading_variance + w * (b.heading_variance - a.heading_variance),
        last_timestamp: t,
        distance: a.distance + w * (b.distance - a.distance),
    })
}

/// Converts a planar NED pose to the conventional ENU plotting frame
/// (x east, y north, heading counter-clockwise from east).
pub fn ned_to_enu(p: &Pose2) -> Pose2 {
    Pose2::new(p.y, p.x, FRAC_PI_2 - p.theta)
}
