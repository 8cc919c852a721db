//! Sensor simulation and state reconstruction from one pitch-rate gyro and two
//! motor encoders.
//!
//! The encoders sit between body and wheel, so each reads the wheel angle
//! minus the body pitch. Reconstruction integrates the bias-corrected gyro for
//! pitch, adds pitch back onto the mean encoder angle for the wheel angle, and
//! takes backward differences for the remaining rates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RobotParams, StateVector};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensorFrame {
    pub k: u64,
    /// Gyro pitch rate [rad/s].
    pub theta_dot_meas: f64,
    /// Left motor encoder [rad].
    pub phi_ml_meas: f64,
    /// Right motor encoder [rad].
    pub phi_mr_meas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Standard deviation of the additive gyro noise [rad/s].
    pub gyro_std: f64,
    /// True (unknown to the controller) gyro bias [rad/s].
    pub gyro_bias: f64,
    /// Encoder resolution [rad]; 0 disables quantisation.
    pub encoder_resolution: f64,
    /// Number of quasi-static frames used for bias calibration.
    pub n_bias: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_std: 0.005,
            gyro_bias: 0.02,
            encoder_resolution: std::f64::consts::TAU / 360.0,
            n_bias: 100,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self { gyro_std: 0.0, gyro_bias: 0.0, encoder_resolution: 0.0, n_bias: 100 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gyro_std.is_finite() && self.gyro_std >= 0.0) {
            return Err(Error::InvalidParameter { name: "gyro_std", reason: "must be >= 0".into() });
        }
        if !self.gyro_bias.is_finite() {
            return Err(Error::InvalidParameter { name: "gyro_bias", reason: "must be finite".into() });
        }
        if !(self.encoder_resolution.is_finite() && self.encoder_resolution >= 0.0) {
            return Err(Error::InvalidParameter { name: "encoder_resolution", reason: "must be >= 0".into() });
        }
        if self.n_bias == 0 {
            return Err(Error::InvalidParameter { name: "n_bias", reason: "must be >= 1".into() });
        }
        Ok(())
    }
}

fn quantize(angle: f64, resolution: f64) -> f64 {
    if resolution > 0.0 {
        (angle / resolution).floor() * resolution
    } else {
        angle
    }
}

/// Produces one sensor frame from the true state.
///
/// Exactly one normal draw is taken per call regardless of `gyro_std`, so the
/// random stream stays aligned across noise settings.
pub fn simulate_sensors<R: Rng + ?Sized>(
    k: u64,
    x: &StateVector,
    params: &RobotParams,
    noise: &NoiseConfig,
    rng: &mut R,
) -> SensorFrame {
    let z: f64 = rng.sample(StandardNormal);
    let half_spread = params.track_width / (2.0 * params.wheel_radius) * x.gamma();
    let wheel_left = x.phi() - half_spread;
    let wheel_right = x.phi() + half_spread;
    SensorFrame {
        k,
        theta_dot_meas: x.theta_dot() + noise.gyro_bias + noise.gyro_std * z,
        phi_ml_meas: quantize(wheel_left - x.theta(), noise.encoder_resolution),
        phi_mr_meas: quantize(wheel_right - x.theta(), noise.encoder_resolution),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GyroBias(pub f64);

/// Mean gyro reading over a quasi-static window of at least `min_frames` frames.
pub fn estimate_bias(frames: &[SensorFrame], min_frames: usize) -> Result<GyroBias> {
    if frames.len() < min_frames || frames.is_empty() {
        return Err(Error::CalibrationTooShort { needed: min_frames.max(1), got: frames.len() });
    }
    let sum: f64 = frames.iter().map(|f| f.theta_dot_meas).sum();
    let b = sum / frames.len() as f64;
    if !b.is_finite() {
        return Err(Error::NonFinite("gyro calibration"));
    }
    Ok(GyroBias(b))
}

/// Recursion memory of the reconstruction: previous pitch, wheel and yaw angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub theta: f64,
    pub phi: f64,
    pub gamma: f64,
    pub theta0: f64,
    last_k: u64,
}

impl EstimatorState {
    /// State at cycle 0: pitch at `theta0`, wheel and yaw angles at zero.
    /// The next frame accepted is `k = 1`.
    pub fn new(theta0: f64) -> Self {
        Self { theta: theta0, phi: 0.0, gamma: 0.0, theta0, last_k: 0 }
    }

    pub fn last_k(&self) -> u64 {
        self.last_k
    }

    /// Measured state at cycle 0 given the first gyro reading.
    pub fn initial_estimate(&self, frame0: &SensorFrame, bias: GyroBias) -> StateVector {
        StateVector::new(self.phi, self.theta, 0.0, frame0.theta_dot_meas - bias.0, self.gamma, 0.0)
    }

    pub fn update(&mut self, frame: &SensorFrame, bias: GyroBias, ts: f64, wheel_radius: f64, track_width: f64) -> Result<StateVector> {
        let expected = self.last_k + 1;
        if frame.k != expected {
            return Err(Error::NonConsecutiveFrame { expected, got: frame.k });
        }
        let theta_dot = frame.theta_dot_meas - bias.0;
        let theta = self.theta + ts * theta_dot;
        let phi = (frame.phi_ml_meas + frame.phi_mr_meas) / 2.0 + theta;
        let phi_dot = (phi - self.phi) / ts;
        let gamma = wheel_radius / track_width * (frame.phi_mr_meas - frame.phi_ml_meas);
        let gamma_dot = (gamma - self.gamma) / ts;

        self.theta = theta;
        self.phi = phi;
        self.gamma = gamma;
        self.last_k = frame.k;
        Ok(StateVector::new(phi, theta, phi_dot, theta_dot, gamma, gamma_dot))
    }
}

/// Value-style form of [`EstimatorState::update`].
pub fn reconstruct_state(
    frame: &SensorFrame,
    est: &EstimatorState,
    bias: GyroBias,
    ts: f64,
    wheel_radius: f64,
    track_width: f64,
) -> Result<(StateVector, EstimatorState)> {
    let mut next = *est;
    let x = next.update(frame, bias, ts, wheel_radius, track_width)?;
    Ok((x, next))
}
