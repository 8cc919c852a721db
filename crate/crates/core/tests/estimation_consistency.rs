//! Reconstruction error on a smooth, noise-free trajectory is first order in Ts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twipr_core::estimation::{simulate_sensors, EstimatorState, GyroBias, NoiseConfig};
use twipr_core::{RobotParams, StateVector};

fn truth(t: f64) -> StateVector {
    let (theta, theta_dot) = (0.1 * (2.0 * t).sin(), 0.2 * (2.0 * t).cos());
    let (phi, phi_dot) = (t + 0.5 * t.sin(), 1.0 + 0.5 * t.cos());
    let (gamma, gamma_dot) = (0.3 * (1.5 * t).sin(), 0.45 * (1.5 * t).cos());
    StateVector::new(phi, theta, phi_dot, theta_dot, gamma, gamma_dot)
}

/// Largest per-channel error over [0, 2 s].
fn max_errors(ts: f64) -> [f64; 6] {
    let p = RobotParams::default();
    let noise = NoiseConfig::noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut est = EstimatorState::new(truth(0.0).theta());
    // The estimator starts from zero wheel and yaw angles.
    let offset = |x: StateVector| {
        let x0 = truth(0.0);
        StateVector::new(x.phi() - x0.phi(), x.theta(), x.phi_dot(), x.theta_dot(), x.gamma() - x0.gamma(), x.gamma_dot())
    };
    let mut worst = [0.0f64; 6];
    let n = (2.0 / ts).round() as u64;
    for k in 1..=n {
        let x = offset(truth(k as f64 * ts));
        let frame = simulate_sensors(k, &x, &p, &noise, &mut rng);
        let xm = est.update(&frame, GyroBias(0.0), ts, p.wheel_radius, p.track_width).unwrap();
        for i in 0..6 {
            worst[i] = worst[i].max((xm.0[i] - x.0[i]).abs());
        }
    }
    worst
}

#[test]
fn error_halves_with_the_period() {
    let coarse = max_errors(0.035);
    let fine = max_errors(0.0175);
    // Pitch rate and yaw are read directly; only integrated and
    // differenced channels carry a truncation error.
    for i in [3, 4] {
        assert!(coarse[i] < 1e-12 && fine[i] < 1e-12, "channel {i} should be exact");
    }
    for i in [0, 1, 2, 5] {
        let ratio = coarse[i] / fine[i];
        assert!((1.7..2.3).contains(&ratio), "channel {i}: {} vs {} (ratio {ratio})", coarse[i], fine[i]);
    }
}
