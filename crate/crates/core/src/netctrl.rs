//! Networked controller: delay-compensating prediction, control matrices
//! and the robot-side buffer.
//!
//! Each cycle the controller sends `M + 1` future inputs. The robot applies
//! column `omega` of the most recent matrix it received, where `omega - 1` is
//! the number of cycles lost since.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{tracking_law, ReferenceTrajectory};
use crate::model::{integrate, BacklashState, InputVector, LinearModel, Matrix2x6, RobotParams, StateVector};

/// Matrices kept by the controller to resolve the robot's omega echo.
pub const HISTORY_LEN: usize = 256;

/// `M + 1` inputs computed at cycle `origin`; column `i` is meant for
/// actuation `i` cycles after the origin's own actuation instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMatrix {
    pub origin: u64,
    pub columns: Vec<InputVector>,
}

impl ControlMatrix {
    pub fn zeros(origin: u64, horizon: usize) -> Self {
        Self { origin, columns: vec![InputVector::zeros(); horizon + 1] }
    }

    /// `M`, i.e. number of columns minus one.
    pub fn horizon(&self) -> usize {
        self.columns.len() - 1
    }

    /// Zero-based column access.
    pub fn column(&self, i: usize) -> InputVector {
        self.columns[i]
    }

    pub fn max_abs_diff(&self, other: &ControlMatrix) -> f64 {
        self.columns
            .iter()
            .zip(&other.columns)
            .map(|(a, b)| (a.0 - b.0).abs().max())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    #[default]
    Linear,
    Nonlinear,
}

/// When the first column takes effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actuation {
    /// One full period after the measurement: the first column is computed
    /// from a one-step prediction seeded with the currently applied input.
    Dilated,
    /// As soon as the packet arrives: the first column uses the measurement
    /// directly.
    Immediate,
}

/// Pure model propagation of `x` over `ts` with `u` held. No backlash.
pub fn predict_nonlinear(x: &StateVector, u: &InputVector, ts: f64, n_sub: usize, params: &RobotParams) -> Result<StateVector> {
    integrate(x, u, ts, n_sub, params)
}

fn check_refs(refs: &[StateVector], m: usize) {
    assert_eq!(refs.len(), m + 1, "need one reference per column");
}

/// Matrix from the linear recursion
/// `x(k+i) = Ad x(k+i-1) + Bd f_bl(u(k+i-1))`, `u(k+i) = sat(-K (x(k+i) - ref_i))`,
/// seeded with `x(k-1) = x_bar`, `u(k-1) = u_d`. The backlash copy starts
/// disengaged on every call.
#[allow(clippy::too_many_arguments)]
pub fn build_control_matrix_linear(
    origin: u64,
    x_bar: &StateVector,
    u_d: &InputVector,
    gain: &Matrix2x6,
    model: &LinearModel,
    backlash: f64,
    refs: &[StateVector],
    v_max: f64,
    actuation: Actuation,
) -> Result<ControlMatrix> {
    let m = refs.len().checked_sub(1).ok_or(Error::InvalidParameter { name: "horizon", reason: "no columns requested".into() })?;
    check_refs(refs, m);
    let mut bl = BacklashState::new(backlash)?;
    let mut x = x_bar.0;
    let mut u_prev = *u_d;
    let mut columns = Vec::with_capacity(m + 1);
    for (i, r) in refs.iter().enumerate() {
        if i > 0 || actuation == Actuation::Dilated {
            x = model.step(&x, &bl.apply(&u_prev).0);
        }
        let u = tracking_law(gain, &StateVector(x), r, v_max);
        columns.push(u);
        u_prev = u;
    }
    Ok(ControlMatrix { origin, columns })
}

/// Same as [`build_control_matrix_linear`] but each prediction step
/// integrates the nonlinear model over one period.
#[allow(clippy::too_many_arguments)]
pub fn build_control_matrix_nonlinear(
    origin: u64,
    x_bar: &StateVector,
    u_d: &InputVector,
    gain: &Matrix2x6,
    params: &RobotParams,
    ts: f64,
    n_sub: usize,
    refs: &[StateVector],
    actuation: Actuation,
) -> Result<ControlMatrix> {
    let m = refs.len().checked_sub(1).ok_or(Error::InvalidParameter { name: "horizon", reason: "no columns requested".into() })?;
    check_refs(refs, m);
    let mut x = *x_bar;
    let mut u_prev = *u_d;
    let mut columns = Vec::with_capacity(m + 1);
    for (i, r) in refs.iter().enumerate() {
        if i > 0 || actuation == Actuation::Dilated {
            x = predict_nonlinear(&x, &u_prev, ts, n_sub, params)?;
        }
        let u = tracking_law(gain, &x, r, params.v_max);
        columns.push(u);
        u_prev = u;
    }
    Ok(ControlMatrix { origin, columns })
}

/// What the robot did with its buffer in one cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferOutput {
    pub input: InputVector,
    /// Periods since the last reception; 0 before any matrix arrived.
    pub omega: u32,
    /// `omega > M + 1`: the last column is held.
    pub degraded: bool,
    /// No matrix was ever received; zero input applied.
    pub cold: bool,
}

/// Robot-side holder of the latest control matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotBuffer {
    horizon: usize,
    matrix: Option<ControlMatrix>,
    omega: u32,
}

impl RobotBuffer {
    pub fn new(horizon: usize) -> Self {
        Self { horizon, matrix: None, omega: 0 }
    }

    pub fn omega(&self) -> u32 {
        self.omega
    }

    pub fn matrix(&self) -> Option<&ControlMatrix> {
        self.matrix.as_ref()
    }

    /// Value echoed to the controller in the next measurement packet.
    pub fn omega_echo(&self) -> u8 {
        self.omega.min(u8::MAX as u32) as u8
    }

    /// `arrival` is `Some` exactly when the cycle's packet was not lost.
    pub fn step(&mut self, arrival: Option<ControlMatrix>) -> BufferOutput {
        match arrival {
            Some(m) => {
                self.matrix = Some(m);
                self.omega = 1;
            }
            None if self.matrix.is_some() => self.omega = self.omega.saturating_add(1),
            None => {}
        }
        match &self.matrix {
            None => BufferOutput { input: InputVector::zeros(), omega: 0, degraded: false, cold: true },
            Some(m) => {
                let last = m.horizon().min(self.horizon);
                let idx = (self.omega as usize - 1).min(last);
                BufferOutput { input: m.column(idx), omega: self.omega, degraded: self.omega as usize > last + 1, cold: false }
            }
        }
    }
}

/// Value-style wrapper around [`RobotBuffer::step`].
pub fn robot_step(buffer: &RobotBuffer, arrival: Option<ControlMatrix>) -> (BufferOutput, RobotBuffer) {
    let mut next = buffer.clone();
    let out = next.step(arrival);
    (out, next)
}

/// Controller-side settings shared by every matrix build.
#[derive(Debug, Clone)]
pub struct ControllerSetup {
    pub gain: Matrix2x6,
    pub model: LinearModel,
    pub params: RobotParams,
    pub backlash: f64,
    pub horizon: usize,
    pub n_sub: usize,
    pub predictor: Predictor,
    pub actuation: Actuation,
}

/// Remote controller. Keeps recently sent matrices so the robot's omega
/// echo tells it which input the robot is applying.
#[derive(Debug, Clone)]
pub struct NetworkedController {
    setup: ControllerSetup,
    reference: ReferenceTrajectory,
    history: VecDeque<ControlMatrix>,
}

impl NetworkedController {
    pub fn new(setup: ControllerSetup, reference: ReferenceTrajectory) -> Self {
        Self { setup, reference, history: VecDeque::with_capacity(HISTORY_LEN) }
    }

    pub fn setup(&self) -> &ControllerSetup {
        &self.setup
    }

    /// Input the robot applies during cycle `k`, given `omega(k-1)`.
    /// Echo 0 means no matrix had arrived yet.
    pub fn applied_input(&self, k: u64, omega_echo: u8) -> InputVector {
        if omega_echo == 0 || k < omega_echo as u64 {
            return InputVector::zeros();
        }
        let origin = k - omega_echo as u64;
        match self.history.iter().rev().find(|m| m.origin == origin) {
            Some(m) => m.column((omega_echo as usize - 1).min(m.horizon())),
            None => InputVector::zeros(),
        }
    }

    /// Builds, records and returns the matrix for cycle `k`. `ref_k` is the
    /// reference index of the measurement instant.
    pub fn on_measurement(&mut self, k: u64, ref_k: usize, x_bar: &StateVector, omega_echo: u8) -> Result<ControlMatrix> {
        let s = &self.setup;
        let u_d = self.applied_input(k, omega_echo);
        let shift = usize::from(s.actuation == Actuation::Dilated);
        let refs: Vec<StateVector> = (0..=s.horizon).map(|i| self.reference.at(ref_k + i + shift)).collect();
        let matrix = match s.predictor {
            Predictor::Linear => {
                build_control_matrix_linear(k, x_bar, &u_d, &s.gain, &s.model, s.backlash, &refs, s.params.v_max, s.actuation)?
            }
            Predictor::Nonlinear => {
                build_control_matrix_nonlinear(k, x_bar, &u_d, &s.gain, &s.params, s.model.ts, s.n_sub, &refs, s.actuation)?
            }
        };
        self.record(matrix.clone());
        Ok(matrix)
    }

    /// Zero matrix for a cycle in which the loop is still open.
    pub fn idle(&mut self, k: u64) -> ControlMatrix {
        let matrix = ControlMatrix::zeros(k, self.setup.horizon);
        self.record(matrix.clone());
        matrix
    }

    fn record(&mut self, matrix: ControlMatrix) {
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(matrix);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{lqr_gain, LqrWeights};
    use crate::model::linearize;
    use nalgebra::{Matrix6, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TS: f64 = 0.035;

    struct Fixture {
        params: RobotParams,
        model: LinearModel,
        gain: Matrix2x6,
    }

    fn fixture() -> Fixture {
        let params = RobotParams::default();
        let model = LinearModel::from_params(&params, TS).unwrap();
        let gain = lqr_gain(&model.ad, &model.bd, &LqrWeights::default()).unwrap().k;
        Fixture { params, model, gain }
    }

    fn zero_refs(m: usize) -> Vec<StateVector> {
        vec![StateVector::zeros(); m + 1]
    }

    fn linear(f: &Fixture, x: &StateVector, u_d: &InputVector, m: usize, backlash: f64) -> ControlMatrix {
        build_control_matrix_linear(0, x, u_d, &f.gain, &f.model, backlash, &zero_refs(m), 1e9, Actuation::Dilated).unwrap()
    }

    fn nonlinear(f: &Fixture, x: &StateVector, u_d: &InputVector, m: usize) -> ControlMatrix {
        let mut p = f.params.clone();
        p.v_max = 1e9;
        build_control_matrix_nonlinear(0, x, u_d, &f.gain, &p, TS, 8, &zero_refs(m), Actuation::Dilated).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, scale: f64) -> StateVector {
        StateVector(Vector6::from_fn(|_, _| rng.gen_range(-scale..scale)))
    }

    #[test]
    fn zero_is_absorbing() {
        let f = fixture();
        let z = StateVector::zeros();
        let u = InputVector::zeros();
        assert!(linear(&f, &z, &u, 3, 0.02).columns.iter().all(|c| c.0 == nalgebra::Vector2::zeros()));
        assert!(nonlinear(&f, &z, &u, 3).columns.iter().all(|c| c.0 == nalgebra::Vector2::zeros()));
        assert_eq!(predict_nonlinear(&z, &u, TS, 8, &f.params).unwrap(), z);
    }

    #[test]
    fn horizon_zero_is_one_step() {
        let f = fixture();
        let x = StateVector::new(0.1, 0.02, -0.3, 0.1, 0.05, 0.0);
        let u_d = InputVector::new(0.4, -0.2);
        let m = linear(&f, &x, &u_d, 0, 0.0);
        assert_eq!(m.columns.len(), 1);
        let expected = -f.gain * (f.model.ad * x.0 + f.model.bd * u_d.0);
        assert!((m.column(0).0 - expected).abs().max() < 1e-12);
    }

    #[test]
    fn linear_matches_hand_rolled_recursion() {
        let f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_state(&mut rng, 0.1);
            let u_d = InputVector::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let got = linear(&f, &x, &u_d, 3, 0.0);

            let mut xs = x.0;
            let mut u = u_d.0;
            for i in 0..4 {
                let mut next = Vector6::zeros();
                for r in 0..6 {
                    next[r] = (0..6).map(|c| f.model.ad[(r, c)] * xs[c]).sum::<f64>() + (0..2).map(|c| f.model.bd[(r, c)] * u[c]).sum::<f64>();
                }
                xs = next;
                let mut un = nalgebra::Vector2::zeros();
                for r in 0..2 {
                    un[r] = -(0..6).map(|c| f.gain[(r, c)] * xs[c]).sum::<f64>();
                }
                u = un;
                assert!((got.column(i).0 - u).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn nonlinear_prediction_matches_plant_integrator() {
        let f = fixture();
        let x = StateVector::new(0.0, 0.1, 0.5, -0.2, 0.0, 0.3);
        let u = InputVector::new(1.0, 0.5);
        let pred = predict_nonlinear(&x, &u, TS, 8, &f.params).unwrap();
        let mut bl = BacklashState::disabled();
        let plant = crate::model::integrate_plant(&x, &u, TS, 8, &f.params, &mut bl).unwrap();
        assert!((pred.0 - plant.0).abs().max() < 1e-10);
        // One Euler step has O(dt^2) local error: halving dt quarters the gap.
        let gap = |dt: f64| {
            let euler = x.0 + dt * crate::model::dynamics(&x, &u, &f.params).unwrap();
            (euler - predict_nonlinear(&x, &u, dt, 8, &f.params).unwrap().0).abs().max()
        };
        let ratio = gap(TS / 4.0) / gap(TS / 8.0);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    fn rk4_linear(a: &Matrix6<f64>, b: &crate::model::Matrix6x2, x: &Vector6<f64>, u: &nalgebra::Vector2<f64>) -> Vector6<f64> {
        let h = TS / 8.0;
        let f = |x: &Vector6<f64>| a * x + b * u;
        let mut s = *x;
        for _ in 0..8 {
            let k1 = f(&s);
            let k2 = f(&(s + k1 * (h / 2.0)));
            let k3 = f(&(s + k2 * (h / 2.0)));
            let k4 = f(&(s + k3 * h));
            s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        s
    }

    #[test]
    fn linearization_is_valid_near_origin() {
        // Against the same integrator applied to the linearized dynamics, the
        // nonlinear matrix differs only at second order in the state.
        let f = fixture();
        let (a, b) = linearize(&f.params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = random_state(&mut rng, 1e-4);
            let u_d = InputVector::zeros();
            let nl = nonlinear(&f, &x, &u_d, 3);
            let mut xs = x.0;
            let mut u = u_d.0;
            for i in 0..4 {
                xs = rk4_linear(&a, &b, &xs, &u);
                u = -f.gain * xs;
                assert!((nl.column(i).0 - u).abs().max() < 1e-6);
            }
        }
    }

    #[test]
    fn euler_predictor_gap_is_first_order_in_state() {
        let f = fixture();
        let x = StateVector::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let gap = |s: f64| {
            let xs = StateVector(x.0 * s);
            linear(&f, &xs, &InputVector::zeros(), 3, 0.0).max_abs_diff(&nonlinear(&f, &xs, &InputVector::zeros(), 3))
        };
        let (g1, g2) = (gap(1e-4), gap(2e-4));
        assert!((g2 / g1 - 2.0).abs() < 1e-3, "ratio {}", g2 / g1);
    }

    #[test]
    fn large_pitch_separates_predictors() {
        let f = fixture();
        let x = StateVector::new(0.0, 0.3, 0.0, 0.0, 0.0, 0.0);
        let gap = linear(&f, &x, &InputVector::zeros(), 3, 0.0).max_abs_diff(&nonlinear(&f, &x, &InputVector::zeros(), 3));
        assert!(gap > 1e-3, "gap {gap}");
    }

    #[test]
    fn immediate_first_column_uses_measurement() {
        let f = fixture();
        let x = StateVector::new(0.0, 0.05, 0.0, 0.0, 0.0, 0.0);
        let m = build_control_matrix_linear(0, &x, &InputVector::new(3.0, 3.0), &f.gain, &f.model, 0.0, &zero_refs(2), 1e9, Actuation::Immediate).unwrap();
        assert!((m.column(0).0 + f.gain * x.0).abs().max() < 1e-15);
    }

    fn cm(origin: u64, vals: &[f64]) -> ControlMatrix {
        ControlMatrix { origin, columns: vals.iter().map(|v| InputVector::new(*v, -*v)).collect() }
    }

    #[test]
    fn buffer_selects_columns() {
        let mut buf = RobotBuffer::new(3);
        let out = buf.step(Some(cm(0, &[1.0, 2.0, 3.0, 4.0])));
        assert_eq!((out.omega, out.input.left()), (1, 1.0));
        let out = buf.step(None);
        assert_eq!((out.omega, out.input.left()), (2, 2.0));
        buf.step(None);
        let out = buf.step(None);
        assert_eq!((out.omega, out.input.left(), out.degraded), (4, 4.0, false));
        let out = buf.step(None);
        assert_eq!((out.omega, out.input.left(), out.degraded), (5, 4.0, true));
        let out = buf.step(Some(cm(5, &[9.0, 8.0, 7.0, 6.0])));
        assert_eq!((out.omega, out.input.left(), out.degraded), (1, 9.0, false));
    }

    #[test]
    fn cold_start_applies_zero() {
        let (out, buf) = robot_step(&RobotBuffer::new(3), None);
        assert!(out.cold);
        assert_eq!(out.input, InputVector::zeros());
        assert_eq!(buf.omega_echo(), 0);
    }

    #[test]
    fn echo_resolves_applied_input() {
        let f = fixture();
        let setup = ControllerSetup {
            gain: f.gain,
            model: f.model.clone(),
            params: f.params.clone(),
            backlash: 0.0,
            horizon: 3,
            n_sub: 8,
            predictor: Predictor::Linear,
            actuation: Actuation::Dilated,
        };
        let mut ctrl = NetworkedController::new(setup, ReferenceTrajectory::zero(TS));
        let mut buf = RobotBuffer::new(3);
        let mut x = StateVector::new(0.0, 0.05, 0.0, 0.0, 0.0, 0.0);
        let mut applied = InputVector::zeros();
        for k in 0..30u64 {
            assert_eq!(ctrl.applied_input(k, buf.omega_echo()), applied);
            let m = ctrl.on_measurement(k, k as usize, &x, buf.omega_echo()).unwrap();
            let lost = (10..13).contains(&k);
            let out = buf.step((!lost).then_some(m));
            x = StateVector(f.model.step(&x.0, &applied.0));
            applied = out.input;
        }
    }
}
