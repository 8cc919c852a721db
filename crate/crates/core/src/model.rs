//! Two-wheeled inverted pendulum plant.
//!
//! The body pivots on the wheel axle and both wheels are driven by DC motors
//! whose stators are fixed to the body. State ordering is
//! `[phi, theta, phi_dot, theta_dot, gamma, gamma_dot]`: mean wheel angle,
//! body pitch, their rates, yaw angle and yaw rate. Inputs are the left and
//! right motor voltages.
//!
//! The equations of motion follow from the Lagrangian of the wheel/body/motor
//! assembly with the motor current taken at steady state (no inductance), so
//! each motor contributes a torque `Kt/Rm * (v - Kb * relative speed)` plus
//! viscous friction between body and wheel.

use nalgebra::{Matrix6, SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix6x2 = SMatrix<f64, 6, 2>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Any state entry beyond this magnitude means the simulated robot fell.
pub const OVERFLOW_GUARD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector(pub Vector6<f64>);

impl StateVector {
    pub const PHI: usize = 0;
    pub const THETA: usize = 1;
    pub const PHI_DOT: usize = 2;
    pub const THETA_DOT: usize = 3;
    pub const GAMMA: usize = 4;
    pub const GAMMA_DOT: usize = 5;

    pub fn new(phi: f64, theta: f64, phi_dot: f64, theta_dot: f64, gamma: f64, gamma_dot: f64) -> Self {
        Self(Vector6::new(phi, theta, phi_dot, theta_dot, gamma, gamma_dot))
    }

    pub fn zeros() -> Self {
        Self(Vector6::zeros())
    }

    pub fn phi(&self) -> f64 {
        self.0[Self::PHI]
    }
    pub fn theta(&self) -> f64 {
        self.0[Self::THETA]
    }
    pub fn phi_dot(&self) -> f64 {
        self.0[Self::PHI_DOT]
    }
    pub fn theta_dot(&self) -> f64 {
        self.0[Self::THETA_DOT]
    }
    pub fn gamma(&self) -> f64 {
        self.0[Self::GAMMA]
    }
    pub fn gamma_dot(&self) -> f64 {
        self.0[Self::GAMMA_DOT]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }
}

impl From<Vector6<f64>> for StateVector {
    fn from(v: Vector6<f64>) -> Self {
        Self(v)
    }
}

/// Motor voltages `[u_l, u_r]` in volts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InputVector(pub Vector2<f64>);

impl InputVector {
    pub fn new(left: f64, right: f64) -> Self {
        Self(Vector2::new(left, right))
    }

    pub fn zeros() -> Self {
        Self(Vector2::zeros())
    }

    pub fn left(&self) -> f64 {
        self.0[0]
    }

    pub fn right(&self) -> f64 {
        self.0[1]
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.right(), self.left())
    }

    pub fn saturated(&self, v_max: f64) -> Self {
        Self(self.0.map(|v| v.clamp(-v_max, v_max)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Physical parameters of the robot, SI units throughout.
///
/// Motor constants are referred to the wheel shaft, so `motor_inertia` is the
/// reflected rotor inertia (rotor inertia times gear ratio squared).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    pub gravity: f64,
    pub wheel_radius: f64,
    pub track_width: f64,
    pub wheel_mass: f64,
    pub body_mass: f64,
    /// Distance from the wheel axle to the body centre of mass.
    pub com_height: f64,
    pub body_pitch_inertia: f64,
    pub body_yaw_inertia: f64,
    pub motor_inertia: f64,
    pub torque_constant: f64,
    pub back_emf_constant: f64,
    pub armature_resistance: f64,
    /// Viscous friction between body and motor shaft [N m s/rad].
    pub motor_friction: f64,
    /// Viscous friction between wheel and floor [N m s/rad].
    pub wheel_friction: f64,
    pub v_max: f64,
}

impl Default for RobotParams {
    /// An EV3-sized balancing robot: 56 mm wheels, a brick-and-motors body of
    /// 0.9 kg with its centre of mass 8 cm above the axle, NXT/EV3-class
    /// motor constants.
    fn default() -> Self {
        let body_mass = 0.9;
        let com_height = 0.08;
        let track_width = 0.12;
        let body_depth = 0.05;
        Self {
            gravity: 9.81,
            wheel_radius: 0.028,
            track_width,
            wheel_mass: 0.03,
            body_mass,
            com_height,
            body_pitch_inertia: body_mass * com_height * com_height / 3.0,
            body_yaw_inertia: body_mass * (track_width * track_width + body_depth * body_depth) / 12.0,
            motor_inertia: 2e-3,
            torque_constant: 0.317,
            back_emf_constant: 0.468,
            armature_resistance: 6.69,
            motor_friction: 0.0022,
            wheel_friction: 0.0,
            v_max: 8.0,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        let strictly_positive = [
            ("gravity", self.gravity),
            ("wheel_radius", self.wheel_radius),
            ("track_width", self.track_width),
            ("wheel_mass", self.wheel_mass),
            ("body_mass", self.body_mass),
            ("com_height", self.com_height),
            ("body_pitch_inertia", self.body_pitch_inertia),
            ("body_yaw_inertia", self.body_yaw_inertia),
            ("torque_constant", self.torque_constant),
            ("back_emf_constant", self.back_emf_constant),
            ("armature_resistance", self.armature_resistance),
            ("v_max", self.v_max),
        ];
        for (name, v) in strictly_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter { name, reason: format!("must be > 0, got {v}") });
            }
        }
        let non_negative = [
            ("motor_inertia", self.motor_inertia),
            ("motor_friction", self.motor_friction),
            ("wheel_friction", self.wheel_friction),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter { name, reason: format!("must be >= 0, got {v}") });
            }
        }
        if self.wheel_radius >= self.track_width {
            return Err(Error::InvalidParameter {
                name: "wheel_radius",
                reason: "must be smaller than track_width".into(),
            });
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn wheel_inertia(&self) -> f64 {
        0.5 * self.wheel_mass * self.wheel_radius * self.wheel_radius
    }

    /// Voltage-to-torque gain `Kt / Rm`.
    fn drive_gain(&self) -> f64 {
        self.torque_constant / self.armature_resistance
    }

    /// Total viscous coupling between body and wheel, back-EMF included.
    fn coupling_damping(&self) -> f64 {
        self.torque_constant * self.back_emf_constant / self.armature_resistance + self.motor_friction
    }

    /// Sagittal mass matrix entries `(m11, m12(theta), m22)`.
    fn sagittal_mass(&self, cos_theta: f64) -> (f64, f64, f64) {
        let r = self.wheel_radius;
        let ml = self.body_mass * self.com_height;
        let jm = self.motor_inertia;
        let m11 = (2.0 * self.wheel_mass + self.body_mass) * r * r + 2.0 * self.wheel_inertia() + 2.0 * jm;
        let m12 = ml * r * cos_theta - 2.0 * jm;
        let m22 = ml * self.com_height + self.body_pitch_inertia + 2.0 * jm;
        (m11, m12, m22)
    }

    fn yaw_inertia_at(&self, sin_theta: f64) -> f64 {
        let w = self.track_width;
        let r = self.wheel_radius;
        let ml2 = self.body_mass * self.com_height * self.com_height;
        0.5 * self.wheel_mass * w * w
            + self.body_yaw_inertia
            + w * w / (2.0 * r * r) * (self.wheel_inertia() + self.motor_inertia)
            + ml2 * sin_theta * sin_theta
    }
}

/// Right-hand side of the nonlinear equations of motion, `x_dot = f(x, u)`.
pub fn dynamics(x: &StateVector, u: &InputVector, p: &RobotParams) -> Result<Vector6<f64>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("input"));
    }
    Ok(dynamics_unchecked(&x.0, &u.0, p))
}

pub(crate) fn dynamics_unchecked(x: &Vector6<f64>, u: &Vector2<f64>, p: &RobotParams) -> Vector6<f64> {
    let (phi_dot, theta, theta_dot, gamma_dot) = (x[2], x[1], x[3], x[5]);
    let (s, c) = theta.sin_cos();
    let r = p.wheel_radius;
    let ml = p.body_mass * p.com_height;
    let alpha = p.drive_gain();
    let beta = p.coupling_damping();
    let v_sum = u[0] + u[1];

    let gen_wheel = alpha * v_sum - 2.0 * (beta + p.wheel_friction) * phi_dot
        + 2.0 * beta * theta_dot
        + ml * r * theta_dot * theta_dot * s;
    let gen_pitch = -alpha * v_sum + 2.0 * beta * phi_dot - 2.0 * beta * theta_dot
        + ml * p.gravity * s
        + ml * p.com_height * gamma_dot * gamma_dot * s * c;

    let (m11, m12, m22) = p.sagittal_mass(c);
    let det = m11 * m22 - m12 * m12;
    let phi_ddot = (m22 * gen_wheel - m12 * gen_pitch) / det;
    let theta_ddot = (m11 * gen_pitch - m12 * gen_wheel) / det;

    let w = p.track_width;
    let gen_yaw = w / (2.0 * r) * alpha * (u[1] - u[0])
        - w * w / (2.0 * r * r) * (beta + p.wheel_friction) * gamma_dot
        - 2.0 * ml * p.com_height * theta_dot * gamma_dot * s * c;
    let gamma_ddot = gen_yaw / p.yaw_inertia_at(s);

    Vector6::new(phi_dot, theta_dot, phi_ddot, theta_ddot, gamma_dot, gamma_ddot)
}

/// Continuous- and discrete-time linear model around the upright equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: Matrix6<f64>,
    pub b: Matrix6x2,
    pub ad: Matrix6<f64>,
    pub bd: Matrix6x2,
    pub ts: f64,
}

impl LinearModel {
    pub fn from_params(p: &RobotParams, ts: f64) -> Result<Self> {
        let (a, b) = linearize(p)?;
        discretize(&a, &b, ts)
    }

    pub fn step(&self, x: &Vector6<f64>, u: &Vector2<f64>) -> Vector6<f64> {
        self.ad * x + self.bd * u
    }
}

/// Jacobians of [`dynamics`] at `x = 0, u = 0`, in closed form.
pub fn linearize(p: &RobotParams) -> Result<(Matrix6<f64>, Matrix6x2)> {
    p.validate()?;
    let (m11, m12, m22) = p.sagittal_mass(1.0);
    let det = m11 * m22 - m12 * m12;
    let alpha = p.drive_gain();
    let beta = p.coupling_damping();
    let beta_w = beta + p.wheel_friction;
    let mgl = p.body_mass * p.gravity * p.com_height;

    let mut a = Matrix6::zeros();
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    a[(4, 5)] = 1.0;

    // Generalised-force sensitivities (wheel row, pitch row) per state/input.
    let solve = |g_wheel: f64, g_pitch: f64| ((m22 * g_wheel - m12 * g_pitch) / det, (m11 * g_pitch - m12 * g_wheel) / det);

    let (d_theta_w, d_theta_p) = solve(0.0, mgl);
    a[(2, 1)] = d_theta_w;
    a[(3, 1)] = d_theta_p;
    let (d_phid_w, d_phid_p) = solve(-2.0 * beta_w, 2.0 * beta);
    a[(2, 2)] = d_phid_w;
    a[(3, 2)] = d_phid_p;
    let (d_thd_w, d_thd_p) = solve(2.0 * beta, -2.0 * beta);
    a[(2, 3)] = d_thd_w;
    a[(3, 3)] = d_thd_p;

    let w = p.track_width;
    let r = p.wheel_radius;
    let yaw_inertia = p.yaw_inertia_at(0.0);
    a[(5, 5)] = -w * w / (2.0 * r * r) * beta_w / yaw_inertia;

    let mut b = Matrix6x2::zeros();
    let (d_u_w, d_u_p) = solve(alpha, -alpha);
    let yaw_gain = w / (2.0 * r) * alpha / yaw_inertia;
    for col in 0..2 {
        b[(2, col)] = d_u_w;
        b[(3, col)] = d_u_p;
    }
    b[(5, 0)] = -yaw_gain;
    b[(5, 1)] = yaw_gain;
    Ok((a, b))
}

/// Forward-Euler discretisation: `Ad = I + Ts A`, `Bd = Ts B`.
pub fn discretize(a: &Matrix6<f64>, b: &Matrix6x2, ts: f64) -> Result<LinearModel> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidParameter { name: "ts", reason: format!("sampling period must be > 0, got {ts}") });
    }
    Ok(LinearModel {
        a: *a,
        b: *b,
        ad: Matrix6::identity() + a * ts,
        bd: b * ts,
        ts,
    })
}

/// Input-side backlash between motor shaft and wheel.
///
/// Each channel is a play operator: the driven side stays put while the input
/// moves inside a gap of half-width `half_width` around it, and is dragged
/// along once the input reaches either flank. `offset` is the signed position
/// of the input inside the gap (`input - output`), so `|offset| <= half_width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacklashState {
    pub half_width: f64,
    pub offset: [f64; 2],
    last_input: [f64; 2],
}

impl BacklashState {
    /// Disengaged: input and driven side both at zero, centred in the gap.
    pub fn new(half_width: f64) -> Result<Self> {
        if !(half_width.is_finite() && half_width >= 0.0) {
            return Err(Error::InvalidParameter { name: "backlash", reason: format!("half-width must be >= 0, got {half_width}") });
        }
        Ok(Self { half_width, offset: [0.0; 2], last_input: [0.0; 2] })
    }

    pub fn disabled() -> Self {
        Self { half_width: 0.0, offset: [0.0; 2], last_input: [0.0; 2] }
    }

    /// Returns the effective input and advances the engagement state.
    pub fn apply(&mut self, u: &InputVector) -> InputVector {
        if self.half_width == 0.0 {
            self.last_input = [u.left(), u.right()];
            return *u;
        }
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let input = u.0[i];
            let previous = self.last_input[i] - self.offset[i];
            let y = previous.clamp(input - self.half_width, input + self.half_width);
            self.offset[i] = input - y;
            self.last_input[i] = input;
            *o = y;
        }
        InputVector::new(out[0], out[1])
    }
}

/// Value-style wrapper around [`BacklashState::apply`].
pub fn apply_backlash(u: &InputVector, s: &BacklashState) -> (InputVector, BacklashState) {
    let mut next = *s;
    let y = next.apply(u);
    (y, next)
}

fn rk4_step(x: &Vector6<f64>, u: &Vector2<f64>, h: f64, p: &RobotParams) -> Vector6<f64> {
    let k1 = dynamics_unchecked(x, u, p);
    let k2 = dynamics_unchecked(&(x + k1 * (h / 2.0)), u, p);
    let k3 = dynamics_unchecked(&(x + k2 * (h / 2.0)), u, p);
    let k4 = dynamics_unchecked(&(x + k3 * h), u, p);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classic RK4 over `dt` in `n_sub` equal substeps with `u` held constant.
/// No backlash; this is the pure model used for prediction.
pub fn integrate(x: &StateVector, u: &InputVector, dt: f64, n_sub: usize, p: &RobotParams) -> Result<StateVector> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter { name: "dt", reason: format!("must be > 0, got {dt}") });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("input"));
    }
    let n = n_sub.max(1);
    let h = dt / n as f64;
    let mut s = x.0;
    for _ in 0..n {
        s = rk4_step(&s, &u.0, h, p);
        if !s.iter().all(|v| v.is_finite() && v.abs() <= OVERFLOW_GUARD) {
            return Err(Error::Diverged);
        }
    }
    Ok(StateVector(s))
}

/// Ground-truth propagation of the plant over one zero-order-hold interval:
/// the commanded input passes through the backlash, then [`integrate`].
pub fn integrate_plant(
    x: &StateVector,
    u: &InputVector,
    dt: f64,
    n_sub: usize,
    p: &RobotParams,
    backlash: &mut BacklashState,
) -> Result<StateVector> {
    let effective = backlash.apply(u);
    integrate(x, &effective, dt, n_sub, p)
}
