//! Discrete-time LQR synthesis, the state-feedback and tracking laws, and
//! reference trajectory generation.

use nalgebra::{DMatrix, Matrix2, Matrix6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputVector, Matrix2x6, Matrix6x2, StateVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    /// Residual bound, relative to `1 + max|P|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000 }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// One application of the Riccati map
/// `P -> A'PA - A'PB (R + B'PB)^-1 B'PA + Q`.
pub fn riccati_step(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s.lu().solve(&(&bt_p * a)).ok_or(Error::Singular("R + B'PB"))?;
    let next = a.transpose() * p * a - a.transpose() * p * b * gain + q;
    Ok(symmetrize(&next))
}

/// `max|P - Riccati(P)|`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<f64> {
    Ok((p - riccati_step(a, b, q, r, p)?).amax())
}

fn check_weights(q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    if !q.iter().chain(r.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("LQR weights"));
    }
    if (q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidParameter { name: "Q", reason: "must be symmetric".into() });
    }
    let min_eig = q.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-12 * (1.0 + q.amax()) {
        return Err(Error::InvalidParameter { name: "Q", reason: format!("must be positive semidefinite (min eigenvalue {min_eig})") });
    }
    if (r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) || r.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter { name: "R", reason: "must be symmetric positive definite".into() });
    }
    Ok(())
}

/// Stabilising solution of the discrete algebraic Riccati equation.
///
/// Runs the Riccati recursion from `P0 = Q` in doubling form: after `j`
/// sweeps the iterate equals the `2^j`-th plain Riccati iterate, so slow
/// closed-loop modes do not stall convergence. The result is accepted only if
/// its residual meets `opts.tol`.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, opts: DareOptions) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert!(a.is_square() && b.nrows() == n && q.shape() == (n, n) && r.shape() == (b.ncols(), b.ncols()), "dimension mismatch");
    check_weights(q, r)?;

    let r_inv_bt = r.clone().lu().solve(&b.transpose()).ok_or(Error::Singular("R"))?;
    let mut ak = a.clone();
    let mut gk = symmetrize(&(b * r_inv_bt));
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let w = (&eye + &gk * &hk).lu();
        let w_inv_a = w.solve(&ak).ok_or(Error::Singular("I + GH"))?;
        let w_inv_g = w.solve(&gk).ok_or(Error::Singular("I + GH"))?;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_inv_a));
        let g_next = symmetrize(&(&gk + &ak * w_inv_g * ak.transpose()));
        let a_next = &ak * w_inv_a;

        if !h_next.iter().all(|v| v.is_finite()) {
            break;
        }
        let change = (&h_next - &hk).amax();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if change <= f64::EPSILON * (1.0 + hk.amax()) || ak.amax() == 0.0 {
            break;
        }
    }

    let residual = if hk.iter().all(|v| v.is_finite()) { dare_residual(a, b, q, r, &hk)? } else { f64::INFINITY };
    if residual <= opts.tol * (1.0 + hk.amax()) {
        Ok(hk)
    } else {
        Err(Error::RiccatiNotConverged { iterations, residual })
    }
}

/// `K = (R + B'PB)^-1 B'PA`.
pub fn gain_from_riccati(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    (r + &bt_p * b).lu().solve(&(bt_p * a)).ok_or(Error::Singular("R + B'PB"))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Weight matrices of the quadratic cost `sum x'Qx + u'Ru`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: Matrix6<f64>,
    pub r: Matrix2<f64>,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            q: Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 1e3, 1.0, 1.0, 1e6, 1.0)),
            r: Matrix2::from_diagonal(&nalgebra::Vector2::new(1e4, 1e4)),
        }
    }
}

impl LqrWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(&to_dyn(&self.q), &to_dyn(&self.r))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { q: self.q * c, r: self.r * c }
    }
}

fn to_dyn<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// A certified LQR design for the robot: `rho_cl < 1` is checked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub p: Matrix6<f64>,
    pub k: Matrix2x6,
    pub rho_cl: f64,
}

impl LqrDesign {
    pub fn closed_loop(ad: &Matrix6<f64>, bd: &Matrix6x2, k: &Matrix2x6) -> Matrix6<f64> {
        ad - bd * k
    }

    /// Gain matrix as whitespace-separated text, one row per line.
    pub fn gain_to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..2 {
            let row: Vec<String> = (0..6).map(|j| format!("{:.12e}", self.k[(i, j)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn lqr_gain(ad: &Matrix6<f64>, bd: &Matrix6x2, weights: &LqrWeights) -> Result<LqrDesign> {
    lqr_gain_with(ad, bd, weights, DareOptions::default())
}

pub fn lqr_gain_with(ad: &Matrix6<f64>, bd: &Matrix6x2, weights: &LqrWeights, opts: DareOptions) -> Result<LqrDesign> {
    let (a, b) = (to_dyn(ad), to_dyn(bd));
    let r = to_dyn(&weights.r);
    let p = solve_dare(&a, &b, &to_dyn(&weights.q), &r, opts)?;
    let k = gain_from_riccati(&a, &b, &r, &p)?;
    let rho_cl = spectral_radius(&(&a - &b * &k));
    if !(rho_cl < 1.0) {
        return Err(Error::UnstableClosedLoop(rho_cl));
    }
    Ok(LqrDesign {
        p: Matrix6::from_column_slice(p.as_slice()),
        k: Matrix2x6::from_column_slice(k.as_slice()),
        rho_cl,
    })
}

/// `u = sat(-K x)`.
pub fn control_law(k: &Matrix2x6, x: &StateVector, v_max: f64) -> InputVector {
    InputVector(-(k * x.0)).saturated(v_max)
}

/// `u = sat(-K (x - x_ref))`.
pub fn tracking_law(k: &Matrix2x6, x: &StateVector, x_ref: &StateVector, v_max: f64) -> InputVector {
    InputVector(-(k * (x.0 - x_ref.0))).saturated(v_max)
}

/// A step of `amplitude` added to the target signal at time `at` [s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub at: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    #[serde(default)]
    pub phi_dot_steps: Vec<Step>,
    #[serde(default)]
    pub gamma_steps: Vec<Step>,
    /// First-order low-pass time constant [s].
    #[serde(default = "default_tau")]
    pub tau_f: f64,
}

fn default_tau() -> f64 {
    0.5
}

impl Default for ReferenceSpec {
    /// Drive forward at 2 rad/s of wheel speed between 2 s and 8 s and turn by
    /// 0.5 rad at 10 s.
    fn default() -> Self {
        Self {
            phi_dot_steps: vec![Step { at: 2.0, amplitude: 2.0 }, Step { at: 8.0, amplitude: -2.0 }],
            gamma_steps: vec![Step { at: 10.0, amplitude: 0.5 }],
            tau_f: 0.5,
        }
    }
}

impl ReferenceSpec {
    pub fn zero() -> Self {
        Self { phi_dot_steps: vec![], gamma_steps: vec![], tau_f: 0.5 }
    }

    fn target(steps: &[Step], t: f64) -> f64 {
        steps.iter().filter(|s| t >= s.at).map(|s| s.amplitude).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub ts: f64,
    pub states: Vec<StateVector>,
}

impl ReferenceTrajectory {
    pub fn zero(ts: f64) -> Self {
        Self { ts, states: vec![StateVector::zeros()] }
    }

    /// Reference at step `k`; beyond the end the last sample is held.
    pub fn at(&self, k: usize) -> StateVector {
        match self.states.get(k) {
            Some(x) => *x,
            None => self.states.last().copied().unwrap_or_default(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Low-pass filtered steps for wheel speed and yaw; wheel angle by
/// integration, yaw rate by backward difference, pitch and pitch rate zero.
///
/// The filter is `y(k) = a y(k-1) + (1 - a) target((k-1) Ts)` with
/// `a = exp(-Ts / tau_f)`, so a step at `t = 0` gives `A (1 - a^k)`.
pub fn generate_reference(spec: &ReferenceSpec, ts: f64, horizon: usize) -> Result<ReferenceTrajectory> {
    if !(spec.tau_f.is_finite() && spec.tau_f > 0.0) {
        return Err(Error::InvalidParameter { name: "tau_f", reason: "filter time constant must be > 0".into() });
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidParameter { name: "ts", reason: "must be > 0".into() });
    }
    let a = (-ts / spec.tau_f).exp();
    let n = horizon.max(1);
    let mut states = Vec::with_capacity(n);
    let (mut phi, mut phi_dot, mut gamma) = (0.0, 0.0, 0.0);
    states.push(StateVector::zeros());
    for k in 1..n {
        let t_prev = (k - 1) as f64 * ts;
        phi_dot = a * phi_dot + (1.0 - a) * ReferenceSpec::target(&spec.phi_dot_steps, t_prev);
        let gamma_next = a * gamma + (1.0 - a) * ReferenceSpec::target(&spec.gamma_steps, t_prev);
        phi += ts * phi_dot;
        let gamma_dot = (gamma_next - gamma) / ts;
        gamma = gamma_next;
        states.push(StateVector::new(phi, 0.0, phi_dot, 0.0, gamma, gamma_dot));
    }
    Ok(ReferenceTrajectory { ts, states })
}
