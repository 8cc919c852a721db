//! Closed-loop simulation of the local and networked configurations,
//! benchmark experiments and RMSE reporting.
//!
//! A run starts with the robot held still at its initial pitch for gyro
//! calibration. With a lift configured, the body is then moved along a
//! prescribed pitch ramp toward upright and the loop closes at the first
//! cycle whose measured pitch is inside the release band. Cycle indices and
//! channel events count from the first sensor read; references count from
//! loop closure.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelConfig, CycleTiming, Nanos};
use crate::config::WeightsConfig;
use crate::error::{Error, Result};
use crate::estimation::{estimate_bias, simulate_sensors, EstimatorState, GyroBias, NoiseConfig, SensorFrame};
use crate::lqr::{generate_reference, lqr_gain, tracking_law, LqrDesign, ReferenceSpec, ReferenceTrajectory};
use crate::model::{integrate_plant, BacklashState, InputVector, LinearModel, RobotParams, StateVector};
use crate::netctrl::{Actuation, ControlMatrix, ControllerSetup, NetworkedController, Predictor, RobotBuffer};

/// ChaCha stream of the trial seed used for sensor noise.
pub const SENSOR_STREAM: u64 = 1;

/// Version tag written in the first line of every trace CSV.
pub const TRACE_FORMAT: &str = "twipr-trace v1";

/// Per-row flag bits.
pub mod flags {
    /// Robot still held; no input applied.
    pub const LOOP_OPEN: u8 = 1;
    /// A control matrix arrived this cycle.
    pub const FRESH: u8 = 2;
    /// More consecutive losses than the horizon covers; last column held.
    pub const DEGRADED: u8 = 4;
    /// No control matrix received yet.
    pub const COLD: u8 = 8;
    /// Plant left the admissible region; last row of the trace.
    pub const FALLEN: u8 = 16;
    /// Wall-clock deadline missed in a socket deployment.
    pub const DEADLINE_MISS: u8 = 32;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Local,
    Networked,
    NetworkedOverWire,
}

impl Mode {
    pub fn is_networked(self) -> bool {
        self != Mode::Local
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Networked => "networked",
            Mode::NetworkedOverWire => "networked-over-wire",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Mode::Local),
            "networked" => Ok(Mode::Networked),
            "networked-over-wire" => Ok(Mode::NetworkedOverWire),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Stabilization,
    #[default]
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sensing {
    /// Gyro and encoders through the reconstruction recursion.
    #[default]
    Estimated,
    /// Controller sees the true state.
    Ideal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    #[default]
    Nonlinear,
    /// The discretized linear model itself; only whole-period inputs.
    ExactLinear,
}

/// Manual lift: pitch ramps linearly from `start_pitch` to zero over
/// `duration`; the loop closes once `|measured pitch| < theta_close`, or at
/// the end of the ramp at the latest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lift {
    pub start_pitch: f64,
    pub duration: f64,
    pub theta_close: f64,
}

impl Default for Lift {
    fn default() -> Self {
        Self { start_pitch: 0.3, duration: 1.0, theta_close: 0.02 }
    }
}

impl Lift {
    fn state_at(&self, t: f64) -> StateVector {
        if t >= self.duration {
            return StateVector::zeros();
        }
        let theta = self.start_pitch * (1.0 - t / self.duration);
        StateVector::new(0.0, theta, 0.0, -self.start_pitch / self.duration, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireConfig {
    /// Pace cycles with the wall clock. Off (the default) runs on a virtual
    /// clock, as fast as packets flow and bit-identical to the in-process run.
    pub realtime: bool,
    /// Loopback ports for robot, proxy (robot side), proxy (controller side)
    /// and controller; 0 picks an ephemeral port.
    pub ports: [u16; 4],
}

impl Default for WireConfig {
    fn default() -> Self {
        Self { realtime: false, ports: [0; 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub experiment: Experiment,
    /// Closed-loop duration after loop closure [s].
    pub duration: f64,
    pub ts: f64,
    pub seed: u64,
    pub trials: usize,
    /// Initial true state when no lift is configured.
    pub initial_state: [f64; 6],
    pub lift: Option<Lift>,
    pub reference: ReferenceSpec,
    pub controller: WeightsConfig,
    /// `M`: the control matrix has `M + 1` columns.
    pub horizon: usize,
    pub predictor: Predictor,
    pub channel: ChannelConfig,
    pub noise: NoiseConfig,
    pub sensing: Sensing,
    pub plant: PlantKind,
    /// Backlash half-width [V]; used by the plant and the linear predictor.
    pub backlash: f64,
    pub n_sub: usize,
    /// Pitch magnitude treated as a fall [rad].
    pub fall_angle: f64,
    pub robot: RobotParams,
    pub robot_file: Option<PathBuf>,
    pub wire: WireConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            mode: Mode::Local,
            experiment: Experiment::Tracking,
            duration: 14.0,
            ts: 0.035,
            seed: 1,
            trials: 1,
            initial_state: [0.0; 6],
            lift: None,
            reference: ReferenceSpec::default(),
            controller: WeightsConfig::default(),
            horizon: 3,
            predictor: Predictor::Linear,
            channel: ChannelConfig::default(),
            noise: NoiseConfig::default(),
            sensing: Sensing::Estimated,
            plant: PlantKind::Nonlinear,
            backlash: 0.02,
            n_sub: 8,
            fall_angle: std::f64::consts::FRAC_PI_2,
            robot: RobotParams::default(),
            robot_file: None,
            wire: WireConfig::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| Err(Error::InvalidParameter { name, reason: reason.into() });
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return bad("ts", "must be > 0");
        }
        if !(self.duration.is_finite() && self.duration >= self.ts) {
            return bad("duration", "must cover at least one cycle");
        }
        if self.trials == 0 {
            return bad("trials", "must be >= 1");
        }
        if self.horizon >= u8::MAX as usize {
            return bad("horizon", "must be < 255");
        }
        if self.n_sub == 0 {
            return bad("n_sub", "must be >= 1");
        }
        if !(self.backlash.is_finite() && self.backlash >= 0.0) {
            return bad("backlash", "must be >= 0");
        }
        if !(self.fall_angle.is_finite() && self.fall_angle > 0.0) {
            return bad("fall_angle", "must be > 0");
        }
        if self.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial_state"));
        }
        if let Some(l) = &self.lift {
            if !(l.duration > 0.0 && l.theta_close > 0.0 && l.start_pitch.is_finite()) {
                return bad("lift", "duration and theta_close must be > 0");
            }
        }
        self.robot.validate()?;
        self.noise.validate()?;
        self.channel.validate(self.ts)?;
        self.controller.to_weights()?;
        if self.mode.is_networked() && !self.channel.dilation && self.plant == PlantKind::ExactLinear {
            return bad("plant", "exact-linear plant needs dilated actuation");
        }
        if self.mode == Mode::NetworkedOverWire && self.sensing == Sensing::Ideal {
            return bad("sensing", "wire deployment carries sensor readings, not states");
        }
        Ok(())
    }

    /// Closed-loop cycles after loop closure.
    pub fn cycles(&self) -> usize {
        ((self.duration / self.ts).round() as usize).max(1)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    pub fn actuation(&self) -> Actuation {
        if self.channel.dilation {
            Actuation::Dilated
        } else {
            Actuation::Immediate
        }
    }

    /// CRC-32 of the full configuration, written into trace headers.
    pub fn config_crc(&self) -> u32 {
        crc32fast::hash(format!("{self:?}").as_bytes())
    }

    fn hold_state(&self) -> StateVector {
        match &self.lift {
            Some(l) => StateVector::new(0.0, l.start_pitch, 0.0, 0.0, 0.0, 0.0),
            None => StateVector(nalgebra::Vector6::from_column_slice(&self.initial_state)),
        }
    }

    /// Model, gain and reference shared by all trials.
    pub fn design(&self) -> Result<Design> {
        self.validate()?;
        let model = LinearModel::from_params(&self.robot, self.ts)?;
        let lqr = lqr_gain(&model.ad, &model.bd, &self.controller.to_weights()?)?;
        let reference = match self.experiment {
            Experiment::Tracking => generate_reference(&self.reference, self.ts, self.cycles() + self.horizon + 2)?,
            Experiment::Stabilization => ReferenceTrajectory::zero(self.ts),
        };
        Ok(Design { model, lqr, reference })
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub model: LinearModel,
    pub lqr: LqrDesign,
    pub reference: ReferenceTrajectory,
}

/// Decides the loop-closure cycle from measured pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseDetector {
    lift: Option<Lift>,
    ts: f64,
    at: Option<u64>,
}

impl ReleaseDetector {
    pub fn new(lift: Option<Lift>, ts: f64) -> Self {
        Self { lift, ts, at: None }
    }

    pub fn released_at(&self) -> Option<u64> {
        self.at
    }

    pub fn observe(&mut self, k: u64, theta_meas: f64) -> Option<u64> {
        if self.at.is_none() {
            let close = match &self.lift {
                None => true,
                Some(l) => theta_meas.abs() < l.theta_close || k as f64 * self.ts >= l.duration,
            };
            if close {
                self.at = Some(k);
            }
        }
        self.at
    }
}

/// Reconstruction recursion fed with consecutive frames starting at `k = 0`.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    est: EstimatorState,
    bias: GyroBias,
    ts: f64,
    wheel_radius: f64,
    track_width: f64,
    started: bool,
}

impl Reconstructor {
    pub fn new(theta0: f64, bias: GyroBias, ts: f64, params: &RobotParams) -> Self {
        Self { est: EstimatorState::new(theta0), bias, ts, wheel_radius: params.wheel_radius, track_width: params.track_width, started: false }
    }

    pub fn push(&mut self, frame: &SensorFrame) -> Result<StateVector> {
        if !self.started {
            if frame.k != 0 {
                return Err(Error::NonConsecutiveFrame { expected: 0, got: frame.k });
            }
            self.started = true;
            return Ok(self.est.initial_estimate(frame, self.bias));
        }
        self.est.update(frame, self.bias, self.ts, self.wheel_radius, self.track_width)
    }
}

/// Theta0 the estimator is initialized with.
pub fn initial_pitch(scn: &Scenario) -> f64 {
    scn.hold_state().theta()
}

/// One sensor read as seen by the robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// Raw encoder readings with the calibrated gyro bias already removed.
    pub frame: SensorFrame,
    pub x_meas: StateVector,
    pub x_true: StateVector,
}

/// Plant, sensors, estimator and input buffer.
#[derive(Debug, Clone)]
pub struct RobotSide {
    params: RobotParams,
    noise: NoiseConfig,
    sensing: Sensing,
    plant: PlantKind,
    model: LinearModel,
    n_sub: usize,
    ts: f64,
    lift: Option<Lift>,
    fall_angle: f64,
    rng: ChaCha8Rng,
    bias: GyroBias,
    recon: Reconstructor,
    pub release: ReleaseDetector,
    backlash: BacklashState,
    pub buffer: RobotBuffer,
    x: StateVector,
    /// Input acting at the start of the next integration interval.
    pending: InputVector,
}

impl RobotSide {
    /// Calibrates the gyro on `n_bias` frames with the robot held still.
    pub fn new(scn: &Scenario, design: &Design, trial_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        rng.set_stream(SENSOR_STREAM);
        let hold = scn.hold_state();
        let frames: Vec<SensorFrame> =
            (0..scn.noise.n_bias).map(|i| simulate_sensors(i as u64, &hold, &scn.robot, &scn.noise, &mut rng)).collect();
        let bias = estimate_bias(&frames, scn.noise.n_bias)?;
        Ok(Self {
            params: scn.robot.clone(),
            noise: scn.noise.clone(),
            sensing: scn.sensing,
            plant: scn.plant,
            model: design.model.clone(),
            n_sub: scn.n_sub,
            ts: scn.ts,
            lift: scn.lift,
            fall_angle: scn.fall_angle,
            rng,
            bias,
            recon: Reconstructor::new(hold.theta(), GyroBias(0.0), scn.ts, &scn.robot),
            release: ReleaseDetector::new(scn.lift, scn.ts),
            backlash: BacklashState::new(scn.backlash)?,
            buffer: RobotBuffer::new(scn.horizon),
            x: hold,
            pending: InputVector::zeros(),
        })
    }

    pub fn bias(&self) -> GyroBias {
        self.bias
    }

    pub fn state(&self) -> StateVector {
        self.x
    }

    pub fn released_at(&self) -> Option<u64> {
        self.release.released_at()
    }

    /// Reads sensors at cycle `k` and updates the release decision.
    pub fn measure(&mut self, k: u64) -> Result<Measurement> {
        if self.release.released_at().is_none() {
            if let Some(l) = &self.lift {
                self.x = l.state_at(k as f64 * self.ts);
            }
        }
        let mut frame = simulate_sensors(k, &self.x, &self.params, &self.noise, &mut self.rng);
        frame.theta_dot_meas -= self.bias.0;
        let estimate = self.recon.push(&frame)?;
        let x_meas = match self.sensing {
            Sensing::Estimated => estimate,
            Sensing::Ideal => self.x,
        };
        self.release.observe(k, x_meas.theta());
        Ok(Measurement { frame, x_meas, x_true: self.x })
    }

    /// Propagates the plant over one period. `switch` is the offset [s] at
    /// which `next` replaces the input currently acting; `None` means `next`
    /// acts from the following period on. Returns `true` on a fall.
    pub fn advance(&mut self, next: InputVector, switch: Option<f64>) -> Result<bool> {
        if self.release.released_at().is_none() {
            self.pending = InputVector::zeros();
            return Ok(false);
        }
        let segments: Vec<(f64, InputVector)> = match switch {
            None => vec![(self.ts, self.pending)],
            Some(dt) if dt <= 0.0 => vec![(self.ts, next)],
            Some(dt) => vec![(dt, self.pending), (self.ts - dt, next)],
        };
        self.pending = next;
        for (dt, u) in segments {
            let step = match self.plant {
                PlantKind::Nonlinear => integrate_plant(&self.x, &u, dt, self.n_sub, &self.params, &mut self.backlash),
                PlantKind::ExactLinear => {
                    if dt != self.ts {
                        return Err(Error::InvalidParameter { name: "plant", reason: "exact-linear plant needs whole-period inputs".into() });
                    }
                    let y = self.backlash.apply(&u);
                    Ok(StateVector(self.model.step(&self.x.0, &y.0)))
                }
            };
            match step {
                Ok(x) => self.x = x,
                Err(Error::Diverged) => return Ok(true),
                Err(e) => return Err(e),
            }
        }
        Ok(!self.x.is_finite() || self.x.theta().abs() >= self.fall_angle)
    }
}

/// Remote (or local) control computation.
#[derive(Debug, Clone)]
pub struct ControllerSide {
    design: Design,
    v_max: f64,
    pub release: ReleaseDetector,
    net: NetworkedController,
    recon: Reconstructor,
}

impl ControllerSide {
    pub fn new(scn: &Scenario, design: &Design) -> Self {
        let setup = ControllerSetup {
            gain: design.lqr.k,
            model: design.model.clone(),
            params: scn.robot.clone(),
            backlash: scn.backlash,
            horizon: scn.horizon,
            n_sub: scn.n_sub,
            predictor: scn.predictor,
            actuation: scn.actuation(),
        };
        Self {
            design: design.clone(),
            v_max: scn.robot.v_max,
            release: ReleaseDetector::new(scn.lift, scn.ts),
            net: NetworkedController::new(setup, design.reference.clone()),
            recon: Reconstructor::new(initial_pitch(scn), GyroBias(0.0), scn.ts, &scn.robot),
        }
    }

    /// Direct feedback `sat(-K (x - x_ref))` for the local configuration.
    pub fn local_input(&mut self, k: u64, x_meas: &StateVector) -> InputVector {
        match self.release.observe(k, x_meas.theta()) {
            None => InputVector::zeros(),
            Some(r) => tracking_law(&self.design.lqr.k, x_meas, &self.design.reference.at((k - r) as usize), self.v_max),
        }
    }

    /// Control matrix for cycle `k`; zeros until the loop closes.
    pub fn on_measurement(&mut self, k: u64, x_meas: &StateVector, omega_echo: u8) -> Result<ControlMatrix> {
        match self.release.observe(k, x_meas.theta()) {
            None => Ok(self.net.idle(k)),
            Some(r) => self.net.on_measurement(k, (k - r) as usize, x_meas, omega_echo),
        }
    }

    /// Reconstructs the state from a (bias-corrected) frame and computes the
    /// matrix. Used when only sensor readings cross the network.
    pub fn on_frame(&mut self, frame: &SensorFrame, omega_echo: u8) -> Result<ControlMatrix> {
        let x = self.recon.push(frame)?;
        self.on_measurement(frame.k, &x, omega_echo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: u64,
    pub t_m: Nanos,
    pub t_rh: Option<Nanos>,
    pub t_rr: Option<Nanos>,
    pub t_a: Option<Nanos>,
    pub x_true: StateVector,
    pub x_meas: StateVector,
    pub x_ref: StateVector,
    /// Input selected in this cycle; it acts from `t_a` on.
    pub u: InputVector,
    pub lost: bool,
    pub omega: u32,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub config_crc: u32,
    /// Loop-closure cycle.
    pub release: Option<u64>,
    /// Closed-loop cycles requested after release.
    pub cycles: usize,
    pub fallen: bool,
    pub rows: Vec<TraceRow>,
    /// Control matrices sent, one per cycle (networked modes only).
    pub sent: Vec<ControlMatrix>,
}

fn opt_ns(t: Option<Nanos>) -> String {
    t.map(|t| t.0.to_string()).unwrap_or_default()
}

impl Trace {
    pub fn header() -> String {
        let mut cols = vec!["k", "t_m_ns", "t_rh_ns", "t_rr_ns", "t_a_ns"];
        let names = ["phi", "theta", "phi_dot", "theta_dot", "gamma", "gamma_dot"];
        let mut owned = Vec::new();
        for suffix in ["", "_meas", "_ref"] {
            for n in names {
                owned.push(format!("{n}{suffix}"));
            }
        }
        cols.extend(owned.iter().map(String::as_str));
        cols.extend(["u_l", "u_r", "eps", "omega", "flags"]);
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "# {TRACE_FORMAT} scenario={} mode={} seed={} config_crc={:08x} release={} fallen={}",
            self.scenario,
            self.mode.as_str(),
            self.seed,
            self.config_crc,
            self.release.map(|r| r.to_string()).unwrap_or_else(|| "none".into()),
            self.fallen
        )?;
        writeln!(w, "{}", Self::header())?;
        for r in &self.rows {
            write!(w, "{},{},{},{},{}", r.k, r.t_m.0, opt_ns(r.t_rh), opt_ns(r.t_rr), opt_ns(r.t_a))?;
            for x in [&r.x_true, &r.x_meas, &r.x_ref] {
                for v in x.0.iter() {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w, ",{},{},{},{},{}", r.u.left(), r.u.right(), u8::from(r.lost), r.omega, r.flags)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// RMSE window `[release, release + cycles)`; `None` if the loop never
    /// closed or the robot fell.
    pub fn window(&self) -> Option<(usize, usize)> {
        if self.fallen {
            return None;
        }
        let r = self.release? as usize;
        Some((r, r + self.cycles))
    }

    pub fn rmse(&self) -> Option<Result<RmseReport>> {
        self.window().map(|(k0, k_end)| compute_rmse(self, k0, k_end))
    }
}

/// Runs one trial in process (or over sockets for the wire mode).
pub fn run_trial(scn: &Scenario, design: &Design, trial: usize) -> Result<Trace> {
    match scn.mode {
        Mode::NetworkedOverWire => crate::wire::deploy::run_wire_deployment(scn, design, trial),
        _ => run_in_process(scn, design, trial, |_| None),
    }
}

/// Same as [`run_trial`] for the in-process modes, but `override_loss(k)` can
/// force a cycle's loss outcome (used by the wire cross-check).
pub fn run_in_process<F>(scn: &Scenario, design: &Design, trial: usize, mut override_loss: F) -> Result<Trace>
where
    F: FnMut(u64) -> Option<bool>,
{
    let seed = scn.trial_seed(trial);
    let mut robot = RobotSide::new(scn, design, seed)?;
    let mut ctrl = ControllerSide::new(scn, design);
    let mut channel = Channel::new(scn.channel.clone(), seed);
    let ts_ns = Nanos::from_secs(scn.ts);
    let networked = scn.mode.is_networked();
    let mut rows = Vec::new();
    let mut sent = Vec::new();
    let mut fallen = false;

    for k in 0u64.. {
        let t_m = Nanos(k * ts_ns.0);
        let meas = robot.measure(k)?;
        let release = robot.released_at();
        let x_ref = release.map(|r| design.reference.at((k - r) as usize)).unwrap_or_default();
        let mut flags = if release.is_none() { flags::LOOP_OPEN } else { 0 };

        let (timing, u, omega, switch) = if networked {
            let echo = robot.buffer.omega_echo();
            let matrix = ctrl.on_measurement(k, &meas.x_meas, echo)?;
            let mut timing = channel.cycle(k, t_m, ts_ns);
            if let Some(lost) = override_loss(k) {
                timing = forced_timing(timing, lost, scn, ts_ns);
            }
            let out = robot.buffer.step((!timing.lost).then(|| matrix.clone()));
            sent.push(matrix);
            flags |= cycle_flags(&timing, &out);
            let switch = match scn.actuation() {
                Actuation::Dilated => None,
                Actuation::Immediate => {
                    let t_act = timing.t_a.unwrap_or(t_m + channel.timeout());
                    Some((t_act - t_m).as_secs())
                }
            };
            (Some(timing), out.input, out.omega, switch)
        } else {
            (None, ctrl.local_input(k, &meas.x_meas), 0, Some(0.0))
        };
        let u = if release.is_some() { u } else { InputVector::zeros() };

        let fell = robot.advance(u, switch)?;
        if fell {
            flags |= flags::FALLEN;
        }
        rows.push(TraceRow {
            k,
            t_m,
            t_rh: timing.and_then(|t| Some(t.t_rh)),
            t_rr: timing.and_then(|t| t.t_rr),
            t_a: timing.map_or(Some(t_m), |t| t.t_a),
            x_true: meas.x_true,
            x_meas: meas.x_meas,
            x_ref,
            u,
            lost: timing.is_some_and(|t| t.lost),
            omega,
            flags,
        });
        if fell {
            fallen = true;
            break;
        }
        if let Some(r) = release {
            if (k - r + 1) as usize >= scn.cycles() {
                break;
            }
        }
    }

    Ok(Trace {
        scenario: scn.name.clone(),
        mode: scn.mode,
        seed,
        config_crc: scn.config_crc(),
        release: robot.released_at(),
        cycles: scn.cycles(),
        fallen,
        rows,
        sent,
    })
}

pub(crate) fn cycle_flags(timing: &CycleTiming, out: &crate::netctrl::BufferOutput) -> u8 {
    let mut f = 0;
    if !timing.lost {
        f |= flags::FRESH;
    }
    if out.degraded {
        f |= flags::DEGRADED;
    }
    if out.cold {
        f |= flags::COLD;
    }
    f
}

fn forced_timing(mut t: CycleTiming, lost: bool, scn: &Scenario, ts: Nanos) -> CycleTiming {
    if lost == t.lost {
        return t;
    }
    t.lost = lost;
    if lost {
        t.d_c3 = None;
        t.t_a = None;
    } else {
        let t_rr = t.t_rr.unwrap_or(t.t_rh);
        t.t_rr = Some(t_rr);
        if scn.channel.dilation {
            let (d, a) = crate::channel::dilate_actuation(t.t_m, Some(t_rr), ts).unwrap_or((Nanos(0), t.t_m + ts));
            t.d_c3 = Some(d);
            t.t_a = Some(a);
        } else {
            t.d_c3 = Some(Nanos(0));
            t.t_a = Some(t_rr);
        }
    }
    t
}

/// All trials of a scenario, sequentially.
pub fn run_trials(scn: &Scenario) -> Result<Vec<Trace>> {
    let design = scn.design()?;
    (0..scn.trials).map(|i| run_trial(scn, &design, i)).collect()
}

/// Root-mean-square tracking errors over the half-open window `[k0, k_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub k0: usize,
    pub k_end: usize,
    pub phi: f64,
    pub theta: f64,
    pub gamma: f64,
    /// Per-trial `[phi, theta, gamma]`.
    pub trials: Vec<[f64; 3]>,
}

impl RmseReport {
    pub fn window_len(&self) -> usize {
        self.k_end - self.k0
    }
}

/// Measured wheel angle vs. reference, measured pitch vs. zero, measured yaw
/// vs. reference, each `sqrt(sum(e^2) / (k_end - k0))`.
pub fn compute_rmse(trace: &Trace, k0: usize, k_end: usize) -> Result<RmseReport> {
    if k0 >= k_end || k_end > trace.rows.len() {
        return Err(Error::EmptyWindow { k0, k_end });
    }
    let errors: Vec<[f64; 3]> = trace.rows[k0..k_end]
        .iter()
        .map(|row| {
            let e = row.x_meas.0 - row.x_ref.0;
            [e[StateVector::PHI], row.x_meas.theta(), e[StateVector::GAMMA]]
        })
        .collect();
    let [phi, theta, gamma] = [0, 1, 2].map(|i| scaled_rms(errors.iter().map(|e| e[i])));
    Ok(RmseReport { k0, k_end, phi, theta, gamma, trials: vec![[phi, theta, gamma]] })
}

/// `m sqrt(mean((e / m)^2))` with `m = max |e|`: overflow-safe, and exact
/// for constant errors.
fn scaled_rms(errors: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = errors.clone().fold(0.0_f64, |a, e| a.max(e.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let (sum, n) = errors.fold((0.0, 0usize), |(s, n), e| (s + (e / m).powi(2), n + 1));
    m * (sum / n as f64).sqrt()
}

/// Arithmetic mean over trials. All reports must cover windows of equal
/// length (trials may close the loop at different cycles).
pub fn aggregate_trials(reports: &[RmseReport]) -> Result<RmseReport> {
    let first = reports.first().ok_or(Error::NoReports)?;
    if reports.iter().any(|r| r.window_len() != first.window_len()) {
        return Err(Error::InconsistentWindows);
    }
    let trials: Vec<[f64; 3]> = reports.iter().flat_map(|r| r.trials.iter().copied()).collect();
    let n = trials.len() as f64;
    let mean = |i: usize| trials.iter().map(|t| t[i]).sum::<f64>() / n;
    Ok(RmseReport { k0: first.k0, k_end: first.k_end, phi: mean(0), theta: mean(1), gamma: mean(2), trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{DelayModel, LossModel};

    fn quiet(mode: Mode) -> Scenario {
        Scenario {
            mode,
            experiment: Experiment::Stabilization,
            duration: 3.0,
            initial_state: [0.0, 0.02, 0.0, 0.0, 0.0, 0.0],
            noise: NoiseConfig::noiseless(),
            backlash: 0.0,
            ..Scenario::default()
        }
    }

    fn synthetic(rows: Vec<(f64, f64, f64)>) -> Trace {
        Trace {
            scenario: "t".into(),
            mode: Mode::Local,
            seed: 0,
            config_crc: 0,
            release: Some(0),
            cycles: rows.len(),
            fallen: false,
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(k, (phi, theta, gamma))| TraceRow {
                    k: k as u64,
                    t_m: Nanos(0),
                    t_rh: None,
                    t_rr: None,
                    t_a: None,
                    x_true: StateVector::zeros(),
                    x_meas: StateVector::new(phi, theta, 0.0, 0.0, gamma, 0.0),
                    x_ref: StateVector::zeros(),
                    u: InputVector::zeros(),
                    lost: false,
                    omega: 0,
                    flags: 0,
                })
                .collect(),
            sent: vec![],
        }
    }

    #[test]
    fn rmse_constant_offset_is_exact() {
        let c = 0.37;
        let t = synthetic(vec![(c, 0.0, 0.0); 50]);
        let r = compute_rmse(&t, 0, 50).unwrap();
        assert_eq!(r.phi, c);
        assert_eq!((r.theta, r.gamma), (0.0, 0.0));
        assert!(compute_rmse(&t, 10, 10).is_err());
        assert!(compute_rmse(&t, 0, 51).is_err());
    }

    #[test]
    fn aggregate_means_and_rejects_mismatch() {
        let a = RmseReport { k0: 0, k_end: 10, phi: 0.1, theta: 0.1, gamma: 0.1, trials: vec![[0.1; 3]] };
        let b = RmseReport { k0: 3, k_end: 13, phi: 0.3, theta: 0.3, gamma: 0.3, trials: vec![[0.3; 3]] };
        let m = aggregate_trials(&[a.clone(), b]).unwrap();
        assert!((m.theta - 0.2).abs() < 1e-15);
        assert_eq!(aggregate_trials(std::slice::from_ref(&a)).unwrap(), a);
        let c = RmseReport { k_end: 11, ..a.clone() };
        assert_eq!(aggregate_trials(&[a, c]), Err(Error::InconsistentWindows));
        assert_eq!(aggregate_trials(&[]), Err(Error::NoReports));
    }

    #[test]
    fn local_stabilization_settles_pitch() {
        let scn = quiet(Mode::Local);
        let trace = run_trials(&scn).unwrap().remove(0);
        assert!(!trace.fallen);
        assert_eq!(trace.rows.len(), scn.cycles());
        let last = trace.rows.last().unwrap();
        assert!(last.x_true.theta().abs() < 1e-3, "{:?}", last.x_true);
    }

    #[test]
    fn networked_without_loss_stays_up() {
        let mut scn = quiet(Mode::Networked);
        scn.channel.loss = LossModel::None;
        let trace = run_trials(&scn).unwrap().remove(0);
        assert!(!trace.fallen);
        assert!(trace.rows.iter().all(|r| !r.lost && r.omega == 1));
        assert!(trace.rows.last().unwrap().x_true.theta().abs() < 1e-3);
    }

    #[test]
    fn zero_delay_immediate_matches_local() {
        let mut local = Scenario { mode: Mode::Local, duration: 4.0, lift: Some(Lift::default()), ..Scenario::default() };
        local.channel = ChannelConfig { dilation: false, ..ChannelConfig::ideal() };
        let net = Scenario { mode: Mode::Networked, ..local.clone() };
        let a = run_trials(&local).unwrap().remove(0);
        let b = run_trials(&net).unwrap().remove(0);
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.x_true, rb.x_true);
            assert_eq!(ra.x_meas, rb.x_meas);
            assert_eq!(ra.u, rb.u);
        }
    }

    #[test]
    fn zero_reference_tracking_equals_stabilization() {
        let base = Scenario { lift: Some(Lift::default()), duration: 2.0, ..Scenario::default() };
        let stab = Scenario { experiment: Experiment::Stabilization, ..base.clone() };
        let track = Scenario { experiment: Experiment::Tracking, reference: ReferenceSpec::zero(), ..base };
        let a = run_trials(&stab).unwrap().remove(0);
        let b = run_trials(&track).unwrap().remove(0);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn trace_integrity_under_losses() {
        let mut scn = Scenario { mode: Mode::Networked, duration: 5.0, lift: Some(Lift::default()), ..Scenario::default() };
        scn.channel.loss = LossModel::Bernoulli { p: 0.2 };
        let trace = run_trials(&scn).unwrap().remove(0);
        for (i, r) in trace.rows.iter().enumerate() {
            assert_eq!(r.k, i as u64);
            assert!(r.u.0.abs().max() <= scn.robot.v_max);
            if r.lost {
                assert_eq!(r.flags & flags::FRESH, 0);
                if i > 0 && trace.rows[i - 1].omega > 0 {
                    assert_eq!(r.omega, trace.rows[i - 1].omega + 1);
                }
            } else {
                assert_eq!(r.omega, 1);
            }
        }
    }

    #[test]
    fn determinism_and_csv() {
        let scn = Scenario { mode: Mode::Networked, duration: 2.0, lift: Some(Lift::default()), ..Scenario::default() };
        let a = run_trials(&scn).unwrap().remove(0).to_csv_string();
        let b = run_trials(&scn).unwrap().remove(0).to_csv_string();
        assert_eq!(a, b);
        let mut lines = a.lines();
        assert!(lines.next().unwrap().starts_with("# twipr-trace v1"));
        let cols = lines.next().unwrap().split(',').count();
        assert!(lines.all(|l| l.split(',').count() == cols));
    }

    #[test]
    fn timeout_everything_lost() {
        let mut scn = quiet(Mode::Networked);
        scn.duration = 0.5;
        scn.channel = ChannelConfig { downlink: DelayModel::Constant { value: 0.040 }, loss: LossModel::None, ..ChannelConfig::default() };
        let trace = run_trials(&scn).unwrap().remove(0);
        assert!(trace.rows.iter().all(|r| r.lost && r.flags & flags::COLD != 0));
    }
}
