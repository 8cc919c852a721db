//! Discrete-event model of the asymmetric robot/controller link.
//!
//! The uplink (robot to controller) always delivers. The downlink can drop
//! packets and any control packet reaching the robot at or after the timeout
//! counts as lost. Delivered packets are held until exactly one sampling
//! period after the measurement instant, which makes the actuation delay
//! constant.
//!
//! All instants are integer nanoseconds so the dilated actuation delay is
//! exact.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nanos(pub u64);

impl Nanos {
    pub fn from_secs(s: f64) -> Self {
        assert!(s.is_finite() && s >= 0.0, "time must be finite and non-negative, got {s}");
        Nanos((s * 1e9).round() as u64)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn as_micros(self) -> u64 {
        self.0 / 1_000
    }
}

impl std::ops::Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

/// Delay distribution in seconds. Sampled by inversion of one uniform draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayModel {
    Constant { value: f64 },
    Uniform { min: f64, max: f64 },
    ShiftedExponential { shift: f64, mean: f64 },
}

impl DelayModel {
    pub fn validate(&self, name: &'static str) -> Result<()> {
        let ok = match *self {
            DelayModel::Constant { value } => value.is_finite() && value >= 0.0,
            DelayModel::Uniform { min, max } => min.is_finite() && max.is_finite() && min >= 0.0 && max >= min,
            DelayModel::ShiftedExponential { shift, mean } => shift.is_finite() && mean.is_finite() && shift >= 0.0 && mean >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter { name, reason: format!("invalid delay model {self:?}") })
        }
    }

    pub fn sample(&self, uniform: f64) -> f64 {
        match *self {
            DelayModel::Constant { value } => value,
            DelayModel::Uniform { min, max } => min + (max - min) * uniform,
            DelayModel::ShiftedExponential { shift, mean } => shift - mean * (1.0 - uniform).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossModel {
    None,
    Bernoulli {
        p: f64,
    },
    /// Two-state Markov chain; the state transition happens before the loss
    /// draw of each cycle.
    GilbertElliott {
        p_good_bad: f64,
        p_bad_good: f64,
        #[serde(default)]
        loss_in_good: f64,
        #[serde(default = "one")]
        loss_in_bad: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        let probs: Vec<f64> = match *self {
            LossModel::None => vec![],
            LossModel::Bernoulli { p } => vec![p],
            LossModel::GilbertElliott { p_good_bad, p_bad_good, loss_in_good, loss_in_bad } => {
                vec![p_good_bad, p_bad_good, loss_in_good, loss_in_bad]
            }
        };
        if probs.iter().all(|p| (0.0..=1.0).contains(p)) {
            Ok(())
        } else {
            Err(Error::InvalidParameter { name: "loss", reason: format!("probabilities must lie in [0, 1]: {self:?}") })
        }
    }

    /// Long-run fraction of dropped packets.
    pub fn stationary_loss(&self) -> f64 {
        match *self {
            LossModel::None => 0.0,
            LossModel::Bernoulli { p } => p,
            LossModel::GilbertElliott { p_good_bad, p_bad_good, loss_in_good, loss_in_bad } => {
                let total = p_good_bad + p_bad_good;
                if total == 0.0 {
                    return loss_in_good;
                }
                let pi_bad = p_good_bad / total;
                pi_bad * loss_in_bad + (1.0 - pi_bad) * loss_in_good
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub uplink: DelayModel,
    pub downlink: DelayModel,
    /// Controller processing time between reception and sending [s].
    pub compute_time: f64,
    pub loss: LossModel,
    /// Timeout `tau_o` [s]; must be strictly below the sampling period.
    pub timeout: f64,
    /// Mixed into the per-trial channel seed.
    pub seed: u64,
    /// Cycle indices whose control packet is always dropped.
    pub forced_drops: Vec<u64>,
    /// Hold delivered inputs until `t_m + Ts`. When off, inputs act on arrival.
    pub dilation: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            uplink: DelayModel::Uniform { min: 0.002, max: 0.006 },
            downlink: DelayModel::ShiftedExponential { shift: 0.003, mean: 0.004 },
            compute_time: 0.001,
            loss: LossModel::GilbertElliott { p_good_bad: 0.02, p_bad_good: 0.5, loss_in_good: 0.0, loss_in_bad: 1.0 },
            timeout: 0.030,
            seed: 0,
            forced_drops: vec![],
            dilation: true,
        }
    }
}

impl ChannelConfig {
    /// Zero delay, zero compute time, no loss.
    pub fn ideal() -> Self {
        Self {
            uplink: DelayModel::Constant { value: 0.0 },
            downlink: DelayModel::Constant { value: 0.0 },
            compute_time: 0.0,
            loss: LossModel::None,
            ..Self::default()
        }
    }

    pub fn validate(&self, ts: f64) -> Result<()> {
        self.uplink.validate("uplink")?;
        self.downlink.validate("downlink")?;
        self.loss.validate()?;
        if !(self.compute_time.is_finite() && self.compute_time >= 0.0) {
            return Err(Error::InvalidParameter { name: "compute_time", reason: "must be >= 0".into() });
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0 && self.timeout < ts) {
            return Err(Error::InvalidParameter { name: "timeout", reason: format!("need 0 < timeout < Ts = {ts}, got {}", self.timeout) });
        }
        Ok(())
    }
}

/// Raw outcome of one cycle before timeout classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSample {
    pub t_rh: Nanos,
    /// `None` when the loss process dropped the control packet.
    pub t_rr: Option<Nanos>,
}

/// `true` (loss) when the packet never arrived or arrived at or after the timeout.
pub fn classify_loss(t_rr: Option<Nanos>, t_m: Nanos, timeout: Nanos) -> bool {
    match t_rr {
        None => true,
        Some(t) => t - t_m >= timeout,
    }
}

/// Wait `d_c3 = Ts - (t_rr - t_m)` so actuation happens at `t_m + Ts`.
/// Returns `(d_c3, t_a)`.
pub fn dilate_actuation(t_m: Nanos, t_rr: Option<Nanos>, ts: Nanos) -> Result<(Nanos, Nanos)> {
    let t_rr = t_rr.ok_or(Error::DilationOnLostCycle)?;
    let elapsed = t_rr - t_m;
    if elapsed >= ts {
        return Err(Error::DilationOnLostCycle);
    }
    let d_c3 = ts - elapsed;
    Ok((d_c3, t_rr + d_c3))
}

/// Timeline of one control cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleTiming {
    pub k: u64,
    pub t_m: Nanos,
    pub t_rh: Nanos,
    /// Arrival at the robot, if the packet was not dropped in flight.
    pub t_rr: Option<Nanos>,
    pub d_c3: Option<Nanos>,
    pub t_a: Option<Nanos>,
    /// Loss indicator after timeout classification.
    pub lost: bool,
}

/// Loss indicator history with consecutive-loss bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossRecord {
    pub lost: Vec<bool>,
    pub run: usize,
    pub longest_run: usize,
}

impl LossRecord {
    pub fn push(&mut self, lost: bool) {
        self.lost.push(lost);
        if lost {
            self.run += 1;
            self.longest_run = self.longest_run.max(self.run);
        } else {
            self.run = 0;
        }
    }

    pub fn loss_count(&self) -> usize {
        self.lost.iter().filter(|l| **l).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkState {
    Good,
    Bad,
}

/// ChaCha stream reserved for channel events; sensors use another stream of
/// the same trial seed.
pub const CHANNEL_STREAM: u64 = 2;

/// Stateful event generator for one simulation run.
///
/// Every cycle consumes exactly four uniforms (uplink delay, downlink delay,
/// loss, state transition) so runs that differ only in loss probabilities see
/// common random numbers.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    state: LinkState,
    forced: BTreeSet<u64>,
    timeout: Nanos,
    compute: Nanos,
    pub record: LossRecord,
}

impl Channel {
    pub fn new(cfg: ChannelConfig, trial_seed: u64) -> Self {
        let forced = cfg.forced_drops.iter().copied().collect();
        let timeout = Nanos::from_secs(cfg.timeout);
        let compute = Nanos::from_secs(cfg.compute_time);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed ^ cfg.seed);
        rng.set_stream(CHANNEL_STREAM);
        Self { rng, cfg, state: LinkState::Good, forced, timeout, compute, record: LossRecord::default() }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn timeout(&self) -> Nanos {
        self.timeout
    }

    /// Draws delays and the loss decision for cycle `k` measured at `t_m`.
    pub fn sample_cycle(&mut self, k: u64, t_m: Nanos) -> CycleSample {
        let u_up: f64 = self.rng.gen();
        let u_down: f64 = self.rng.gen();
        let u_loss: f64 = self.rng.gen();
        let u_trans: f64 = self.rng.gen();

        let t_rh = t_m + Nanos::from_secs(self.cfg.uplink.sample(u_up));
        let t_send = t_rh + self.compute;
        let t_rr = t_send + Nanos::from_secs(self.cfg.downlink.sample(u_down));

        let dropped = match self.cfg.loss {
            LossModel::None => false,
            LossModel::Bernoulli { p } => u_loss < p,
            LossModel::GilbertElliott { p_good_bad, p_bad_good, loss_in_good, loss_in_bad } => {
                self.state = match self.state {
                    LinkState::Good if u_trans < p_good_bad => LinkState::Bad,
                    LinkState::Bad if u_trans < p_bad_good => LinkState::Good,
                    s => s,
                };
                let p = if self.state == LinkState::Bad { loss_in_bad } else { loss_in_good };
                u_loss < p
            }
        };
        let dropped = dropped || self.forced.contains(&k);
        CycleSample { t_rh, t_rr: if dropped { None } else { Some(t_rr) } }
    }

    /// Samples, classifies and (if enabled) dilates one cycle.
    pub fn cycle(&mut self, k: u64, t_m: Nanos, ts: Nanos) -> CycleTiming {
        let sample = self.sample_cycle(k, t_m);
        let lost = classify_loss(sample.t_rr, t_m, self.timeout);
        self.record.push(lost);
        let (d_c3, t_a) = if lost {
            (None, None)
        } else if self.cfg.dilation {
            let (d, t) = dilate_actuation(t_m, sample.t_rr, ts).expect("timeout < Ts guarantees a positive wait");
            (Some(d), Some(t))
        } else {
            (Some(Nanos(0)), sample.t_rr)
        };
        CycleTiming { k, t_m, t_rh: sample.t_rh, t_rr: sample.t_rr, d_c3, t_a, lost }
    }
}
