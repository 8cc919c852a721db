//! Datagram formats between robot and controller.
//!
//! Fixed little-endian layouts, each closed by a CRC-32 (IEEE) of all
//! preceding bytes. Decoding checks, in order: minimum length, checksum,
//! version, layout consistency and value finiteness.

pub mod deploy;

use thiserror::Error;

use crate::model::InputVector;
use crate::netctrl::ControlMatrix;

pub const PROTOCOL_VERSION: u8 = 1;
pub const MEASUREMENT_LEN: usize = 46;
/// Control packet length without the matrix data.
pub const CONTROL_OVERHEAD: usize = 19;
const CONTROL_HEADER: usize = 15;
/// Virtual-clock notice length (non-realtime emulation only).
pub const CLOCK_LEN: usize = 29;
/// Largest datagram accepted by receivers.
pub const MAX_DATAGRAM: usize = 1500;

/// Control packet flag: the controller has not closed the loop yet.
pub const FLAG_LOOP_OPEN: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("datagram truncated: {len} bytes, need at least {need}")]
    Truncated { len: usize, need: usize },
    #[error("corrupt datagram: {0}")]
    Corrupt(&'static str),
    #[error("protocol version {got}, expected {PROTOCOL_VERSION}")]
    VersionMismatch { got: u8 },
}

/// Robot to controller, once per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeasurementPacket {
    pub k: u64,
    pub t_m_us: u64,
    /// Gyro pitch rate with the calibrated bias removed [rad/s].
    pub theta_dot: f64,
    pub phi_ml: f64,
    pub phi_mr: f64,
    /// omega of the previous cycle, saturated at 255.
    pub omega_echo: u8,
}

/// Controller to robot: `M + 1` input columns, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPacket {
    pub origin: u64,
    pub flags: u8,
    /// Time the controller spent between receiving the measurement and
    /// sending this packet [us].
    pub compute_us: u32,
    pub columns: Vec<InputVector>,
}

impl ControlPacket {
    pub fn from_matrix(m: &ControlMatrix, flags: u8, compute_us: u32) -> Self {
        Self { origin: m.origin, flags, compute_us, columns: m.columns.clone() }
    }

    pub fn into_matrix(self) -> ControlMatrix {
        ControlMatrix { origin: self.origin, columns: self.columns }
    }

    pub fn horizon(&self) -> usize {
        self.columns.len() - 1
    }
}

pub fn control_len(horizon: usize) -> usize {
    CONTROL_OVERHEAD + 16 * (horizon + 1)
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn check_crc(buf: &[u8]) -> Result<(), WireError> {
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(WireError::Corrupt("checksum mismatch"));
    }
    if body[0] != PROTOCOL_VERSION {
        return Err(WireError::VersionMismatch { got: body[0] });
    }
    Ok(())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> Result<f64, WireError> {
    let v = f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"));
    if v.is_finite() {
        Ok(v)
    } else {
        Err(WireError::Corrupt("non-finite value"))
    }
}

impl MeasurementPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(MEASUREMENT_LEN);
        b.push(PROTOCOL_VERSION);
        b.extend_from_slice(&self.k.to_le_bytes());
        b.extend_from_slice(&self.t_m_us.to_le_bytes());
        for v in [self.theta_dot, self.phi_ml, self.phi_mr] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.omega_echo);
        seal(b)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < MEASUREMENT_LEN {
            return Err(WireError::Truncated { len: buf.len(), need: MEASUREMENT_LEN });
        }
        if buf.len() > MEASUREMENT_LEN {
            return Err(WireError::Corrupt("trailing bytes"));
        }
        check_crc(buf)?;
        Ok(Self {
            k: u64_at(buf, 1),
            t_m_us: u64_at(buf, 9),
            theta_dot: f64_at(buf, 17)?,
            phi_ml: f64_at(buf, 25)?,
            phi_mr: f64_at(buf, 33)?,
            omega_echo: buf[41],
        })
    }
}

impl ControlPacket {
    /// Panics if there are no columns or more than 256.
    pub fn encode(&self) -> Vec<u8> {
        let m = self.horizon();
        assert!(m <= u8::MAX as usize, "horizon does not fit the M byte");
        let mut b = Vec::with_capacity(control_len(m));
        b.push(PROTOCOL_VERSION);
        b.extend_from_slice(&self.origin.to_le_bytes());
        b.push(m as u8);
        b.push(self.flags);
        b.extend_from_slice(&self.compute_us.to_le_bytes());
        for c in &self.columns {
            b.extend_from_slice(&c.left().to_le_bytes());
            b.extend_from_slice(&c.right().to_le_bytes());
        }
        seal(b)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let min = control_len(0);
        if buf.len() < min {
            return Err(WireError::Truncated { len: buf.len(), need: min });
        }
        check_crc(buf)?;
        let m = buf[9] as usize;
        if buf.len() != control_len(m) {
            return Err(WireError::Corrupt("length does not match M"));
        }
        let columns = (0..=m)
            .map(|i| {
                let at = CONTROL_HEADER + 16 * i;
                Ok(InputVector::new(f64_at(buf, at)?, f64_at(buf, at + 8)?))
            })
            .collect::<Result<Vec<_>, WireError>>()?;
        Ok(Self {
            origin: u64_at(buf, 1),
            flags: buf[10],
            compute_us: u32::from_le_bytes(buf[11..15].try_into().expect("4 bytes")),
            columns,
        })
    }
}

/// Sent by the channel emulator to the robot when it runs on virtual time:
/// cycle `k` is settled, any control packet for `k` arriving afterwards is
/// late. Carries the scheduled hand-over and arrival instants [ns].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClockPacket {
    pub k: u64,
    pub t_rh_ns: Option<u64>,
    pub t_rr_ns: Option<u64>,
}

const NONE_NS: u64 = u64::MAX;

impl ClockPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(CLOCK_LEN);
        b.push(PROTOCOL_VERSION);
        b.extend_from_slice(&self.k.to_le_bytes());
        b.extend_from_slice(&self.t_rh_ns.unwrap_or(NONE_NS).to_le_bytes());
        b.extend_from_slice(&self.t_rr_ns.unwrap_or(NONE_NS).to_le_bytes());
        seal(b)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < CLOCK_LEN {
            return Err(WireError::Truncated { len: buf.len(), need: CLOCK_LEN });
        }
        if buf.len() > CLOCK_LEN {
            return Err(WireError::Corrupt("trailing bytes"));
        }
        check_crc(buf)?;
        let opt = |v: u64| (v != NONE_NS).then_some(v);
        Ok(Self { k: u64_at(buf, 1), t_rh_ns: opt(u64_at(buf, 9)), t_rr_ns: opt(u64_at(buf, 17)) })
    }
}

/// What the robot can receive.
#[derive(Debug, Clone, PartialEq)]
pub enum Downlink {
    Control(ControlPacket),
    Clock(ClockPacket),
}

/// Dispatches on length: clock notices are shorter than any control packet.
pub fn decode_downlink(buf: &[u8]) -> Result<Downlink, WireError> {
    if buf.len() == CLOCK_LEN {
        ClockPacket::decode(buf).map(Downlink::Clock)
    } else {
        ControlPacket::decode(buf).map(Downlink::Control)
    }
}

/// Human-readable byte layouts.
pub fn protocol_description() -> String {
    let mut s = String::new();
    s.push_str(&format!("protocol version {PROTOCOL_VERSION}, little-endian, CRC-32 (IEEE) over all preceding bytes\n\n"));
    s.push_str(&format!("MeasurementPacket ({MEASUREMENT_LEN} bytes)\n"));
    for (off, len, name) in [
        (0, 1, "version (u8)"),
        (1, 8, "k (u64)"),
        (9, 8, "t_m [us] (u64)"),
        (17, 8, "theta_dot, bias removed [rad/s] (f64)"),
        (25, 8, "phi_ml encoder [rad] (f64)"),
        (33, 8, "phi_mr encoder [rad] (f64)"),
        (41, 1, "omega echo of previous cycle (u8)"),
        (42, 4, "crc32 (u32)"),
    ] {
        s.push_str(&format!("  {off:>3}  {len:>2}  {name}\n"));
    }
    s.push_str(&format!("\nControlPacket ({CONTROL_OVERHEAD} + 16*(M+1) bytes; {} for M=3)\n", control_len(3)));
    for (off, len, name) in [
        ("0", "1", "version (u8)"),
        ("1", "8", "origin cycle k (u64)"),
        ("9", "1", "M (u8)"),
        ("10", "1", "flags (u8; bit0 = loop open)"),
        ("11", "4", "controller compute time [us] (u32)"),
        ("15", "16(M+1)", "columns: u_l, u_r per column (f64)"),
        ("15+16(M+1)", "4", "crc32 (u32)"),
    ] {
        s.push_str(&format!("  {off:>10}  {len:>7}  {name}\n"));
    }
    s.push_str(&format!("\nClockPacket ({CLOCK_LEN} bytes, emulator to robot, non-realtime only)\n"));
    for (off, len, name) in [
        (0, 1, "version (u8)"),
        (1, 8, "k (u64)"),
        (9, 8, "scheduled t_rh [ns] (u64; all ones = none)"),
        (17, 8, "scheduled t_rr [ns] (u64; all ones = none)"),
        (25, 4, "crc32 (u32)"),
    ] {
        s.push_str(&format!("  {off:>3}  {len:>2}  {name}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn control(m: usize) -> ControlPacket {
        ControlPacket {
            origin: 42,
            flags: 0,
            compute_us: 900,
            columns: (0..=m).map(|i| InputVector::new(i as f64 * 0.5, -(i as f64))).collect(),
        }
    }

    #[test]
    fn zero_measurement_round_trips() {
        let p = MeasurementPacket::default();
        let b = p.encode();
        assert_eq!(b.len(), MEASUREMENT_LEN);
        assert_eq!(MeasurementPacket::decode(&b), Ok(p));
    }

    #[test]
    fn control_length_formula() {
        assert_eq!(control(3).encode().len(), 83);
        for m in 0..8 {
            let p = control(m);
            let b = p.encode();
            assert_eq!(b.len(), control_len(m));
            assert_eq!(ControlPacket::decode(&b), Ok(p));
        }
    }

    #[test]
    fn bit_flips_are_corrupt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meas = MeasurementPacket { k: 9, t_m_us: 315_000, theta_dot: 0.1, phi_ml: -0.2, phi_mr: 0.3, omega_echo: 2 }.encode();
        let ctrl = control(3).encode();
        for _ in 0..100 {
            let mut b = meas.clone();
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
            assert!(matches!(MeasurementPacket::decode(&b), Err(WireError::Corrupt(_))));
            let mut b = ctrl.clone();
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
            assert!(matches!(ControlPacket::decode(&b), Err(WireError::Corrupt(_))));
        }
    }

    #[test]
    fn distinct_errors() {
        let b = control(3).encode();
        assert!(matches!(ControlPacket::decode(&b[..20]), Err(WireError::Truncated { .. })));
        assert!(matches!(MeasurementPacket::decode(&b[..45]), Err(WireError::Truncated { .. })));
        let mut v = MeasurementPacket::default().encode();
        v[0] = 2;
        let body = v.len() - 4;
        let crc = crc32fast::hash(&v[..body]);
        v[body..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(MeasurementPacket::decode(&v), Err(WireError::VersionMismatch { got: 2 }));
    }

    #[test]
    fn clock_round_trips_and_dispatches() {
        let c = ClockPacket { k: 7, t_rh_ns: Some(3), t_rr_ns: None };
        let b = c.encode();
        assert_eq!(b.len(), CLOCK_LEN);
        assert_eq!(decode_downlink(&b), Ok(Downlink::Clock(c)));
        assert_eq!(decode_downlink(&control(0).encode()), Ok(Downlink::Control(control(0))));
    }

    #[test]
    fn non_finite_rejected() {
        let p = MeasurementPacket { theta_dot: f64::NAN, ..Default::default() };
        assert!(matches!(MeasurementPacket::decode(&p.encode()), Err(WireError::Corrupt(_))));
    }
}
