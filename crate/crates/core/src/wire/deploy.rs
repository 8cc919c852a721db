//! Robot, channel emulator and controller as separate UDP endpoints.
//!
//! The emulator sits between the two and applies the trial's channel schedule
//! (the same draws the in-process channel would make). In realtime mode it
//! delays datagrams on the wall clock and the robot applies its timeout on
//! the wall clock. Otherwise it runs on virtual time: packets move at once,
//! lost ones are discarded, and a [`ClockPacket`] tells the robot when a
//! cycle is settled.
//!
//! A zero-length datagram from the robot shuts the chain down.

use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::thread;
use std::time::{Duration, Instant};

use crate::channel::{Channel, CycleTiming, Nanos};
use crate::error::{Error, Result};
use crate::estimation::SensorFrame;
use crate::model::InputVector;
use crate::netctrl::Actuation;
use crate::sim::{cycle_flags, flags, ControllerSide, Design, Mode, RobotSide, Scenario, Trace, TraceRow};

use super::{decode_downlink, ClockPacket, ControlPacket, Downlink, MeasurementPacket, FLAG_LOOP_OPEN, MAX_DATAGRAM};

/// How long an endpoint waits for its peer before giving up.
const PEER_TIMEOUT: Duration = Duration::from_secs(5);

/// Counters kept by each endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub received: u64,
    pub sent: u64,
    pub rejected: u64,
    pub late: u64,
}

fn io(context: &str, e: std::io::Error) -> Error {
    Error::Io(format!("{context}: {e}"))
}

/// `Ok(None)` on timeout.
fn recv(sock: &UdpSocket, buf: &mut [u8], timeout: Duration) -> Result<Option<usize>> {
    sock.set_read_timeout(Some(timeout.max(Duration::from_micros(1)))).map_err(|e| io("set timeout", e))?;
    match sock.recv_from(buf) {
        Ok((n, _)) => Ok(Some(n)),
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(None),
        Err(e) => Err(io("recv", e)),
    }
}

fn send(sock: &UdpSocket, to: SocketAddr, bytes: &[u8]) -> Result<()> {
    sock.send_to(bytes, to).map(|_| ()).map_err(|e| io("send", e))
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

/// Controller endpoint: answers every measurement with a control packet.
pub fn controller_node(sock: &UdpSocket, emulator: SocketAddr, scn: &Scenario, design: &Design) -> Result<LinkStats> {
    let mut ctrl = ControllerSide::new(scn, design);
    let mut stats = LinkStats::default();
    let mut buf = [0u8; MAX_DATAGRAM];
    loop {
        let n = recv(sock, &mut buf, PEER_TIMEOUT)?.ok_or_else(|| Error::Io("controller: no data from emulator".into()))?;
        if n == 0 {
            return Ok(stats);
        }
        let started = Instant::now();
        let Ok(p) = MeasurementPacket::decode(&buf[..n]) else {
            stats.rejected += 1;
            continue;
        };
        stats.received += 1;
        let frame = SensorFrame { k: p.k, theta_dot_meas: p.theta_dot, phi_ml_meas: p.phi_ml, phi_mr_meas: p.phi_mr };
        let matrix = ctrl.on_frame(&frame, p.omega_echo)?;
        let flags = if ctrl.release.released_at().is_none() { FLAG_LOOP_OPEN } else { 0 };
        let compute = u32::try_from(started.elapsed().as_micros()).unwrap_or(u32::MAX);
        send(sock, emulator, &ControlPacket::from_matrix(&matrix, flags, compute).encode())?;
        stats.sent += 1;
    }
}

/// Channel emulator. `robot_side` talks to the robot, `ctrl_side` to the
/// controller.
pub fn emulator_node(
    robot_side: &UdpSocket,
    ctrl_side: &UdpSocket,
    robot: SocketAddr,
    controller: SocketAddr,
    scn: &Scenario,
    trial_seed: u64,
) -> Result<LinkStats> {
    let mut channel = Channel::new(scn.channel.clone(), trial_seed);
    let ts = Nanos::from_secs(scn.ts);
    let timeout = channel.timeout();
    let realtime = scn.wire.realtime;
    let mut stats = LinkStats::default();
    let mut next_k = 0u64;
    let mut buf = [0u8; MAX_DATAGRAM];
    let mut reply = [0u8; MAX_DATAGRAM];

    loop {
        let n = recv(robot_side, &mut buf, PEER_TIMEOUT)?.ok_or_else(|| Error::Io("emulator: no data from robot".into()))?;
        let rx = Instant::now();
        if n == 0 {
            send(ctrl_side, controller, &[])?;
            return Ok(stats);
        }
        let Ok(meas) = MeasurementPacket::decode(&buf[..n]) else {
            stats.rejected += 1;
            continue;
        };
        stats.received += 1;
        // Keep the schedule aligned with k even if a datagram went missing.
        let mut timing = None;
        while next_k <= meas.k {
            timing = Some(channel.cycle(next_k, Nanos(next_k * ts.0), ts));
            next_k += 1;
        }
        let Some(timing) = timing else { continue };
        let since_tm = |t: Nanos| Duration::from_nanos((t - timing.t_m).0);

        if realtime {
            sleep_until(rx + since_tm(timing.t_rh));
        }
        send(ctrl_side, controller, &buf[..n])?;

        let answer = loop {
            match recv(ctrl_side, &mut reply, PEER_TIMEOUT)? {
                None => break None,
                Some(m) => match ControlPacket::decode(&reply[..m]) {
                    Ok(p) if p.origin == meas.k => break Some(m),
                    _ => stats.rejected += 1,
                },
            }
        };

        let clock = ClockPacket { k: meas.k, t_rh_ns: Some(timing.t_rh.0), t_rr_ns: timing.t_rr.map(|t| t.0) };
        match (answer, timing.t_rr) {
            (Some(m), Some(t_rr)) => {
                let late = timing.lost;
                if realtime {
                    // Late packets still travel, but early enough not to
                    // collide with the next cycle.
                    let mut due = since_tm(t_rr);
                    if late {
                        due = due.min(Duration::from_nanos((timeout.0 + ts.0) / 2));
                    }
                    sleep_until(rx + due);
                } else if late {
                    send(robot_side, robot, &clock.encode())?;
                }
                send(robot_side, robot, &reply[..m])?;
                stats.sent += 1;
                if !realtime && !late {
                    send(robot_side, robot, &clock.encode())?;
                }
            }
            _ => {
                if !realtime {
                    send(robot_side, robot, &clock.encode())?;
                }
            }
        }
    }
}

/// Robot endpoint. Runs the plant and returns the trace.
pub fn robot_node(sock: &UdpSocket, emulator: SocketAddr, scn: &Scenario, design: &Design, trial: usize) -> Result<(Trace, LinkStats)> {
    let seed = scn.trial_seed(trial);
    let mut robot = RobotSide::new(scn, design, seed)?;
    let ts = Nanos::from_secs(scn.ts);
    let timeout = Nanos::from_secs(scn.channel.timeout);
    let realtime = scn.wire.realtime;
    let dilated = scn.actuation() == Actuation::Dilated;
    let mut stats = LinkStats::default();
    let mut rows = Vec::new();
    let mut fallen = false;
    let mut buf = [0u8; MAX_DATAGRAM];
    let start = Instant::now();

    let result = (|| -> Result<()> {
        for k in 0u64.. {
            let t_m = Nanos(k * ts.0);
            let wall_tm = start + Duration::from_nanos(t_m.0);
            let mut flags = 0;
            if realtime {
                sleep_until(wall_tm);
                if Instant::now() > wall_tm + Duration::from_nanos(timeout.0) {
                    flags |= flags::DEADLINE_MISS;
                }
            }
            let meas = robot.measure(k)?;
            let release = robot.released_at();
            let x_ref = release.map(|r| design.reference.at((k - r) as usize)).unwrap_or_default();
            if release.is_none() {
                flags |= flags::LOOP_OPEN;
            }
            let packet = MeasurementPacket {
                k,
                t_m_us: t_m.as_micros(),
                theta_dot: meas.frame.theta_dot_meas,
                phi_ml: meas.frame.phi_ml_meas,
                phi_mr: meas.frame.phi_mr_meas,
                omega_echo: robot.buffer.omega_echo(),
            };
            send(sock, emulator, &packet.encode())?;
            // Reference point for observed arrival times.
            let sent_at = Instant::now();

            let mut arrival: Option<(ControlPacket, Nanos)> = None;
            let mut t_rh = None;
            let mut t_rr_late = None;
            if realtime {
                let deadline = sent_at + Duration::from_nanos(timeout.0);
                while arrival.is_none() {
                    let now = Instant::now();
                    if now >= deadline {
                        break;
                    }
                    let Some(n) = recv(sock, &mut buf, deadline - now)? else { break };
                    match decode_downlink(&buf[..n]) {
                        Ok(Downlink::Control(p)) if p.origin == k => {
                            let rr = Nanos(sent_at.elapsed().as_nanos() as u64);
                            arrival = Some((p, t_m + rr));
                        }
                        Ok(Downlink::Control(_)) => stats.late += 1,
                        Ok(Downlink::Clock(_)) => {}
                        Err(_) => stats.rejected += 1,
                    }
                }
            } else {
                let mut pending = None;
                loop {
                    let n = recv(sock, &mut buf, PEER_TIMEOUT)?.ok_or_else(|| Error::Io(format!("robot: cycle {k} never settled")))?;
                    match decode_downlink(&buf[..n]) {
                        Ok(Downlink::Control(p)) if p.origin == k => pending = Some(p),
                        Ok(Downlink::Control(_)) => stats.late += 1,
                        Ok(Downlink::Clock(c)) if c.k == k => {
                            t_rh = c.t_rh_ns.map(Nanos);
                            match (pending.take(), c.t_rr_ns) {
                                (Some(p), Some(rr)) => arrival = Some((p, Nanos(rr))),
                                (_, rr) => t_rr_late = rr.map(Nanos),
                            }
                            break;
                        }
                        Ok(Downlink::Clock(_)) => {}
                        Err(_) => stats.rejected += 1,
                    }
                }
            }
            if arrival.is_some() {
                stats.received += 1;
            }
            if let Some((p, _)) = &arrival {
                if p.horizon() != scn.horizon {
                    return Err(Error::Config(format!("controller horizon {} does not match {}", p.horizon(), scn.horizon)));
                }
            }

            let lost = arrival.is_none();
            let t_rr = arrival.as_ref().map(|(_, t)| *t);
            let t_a = match (t_rr, dilated) {
                (None, _) => None,
                (Some(_), true) => Some(t_m + ts),
                (Some(t), false) => Some(t),
            };
            let timing = CycleTiming { k, t_m, t_rh: t_rh.unwrap_or(t_m), t_rr, d_c3: t_a.map(|a| a - t_rr.unwrap_or(a)), t_a, lost };
            let out = robot.buffer.step(arrival.map(|(p, _)| p.into_matrix()));
            flags |= cycle_flags(&timing, &out);
            let u = if release.is_some() { out.input } else { InputVector::zeros() };
            let switch = if dilated { None } else { Some((t_a.unwrap_or(t_m + timeout) - t_m).as_secs()) };
            let fell = robot.advance(u, switch)?;
            if fell {
                flags |= flags::FALLEN;
            }
            rows.push(TraceRow {
                k,
                t_m,
                t_rh,
                t_rr: t_rr.or(t_rr_late),
                t_a,
                x_true: meas.x_true,
                x_meas: meas.x_meas,
                x_ref,
                u,
                lost,
                omega: out.omega,
                flags,
            });
            if fell {
                fallen = true;
                return Ok(());
            }
            if let Some(r) = release {
                if (k - r + 1) as usize >= scn.cycles() {
                    return Ok(());
                }
            }
        }
        Ok(())
    })();
    // Always release the other endpoints, even on error.
    let _ = send(sock, emulator, &[]);
    result?;

    let trace = Trace {
        scenario: scn.name.clone(),
        mode: Mode::NetworkedOverWire,
        seed,
        config_crc: scn.config_crc(),
        release: robot.released_at(),
        cycles: scn.cycles(),
        fallen,
        rows,
        sent: Vec::new(),
    };
    Ok((trace, stats))
}

fn bind(port: u16) -> Result<UdpSocket> {
    UdpSocket::bind(("127.0.0.1", port)).map_err(|e| io(&format!("bind 127.0.0.1:{port}"), e))
}

fn local(sock: &UdpSocket) -> Result<SocketAddr> {
    sock.local_addr().map_err(|e| io("local address", e))
}

/// Runs the three endpoints on loopback threads and returns the robot trace.
pub fn run_wire_deployment(scn: &Scenario, design: &Design, trial: usize) -> Result<Trace> {
    let [p_robot, p_emu_r, p_emu_c, p_ctrl] = scn.wire.ports;
    let robot_sock = bind(p_robot)?;
    let emu_r = bind(p_emu_r)?;
    let emu_c = bind(p_emu_c)?;
    let ctrl_sock = bind(p_ctrl)?;
    let (robot_addr, emu_r_addr, emu_c_addr, ctrl_addr) = (local(&robot_sock)?, local(&emu_r)?, local(&emu_c)?, local(&ctrl_sock)?);
    let seed = scn.trial_seed(trial);

    thread::scope(|s| {
        let ctrl = s.spawn(|| controller_node(&ctrl_sock, emu_c_addr, scn, design));
        let emu = s.spawn(|| emulator_node(&emu_r, &emu_c, robot_addr, ctrl_addr, scn, seed));
        let robot = robot_node(&robot_sock, emu_r_addr, scn, design, trial);
        let emu = emu.join().map_err(|_| Error::Io("emulator thread panicked".into()))?;
        let ctrl = ctrl.join().map_err(|_| Error::Io("controller thread panicked".into()))?;
        let (trace, _) = robot?;
        emu?;
        ctrl?;
        Ok(trace)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelConfig, DelayModel, LossModel};
    use crate::sim::{run_in_process, Experiment, Lift};

    fn scenario(realtime: bool) -> Scenario {
        let mut scn = Scenario {
            mode: Mode::NetworkedOverWire,
            experiment: Experiment::Stabilization,
            duration: 1.0,
            lift: Some(Lift::default()),
            ..Scenario::default()
        };
        scn.channel = ChannelConfig {
            uplink: DelayModel::Constant { value: 0.002 },
            downlink: DelayModel::Constant { value: 0.004 },
            loss: LossModel::Bernoulli { p: 0.15 },
            ..ChannelConfig::default()
        };
        scn.wire.realtime = realtime;
        scn
    }

    #[test]
    fn virtual_time_matches_in_process() {
        let scn = scenario(false);
        let design = scn.design().unwrap();
        let wire = run_wire_deployment(&scn, &design, 0).unwrap();
        let mut local = scn.clone();
        local.mode = Mode::Networked;
        let sim = run_in_process(&local, &design, 0, |_| None).unwrap();
        assert!(wire.rows.iter().any(|r| r.lost), "schedule should lose packets");
        assert_eq!(wire.rows.len(), sim.rows.len());
        for (a, b) in wire.rows.iter().zip(&sim.rows) {
            assert_eq!((a.lost, a.omega), (b.lost, b.omega), "cycle {}", a.k);
            assert_eq!((a.t_rh, a.t_rr, a.t_a), (b.t_rh, b.t_rr, b.t_a), "cycle {}", a.k);
            assert!((a.x_true.0 - b.x_true.0).amax() <= 1e-9, "cycle {}", a.k);
        }
    }

    #[test]
    fn realtime_run_stays_up() {
        let mut scn = scenario(true);
        scn.channel.loss = LossModel::None;
        scn.lift = Some(Lift { duration: 0.3, ..Lift::default() });
        scn.duration = 0.5;
        let design = scn.design().unwrap();
        let wire = run_wire_deployment(&scn, &design, 0).unwrap();
        assert!(!wire.fallen);
        let closed: Vec<_> = wire.rows.iter().filter(|r| r.flags & flags::LOOP_OPEN == 0).collect();
        let delivered = closed.iter().filter(|r| !r.lost).count();
        // 6 ms of scheduled round trip against a 30 ms timeout.
        assert!(delivered * 10 >= closed.len() * 9, "{delivered}/{}", closed.len());
    }
}
