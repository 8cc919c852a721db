//! Networked control of a two-wheeled inverted pendulum robot.
//!
//! The plant model, sensor reconstruction and LQR design live in [`model`],
//! [`estimation`] and [`lqr`]. [`channel`] models a lossy, delayed link,
//! [`netctrl`] the control-matrix compensation on both ends of it, [`sim`]
//! the closed-loop co-simulation and [`wire`] the datagram protocol with a
//! loopback deployment.

pub mod channel;
pub mod config;
pub mod error;
pub mod estimation;
pub mod lqr;
pub mod model;
pub mod netctrl;
pub mod sim;
pub mod wire;

pub use channel::{Channel, ChannelConfig, CycleTiming, DelayModel, LossModel, Nanos};
pub use config::{load_scenario, parse_scenario, WeightSpec, WeightsConfig};
pub use error::{Error, Result};
pub use estimation::{GyroBias, NoiseConfig, SensorFrame};
pub use lqr::{LqrDesign, LqrWeights, ReferenceSpec, ReferenceTrajectory};
pub use model::{InputVector, LinearModel, RobotParams, StateVector};
pub use netctrl::{Actuation, ControlMatrix, Predictor, RobotBuffer};
pub use sim::{Design, Experiment, Mode, RmseReport, Scenario, Trace, TraceRow};
