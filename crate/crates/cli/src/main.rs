mod report;

use std::fmt;
use std::fs;
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use twipr_core::config::resolve_scenario;
use twipr_core::sim::{flags, run_trial};
use twipr_core::wire::deploy::{controller_node, emulator_node, robot_node};
use twipr_core::wire::protocol_description;
use twipr_core::{load_scenario, DelayModel, LossModel, Mode, Scenario, Trace};

use report::SweepPoint;

/// Typed failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub const CONFIG: u8 = 1;
    pub const ALL_FALLEN: u8 = 2;
    pub const IO: u8 = 3;

    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: Self::IO, msg: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<twipr_core::Error> for CliError {
    fn from(e: twipr_core::Error) -> Self {
        let code = match e {
            twipr_core::Error::Io(_) => Self::IO,
            twipr_core::Error::Diverged => Self::ALL_FALLEN,
            _ => Self::CONFIG,
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "twipr", version, about = "Networked balancing-robot co-simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario name (looked up in ./scenarios) or path to a TOML file.
    #[arg(long, short)]
    scenario: String,
    /// Override the scenario's mode: local, networked or networked-over-wire.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepParam {
    /// Bernoulli loss probability (replaces the scenario's loss model).
    LossRate,
    /// Constant downlink delay [s].
    Delay,
    /// Prediction horizon M.
    #[value(name = "M", alias = "horizon")]
    Horizon,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    Robot,
    Emulator,
    Controller,
}

#[derive(Subcommand)]
enum Command {
    /// Run all trials of a scenario and write traces, RMSE and a summary.
    Run {
        #[command(flatten)]
        scn: ScenarioArgs,
        /// Output directory [default: out/<scenario>].
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Side-by-side RMSE of a local and a networked run.
    Compare {
        /// rmse.csv of the local run (or its output directory).
        local: PathBuf,
        /// rmse.csv of the networked run (or its output directory).
        networked: PathBuf,
    },
    /// Aggregated RMSE and fall rate over a parameter grid.
    Sweep {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Cycles (counted from the first sensor read) whose control packet
        /// is always dropped.
        #[arg(long, value_delimiter = ',')]
        drops: Vec<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the datagram layouts.
    ProtocolDump,
    /// Run one endpoint of the UDP deployment; needs fixed `wire.ports`.
    Node {
        #[arg(value_enum)]
        role: Role,
        #[arg(long, short)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Robot only: directory for the trace.
        #[arg(long, short, default_value = "out/node")]
        out: PathBuf,
    },
}

fn search_dirs() -> Vec<PathBuf> {
    let mut dirs = vec![PathBuf::from("scenarios")];
    if let Some(d) = std::env::var_os("TWIPR_SCENARIOS") {
        dirs.push(d.into());
    }
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"));
    dirs
}

fn load(args: &ScenarioArgs) -> Result<Scenario, CliError> {
    let path = resolve_scenario(&args.scenario, &search_dirs())
        .ok_or_else(|| CliError::config(format!("scenario `{}` not found (looked in ./scenarios and $TWIPR_SCENARIOS)", args.scenario)))?;
    let mut scn = load_scenario(&path)?;
    if scn.name == Scenario::default().name {
        scn.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    if let Some(m) = args.mode {
        scn.mode = m;
    }
    if let Some(s) = args.seed {
        scn.seed = s;
    }
    if let Some(t) = args.trials {
        scn.trials = t;
    }
    scn.validate()?;
    Ok(scn)
}

/// Trials in parallel, except wire runs bound to fixed ports.
fn run_all(scn: &Scenario) -> Result<Vec<Trace>, CliError> {
    let design = scn.design()?;
    let fixed_ports = scn.mode == Mode::NetworkedOverWire && scn.wire.ports.iter().any(|&p| p != 0);
    let traces: Result<Vec<Trace>, _> = if fixed_ports {
        (0..scn.trials).map(|i| run_trial(scn, &design, i)).collect()
    } else {
        (0..scn.trials).into_par_iter().map(|i| run_trial(scn, &design, i)).collect()
    };
    Ok(traces?)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn cmd_run(args: &ScenarioArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let scn = load(args)?;
    let out = out.unwrap_or_else(|| Path::new("out").join(&scn.name));
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let traces = run_all(&scn)?;
    for (i, t) in traces.iter().enumerate() {
        write(&out.join(format!("trace_{i:03}.csv")), &t.to_csv_string())?;
    }
    write(&out.join("gain.txt"), &scn.design()?.lqr.gain_to_text())?;
    let agg = report::aggregate(&traces)?;
    let mode = scn.mode.as_str();
    let summary = report::summary_table(&scn.name, mode, &traces, agg.as_ref());
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    match agg {
        Some(a) => write(&out.join("rmse.csv"), &report::rmse_csv(&scn.name, mode, &traces, &a)),
        None => Err(CliError { code: CliError::ALL_FALLEN, msg: format!("all {} trials fell", traces.len()) }),
    }
}

fn rmse_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("rmse.csv")
    } else {
        p
    }
}

fn cmd_compare(local: PathBuf, networked: PathBuf) -> Result<(), CliError> {
    let l = report::read_rmse(&rmse_path(local))?;
    let n = report::read_rmse(&rmse_path(networked))?;
    println!("{} ({}) vs {} ({}), window {} cycles", l.scenario, l.mode, n.scenario, n.mode, l.window);
    print!("{}", report::compare_table(&l, &n)?);
    Ok(())
}

fn cmd_sweep(args: &ScenarioArgs, param: SweepParam, values: &[f64], drops: &[u64], out: Option<PathBuf>) -> Result<(), CliError> {
    let base = load(args)?;
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut scn = base.clone();
        scn.channel.forced_drops.extend_from_slice(drops);
        match param {
            SweepParam::LossRate => scn.channel.loss = LossModel::Bernoulli { p: v },
            SweepParam::Delay => scn.channel.downlink = DelayModel::Constant { value: v },
            SweepParam::Horizon => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(CliError::config(format!("M must be a non-negative integer, got {v}")));
                }
                scn.horizon = v as usize;
            }
        }
        scn.validate()?;
        let traces = run_all(&scn)?;
        let agg = report::aggregate(&traces)?;
        let cycles: usize = traces.iter().map(|t| t.rows.len()).sum();
        let lost = traces.iter().flat_map(|t| &t.rows).filter(|r| r.lost).count();
        points.push(SweepPoint {
            value: v,
            trials: traces.len(),
            falls: traces.iter().filter(|t| t.fallen).count(),
            loss_rate: lost as f64 / cycles.max(1) as f64,
            degraded_cycles: traces.iter().flat_map(|t| &t.rows).filter(|r| r.flags & flags::DEGRADED != 0).count(),
            rmse: agg.map(|a| [a.phi, a.theta, a.gamma]),
        });
    }
    let name = match param {
        SweepParam::LossRate => "loss-rate",
        SweepParam::Delay => "delay",
        SweepParam::Horizon => "M",
    };
    let csv = report::sweep_csv(&base.name, name, &points);
    match out {
        Some(p) => write(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_node(role: Role, scenario: &str, trial: usize, out: &Path) -> Result<(), CliError> {
    let scn = load(&ScenarioArgs { scenario: scenario.into(), mode: Some(Mode::NetworkedOverWire), seed: None, trials: None })?;
    let [p_robot, p_emu_r, p_emu_c, p_ctrl] = scn.wire.ports;
    if scn.wire.ports.contains(&0) {
        return Err(CliError::config("node mode needs all four `wire.ports` set"));
    }
    let addr = |p: u16| SocketAddr::from(([127, 0, 0, 1], p));
    let bind = |p: u16| UdpSocket::bind(addr(p)).map_err(|e| CliError { code: CliError::IO, msg: format!("bind {}: {e}", addr(p)) });
    let design = scn.design()?;
    match role {
        Role::Controller => {
            let stats = controller_node(&bind(p_ctrl)?, addr(p_emu_c), &scn, &design)?;
            eprintln!("controller: {stats:?}");
        }
        Role::Emulator => {
            let stats = emulator_node(&bind(p_emu_r)?, &bind(p_emu_c)?, addr(p_robot), addr(p_ctrl), &scn, scn.trial_seed(trial))?;
            eprintln!("emulator: {stats:?}");
        }
        Role::Robot => {
            let (trace, stats) = robot_node(&bind(p_robot)?, addr(p_emu_r), &scn, &design, trial)?;
            fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
            write(&out.join(format!("trace_{trial:03}.csv")), &trace.to_csv_string())?;
            eprintln!("robot: {stats:?}, {} cycles, fallen {}", trace.rows.len(), trace.fallen);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scn, out } => cmd_run(&scn, out),
        Command::Compare { local, networked } => cmd_compare(local, networked),
        Command::Sweep { scn, param, values, drops, out } => cmd_sweep(&scn, param, &values, &drops, out),
        Command::ProtocolDump => {
            print!("{}", protocol_description());
            Ok(())
        }
        Command::Node { role, scenario, trial, out } => cmd_node(role, &scenario, trial, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
