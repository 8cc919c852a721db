//! RMSE and sweep CSVs, and the plain-text tables printed to the terminal.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use twipr_core::sim::aggregate_trials;
use twipr_core::{RmseReport, Trace};

use crate::CliError;

pub const RMSE_FORMAT: &str = "twipr-rmse v1";
pub const SWEEP_FORMAT: &str = "twipr-sweep v1";

/// One trial's line in `rmse.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RmseRow {
    pub trial: String,
    pub seed: String,
    pub release: String,
    pub fallen: u8,
    pub rmse_phi: f64,
    pub rmse_theta: f64,
    pub rmse_gamma: f64,
}

/// Contents of an `rmse.csv`: header metadata plus the mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseFile {
    pub scenario: String,
    pub mode: String,
    pub window: usize,
    pub mean: [f64; 3],
}

/// Aggregate of the non-fallen trials; `None` when every trial fell.
pub fn aggregate(traces: &[Trace]) -> Result<Option<RmseReport>, CliError> {
    let reports: Vec<RmseReport> = traces.iter().filter_map(Trace::rmse).collect::<Result<_, _>>()?;
    if reports.is_empty() {
        return Ok(None);
    }
    Ok(Some(aggregate_trials(&reports)?))
}

pub fn rmse_csv(scenario: &str, mode: &str, traces: &[Trace], agg: &RmseReport) -> String {
    let mut s = format!("# {RMSE_FORMAT} scenario={scenario} mode={mode} window={}\n", agg.window_len());
    s.push_str("trial,seed,release,fallen,rmse_phi,rmse_theta,rmse_gamma\n");
    for (i, t) in traces.iter().enumerate() {
        let release = t.release.map(|r| r.to_string()).unwrap_or_default();
        match t.rmse() {
            Some(Ok(r)) => {
                let _ = writeln!(s, "{i},{},{release},0,{},{},{}", t.seed, r.phi, r.theta, r.gamma);
            }
            _ => {
                let _ = writeln!(s, "{i},{},{release},1,NaN,NaN,NaN", t.seed);
            }
        }
    }
    let _ = writeln!(s, "mean,,,0,{},{},{}", agg.phi, agg.theta, agg.gamma);
    s
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    header.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

pub fn read_rmse(path: &Path) -> Result<RmseFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: &str| CliError::config(format!("{}: {msg}", path.display()));
    let first = text.lines().next().unwrap_or_default();
    if !first.starts_with(&format!("# {RMSE_FORMAT}")) {
        return Err(bad(&format!("not a {RMSE_FORMAT} file")));
    }
    let window = header_value(first, "window").and_then(|w| w.parse().ok()).ok_or_else(|| bad("header lacks window="))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut mean = None;
    for row in rdr.deserialize::<RmseRow>() {
        let row = row.map_err(|e| bad(&e.to_string()))?;
        if row.trial == "mean" {
            mean = Some([row.rmse_phi, row.rmse_theta, row.rmse_gamma]);
        }
    }
    Ok(RmseFile {
        scenario: header_value(first, "scenario").unwrap_or("?").to_string(),
        mode: header_value(first, "mode").unwrap_or("?").to_string(),
        window,
        mean: mean.ok_or_else(|| bad("no mean row"))?,
    })
}

const LABELS: [&str; 3] = ["RMSE_Φ", "RMSE_Θ", "RMSE_γ"];

/// Per-scenario summary: mean and spread over the trials that stayed up.
pub fn summary_table(scenario: &str, mode: &str, traces: &[Trace], agg: Option<&RmseReport>) -> String {
    let falls = traces.iter().filter(|t| t.fallen).count();
    let lost: usize = traces.iter().map(|t| t.rows.iter().filter(|r| r.lost).count()).sum();
    let cycles: usize = traces.iter().map(|t| t.rows.len()).sum();
    let mut s = format!("scenario {scenario} ({mode}), {} trials, {falls} fallen\n", traces.len());
    if mode != "local" {
        let _ = writeln!(s, "packet loss {lost}/{cycles} cycles ({:.2}%)", 100.0 * lost as f64 / cycles.max(1) as f64);
    }
    match agg {
        None => s.push_str("no trial stayed up; no RMSE\n"),
        Some(a) => {
            let _ = writeln!(s, "window {} cycles after loop closure", a.window_len());
            let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10}", "", "mean", "min", "max");
            for (i, label) in LABELS.iter().enumerate() {
                let lo = a.trials.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min);
                let hi = a.trials.iter().map(|t| t[i]).fold(f64::NEG_INFINITY, f64::max);
                let mean = [a.phi, a.theta, a.gamma][i];
                let _ = writeln!(s, "{label:<8} {mean:>10.4} {lo:>10.4} {hi:>10.4}");
            }
        }
    }
    s
}

/// Local against networked, one row per state, with the NCS/local ratio.
pub fn compare_table(local: &RmseFile, ncs: &RmseFile) -> Result<String, CliError> {
    if local.window != ncs.window {
        return Err(CliError::config(format!("RMSE windows differ: {} vs {} cycles", local.window, ncs.window)));
    }
    let mut s = format!("{:<8} {:>10} {:>10} {:>8}\n", "", "Local", "NCS", "ratio");
    for (i, label) in LABELS.iter().enumerate() {
        let (l, n) = (local.mean[i], ncs.mean[i]);
        let _ = writeln!(s, "{label:<8} {l:>10.4} {n:>10.4} {:>8.3}", n / l);
    }
    Ok(s)
}

/// One sweep grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub trials: usize,
    pub falls: usize,
    pub loss_rate: f64,
    pub degraded_cycles: usize,
    pub rmse: Option<[f64; 3]>,
}

pub fn sweep_csv(scenario: &str, param: &str, points: &[SweepPoint]) -> String {
    let mut s = format!("# {SWEEP_FORMAT} scenario={scenario} param={param}\n");
    s.push_str("value,trials,falls,fall_rate,loss_rate,degraded_cycles,rmse_phi,rmse_theta,rmse_gamma\n");
    for p in points {
        let [a, b, c] = p.rmse.unwrap_or([f64::NAN; 3]);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{a},{b},{c}",
            p.value,
            p.trials,
            p.falls,
            p.falls as f64 / p.trials as f64,
            p.loss_rate,
            p.degraded_cycles
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(mean: [f64; 3]) -> RmseFile {
        RmseFile { scenario: "s".into(), mode: "m".into(), window: 400, mean }
    }

    #[test]
    fn identical_inputs_give_unit_ratios() {
        let t = compare_table(&file([2.0, 0.01, 0.08]), &file([2.0, 0.01, 0.08])).unwrap();
        assert_eq!(t.matches("1.000").count(), 3, "{t}");
    }

    #[test]
    fn ratio_rounds_to_three_decimals() {
        let t = compare_table(&file([2.4141, 0.0116, 0.0849]), &file([2.4512, 0.0192, 0.0888])).unwrap();
        let theta = t.lines().find(|l| l.starts_with("RMSE_Θ")).unwrap();
        assert!(theta.trim_end().ends_with("1.655"), "{theta}");
    }

    #[test]
    fn window_mismatch_rejected() {
        let other = RmseFile { window: 10, ..file([1.0; 3]) };
        assert!(compare_table(&file([1.0; 3]), &other).is_err());
    }

    #[test]
    fn header_lookup() {
        let h = "# twipr-rmse v1 scenario=a mode=local window=12";
        assert_eq!(header_value(h, "window"), Some("12"));
        assert_eq!(header_value(h, "mode"), Some("local"));
        assert_eq!(header_value(h, "missing"), None);
    }
}
