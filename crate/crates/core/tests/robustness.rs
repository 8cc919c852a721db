use std::path::Path;

use twipr_core::sim::{aggregate_trials, flags, run_in_process, run_trials, Lift};
use twipr_core::{load_scenario, Mode, NoiseConfig, Scenario, Trace};

fn shipped(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    load_scenario(&path).unwrap()
}

fn with_drops(scn: &Scenario, trial: usize, first_offset: u64, count: u64) -> Trace {
    let design = scn.design().unwrap();
    let clean = run_in_process(scn, &design, trial, |_| None).unwrap();
    let r = clean.release.expect("loop closes");
    let mut hit = scn.clone();
    hit.channel.forced_drops = (r + first_offset..r + first_offset + count).collect();
    run_in_process(&hit, &design, trial, |_| None).unwrap()
}

/// Largest closed-loop pitch; the lift starts at 0.3 rad by construction.
fn max_pitch(t: &Trace) -> f64 {
    let r = t.release.unwrap_or(0) as usize;
    t.rows[r..].iter().map(|r| r.x_true.theta().abs()).fold(0.0, f64::max)
}

#[test]
fn three_losses_at_release_stay_upright() {
    let mut scn = shipped("networked_tracking");
    scn.duration = 4.0;
    // Only the forced burst, so that it alone decides the degraded flag.
    scn.channel.loss = twipr_core::LossModel::None;
    for trial in 0..3 {
        let t = with_drops(&scn, trial, 0, 3);
        assert!(!t.fallen);
        assert!(max_pitch(&t) < 0.3, "trial {trial}: {}", max_pitch(&t));
        assert!(t.rows.iter().all(|r| r.flags & flags::DEGRADED == 0));
    }
}

#[test]
fn four_losses_exhaust_the_horizon() {
    let mut scn = shipped("networked_tracking");
    scn.duration = 4.0;
    let t = with_drops(&scn, 0, 0, 4);
    assert!(t.fallen || t.rows.iter().any(|r| r.flags & flags::DEGRADED != 0));
}

#[test]
fn noise_free_local_tracking_pitch_error() {
    let mut scn = shipped("local_tracking");
    scn.noise = NoiseConfig::noiseless();
    scn.trials = 1;
    let t = run_trials(&scn).unwrap().remove(0);
    let r = t.rmse().unwrap().unwrap();
    assert!(r.theta < 0.02, "RMSE_theta {}", r.theta);
}

#[test]
fn ten_trial_mean_inside_envelope() {
    let scn = shipped("networked_tracking");
    let reports: Vec<_> = run_trials(&scn).unwrap().iter().filter_map(|t| t.rmse()).collect::<Result<_, _>>().unwrap();
    assert_eq!(reports.len(), 10, "no trial may fall");
    let agg = aggregate_trials(&reports).unwrap();
    for (i, mean) in [agg.phi, agg.theta, agg.gamma].into_iter().enumerate() {
        let lo = agg.trials.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min);
        let hi = agg.trials.iter().map(|t| t[i]).fold(0.0, f64::max);
        assert!(lo <= mean && mean <= hi);
    }
}

#[test]
fn lift_release_is_shared_by_both_modes() {
    let mut local = shipped("local_tracking");
    local.duration = 1.0;
    local.lift = Some(Lift::default());
    let net = Scenario { mode: Mode::Networked, ..local.clone() };
    let a = run_trials(&local).unwrap().remove(0);
    let b = run_trials(&net).unwrap().remove(0);
    assert_eq!(a.release, b.release);
    assert!(a.release.is_some());
}
