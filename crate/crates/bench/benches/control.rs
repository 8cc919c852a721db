use criterion::{black_box, criterion_group, criterion_main, Criterion};
use twipr_core::lqr::lqr_gain;
use twipr_core::netctrl::{build_control_matrix_linear, build_control_matrix_nonlinear};
use twipr_core::sim::run_trial;
use twipr_core::wire::ControlPacket;
use twipr_core::{Actuation, InputVector, LinearModel, Mode, RobotParams, Scenario, StateVector};

fn design(c: &mut Criterion) {
    let scn = Scenario::default();
    let model = LinearModel::from_params(&scn.robot, scn.ts).unwrap();
    let w = scn.controller.to_weights().unwrap();
    c.bench_function("lqr_gain", |b| b.iter(|| lqr_gain(black_box(&model.ad), &model.bd, &w).unwrap()));
}

fn control_matrix(c: &mut Criterion) {
    let scn = Scenario::default();
    let d = scn.design().unwrap();
    let params = RobotParams::default();
    let x = StateVector::new(0.1, 0.02, 0.3, -0.1, 0.05, 0.0);
    let u = InputVector::new(0.5, -0.4);
    let refs: Vec<StateVector> = (0..=scn.horizon).map(|i| d.reference.at(100 + i)).collect();
    let mut g = c.benchmark_group("control_matrix_m3");
    g.bench_function("linear", |b| {
        b.iter(|| {
            build_control_matrix_linear(7, black_box(&x), &u, &d.lqr.k, &d.model, scn.backlash, &refs, params.v_max, Actuation::Dilated)
                .unwrap()
        })
    });
    g.bench_function("nonlinear", |b| {
        b.iter(|| {
            build_control_matrix_nonlinear(7, black_box(&x), &u, &d.lqr.k, &params, scn.ts, scn.n_sub, &refs, Actuation::Dilated).unwrap()
        })
    });
    g.finish();
}

fn wire(c: &mut Criterion) {
    let pkt = ControlPacket { origin: 42, flags: 0, compute_us: 120, columns: vec![InputVector::new(1.0, -1.0); 4] };
    let bytes = pkt.encode();
    c.bench_function("control_packet_roundtrip", |b| b.iter(|| ControlPacket::decode(black_box(&pkt.encode())).unwrap()));
    c.bench_function("control_packet_decode", |b| b.iter(|| ControlPacket::decode(black_box(&bytes)).unwrap()));
}

fn trial(c: &mut Criterion) {
    let mut g = c.benchmark_group("trial_2s");
    g.sample_size(20);
    for mode in [Mode::Local, Mode::Networked] {
        let scn = Scenario { mode, duration: 2.0, ..Scenario::default() };
        let d = scn.design().unwrap();
        g.bench_function(mode.as_str(), |b| b.iter(|| run_trial(&scn, &d, 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, design, control_matrix, wire, trial);
criterion_main!(benches);
