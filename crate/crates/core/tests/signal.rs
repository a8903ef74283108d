use std::collections::BTreeSet;

use permex::engine::{run_simulation, ParticleCount, SimulationConfig, TagFilter, TrajectoryStore, DEFAULT_TRANSIT_CONSTANT};
use permex::sequence::{
    bootstrap_nmse, q_of_b, read_signal_csv, synthesize_signal, write_signal_csv, PgseProtocol, PhaseTable,
};
use permex::substrate::Substrate;
use permex::Execution;
use proptest::prelude::*;

fn protocol() -> PgseProtocol {
    PgseProtocol::new(vec![8.0, 12.0], 3.0, vec![0.25, 0.5, 1.0], 6).unwrap()
}

fn free_walk(n: usize) -> TrajectoryStore {
    let cfg = SimulationConfig {
        d_intra0: 2.0,
        d_extra0: 2.0,
        kappa: 0.0,
        dt: 0.005,
        duration: 15.0,
        particles: ParticleCount::Count(n),
        seed: 5,
        record_stride: 100,
        transit_constant: DEFAULT_TRANSIT_CONSTANT,
    };
    run_simulation(&Substrate::empty(30.0).unwrap(), &cfg, &cfg.regular_sample_times(), Execution::Parallel).unwrap()
}

#[test]
fn free_diffusion_signal_is_gaussian() {
    let st = free_walk(20_000);
    let proto = protocol();
    let table = PhaseTable::build(&st, &proto, TagFilter::All, Execution::Parallel).unwrap();
    let mut set = table.signal(&proto, Execution::Parallel).unwrap();
    bootstrap_nmse(&table, &proto, 100, 1, Execution::Parallel).unwrap().attach(&mut set);
    let rel = set.mean_sqrt_nmse.clone().unwrap();
    let nd = proto.deltas.len();
    for (bi, &b) in proto.b_values.iter().enumerate() {
        for di in 0..nd {
            let s = set.mean(bi, di);
            let expect = (-b * 2.0f64).exp();
            // MC error plus the time discretisation of the pulses
            let tol = 4.0 * rel[bi * nd + di] * s + 2e-3;
            assert!((s - expect).abs() < tol, "b {b}, Δ {}: {s} vs {expect}", proto.deltas[di]);
        }
    }
}

#[test]
fn synthesis_does_not_depend_on_execution_mode() {
    let st = free_walk(500);
    let proto = protocol();
    let a = synthesize_signal(&st, &proto, TagFilter::All, Execution::Parallel).unwrap();
    let b = synthesize_signal(&st, &proto, TagFilter::All, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csv_covers_every_acquisition_once() {
    let st = free_walk(200);
    let proto = protocol();
    let set = synthesize_signal(&st, &proto, TagFilter::All, Execution::Parallel).unwrap();
    let mut buf = Vec::new();
    write_signal_csv(&set, &mut buf).unwrap();
    let mut r = csv::Reader::from_reader(buf.as_slice());
    let mut seen = BTreeSet::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let key: Vec<String> = (0..5).map(|i| rec[i].to_string()).collect();
        assert!(seen.insert(key), "duplicate row");
    }
    assert_eq!(seen.len(), proto.b_values.len() * proto.deltas.len() * proto.directions.len());
    let back = read_signal_csv(buf.as_slice()).unwrap();
    assert_eq!(back.values, set.values);
}

#[test]
fn bootstrap_error_shrinks_with_more_particles() {
    let st = free_walk(8000);
    let proto = protocol();
    let mut last = f64::INFINITY;
    for n in [500, 2000, 8000] {
        let sub = TrajectoryStore {
            sample_times: st.sample_times.clone(),
            n_particles: n,
            positions: st.positions[..n * st.n_samples() * 3].to_vec(),
            initial: st.initial[..n].to_vec(),
            intra_counts: vec![0; st.n_samples()],
        };
        let table = PhaseTable::build(&sub, &proto, TagFilter::All, Execution::Parallel).unwrap();
        let boot = bootstrap_nmse(&table, &proto, 100, 2, Execution::Parallel).unwrap();
        let mean: f64 = boot.nmse.iter().sum::<f64>() / boot.nmse.len() as f64;
        assert!(mean < last, "NMSE {mean} at {n} particles");
        last = mean;
    }
}

proptest! {
    #[test]
    fn wavenumber_reproduces_b(b in 0.0f64..10.0, big in 5.0f64..60.0, frac in 0.05f64..0.9) {
        let small = frac * big;
        let q = q_of_b(b, big, small).unwrap();
        prop_assert!((q * q * (big - small / 3.0) - b).abs() <= 1e-12 * b.max(1.0));
    }
}
