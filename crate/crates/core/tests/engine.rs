use permex::engine::{
    io::{load_trajectories, save_trajectories},
    run_simulation, transit_probability, ParticleCount, SimulationConfig,
    TagFilter, TrajectoryStore, DEFAULT_TRANSIT_CONSTANT, EXTRA,
};
use permex::substrate::{generate, Substrate};
use permex::Execution;
use proptest::prelude::*;

fn config(kappa: f64, n: usize, duration: f64) -> SimulationConfig {
    SimulationConfig {
        d_intra0: 2.0,
        d_extra0: 1.5,
        kappa,
        dt: 0.005,
        duration,
        particles: ParticleCount::Count(n),
        seed: 17,
        record_stride: 100,
        transit_constant: DEFAULT_TRANSIT_CONSTANT,
    }
}

fn substrate() -> Substrate {
    generate(14.0, 2.5, 0.025, 0.45, 4, 200_000).unwrap()
}

fn run(sub: &Substrate, cfg: &SimulationConfig, exec: Execution) -> TrajectoryStore {
    run_simulation(sub, cfg, &cfg.regular_sample_times(), exec).unwrap()
}

#[test]
fn parallel_and_sequential_runs_are_bit_identical() {
    let sub = substrate();
    let cfg = config(30.0, 600, 10.0);
    assert_eq!(run(&sub, &cfg, Execution::Parallel), run(&sub, &cfg, Execution::Sequential));
}

#[test]
fn smaller_run_is_a_prefix_of_a_larger_one() {
    let sub = substrate();
    let small = run(&sub, &config(30.0, 200, 10.0), Execution::Parallel);
    let big = run(&sub, &config(30.0, 500, 10.0), Execution::Parallel);
    let ns = small.n_samples();
    assert_eq!(small.positions, big.positions[..200 * ns * 3]);
    assert_eq!(small.initial, big.initial[..200]);
}

#[test]
fn free_diffusion_mean_squared_displacement() {
    let sub = Substrate::empty(20.0).unwrap();
    let mut cfg = config(0.0, 4000, 20.0);
    cfg.d_extra0 = 2.0;
    let st = run(&sub, &cfg, Execution::Parallel);
    let last = st.n_samples() - 1;
    let t = st.sample_times[last];
    let msd: f64 = (0..st.n_particles).map(|p| st.displacement(p, last).norm2()).sum::<f64>() / st.n_particles as f64;
    // r² of a 3D Gaussian has relative sd sqrt(2/3) per walker
    let tol = 4.0 * (2.0f64 / 3.0).sqrt() / (st.n_particles as f64).sqrt();
    assert!((msd / (6.0 * 2.0 * t) - 1.0).abs() < tol, "msd {msd} vs {}", 6.0 * 2.0 * t);
}

#[test]
fn impermeable_walkers_never_leave_their_compartment() {
    let sub = substrate();
    let st = run(&sub, &config(0.0, 1500, 20.0), Execution::Parallel);
    // the intracellular population is fixed
    let n_intra = st.select(TagFilter::Intra).len() as u64;
    assert!(st.intra_counts.iter().all(|&c| c == n_intra));
    for p in st.select(TagFilter::Intra) {
        let s = sub.spheres()[st.initial[p] as usize];
        for k in 0..st.n_samples() {
            assert!(st.displacement(p, k).norm() <= 2.0 * s.radius + 1e-9);
        }
    }
}

#[test]
fn exchange_keeps_the_compartments_in_balance() {
    let sub = substrate();
    let st = run(&sub, &config(50.0, 6000, 40.0), Execution::Parallel);
    let f = sub.icvf();
    let se = (f * (1.0 - f) / st.n_particles as f64).sqrt();
    for k in 0..st.n_samples() {
        let x = st.intra_fraction(k);
        assert!((x - f).abs() < 5.0 * se, "sample {k}: intra fraction {x} vs icvf {f}");
    }
    // tags record the start, so the initial split matches sample 0
    let started_in = st.initial.iter().filter(|&&t| t != EXTRA).count() as u64;
    assert_eq!(started_in, st.intra_counts[0]);
}

#[test]
fn trajectories_survive_the_binary_format() {
    let sub = substrate();
    let st = run(&sub, &config(10.0, 50, 5.0), Execution::Parallel);
    let path = std::env::temp_dir().join(format!("permex-traj-it-{}.traj", std::process::id()));
    save_trajectories(&st, &path).unwrap();
    let back = load_trajectories(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    assert_eq!(back.n_particles, st.n_particles);
    assert_eq!(back.sample_times, st.sample_times);
    assert_eq!(back.initial, st.initial);
    // positions are stored single precision
    for (a, b) in back.positions.iter().zip(&st.positions) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn transit_probability_is_a_probability(kappa in 0.0f64..1e5, d in 0.01f64..5.0, dt in 1e-4f64..0.1, c in 0.1f64..3.0) {
        let p = transit_probability(kappa, d, dt, c);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(transit_probability(kappa * 1.5 + 1.0, d, dt, c) >= p);
    }

    #[test]
    fn impermeable_membranes_never_transmit(d in 0.01f64..5.0, dt in 1e-4f64..0.1) {
        prop_assert_eq!(transit_probability(0.0, d, dt, DEFAULT_TRANSIT_CONSTANT), 0.0);
    }
}
