//! Random-walk diffusion through a periodic packing of permeable spheres.
//!
//! Walkers take fixed-length steps in uniformly random directions. Every
//! sphere surface met along a step is resolved in order: the walker either
//! crosses (with the remaining path rescaled to the new diffusivity) or is
//! reflected specularly. Each particle owns a ChaCha stream keyed by
//! `(seed, particle id)`, so results do not depend on scheduling.

pub mod io;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_image, wrap, Vec3};
use crate::models::kappa_um_per_ms;
use crate::par::{try_for_each_chunk_mut, try_map_indexed, Execution};
use crate::substrate::{SpatialGrid, Substrate};

/// Surface events allowed within one step before the run aborts. Walkers
/// that wander into the cusp next to a contact between two jammed spheres
/// bounce roughly π·sqrt(R/gap) times, a few thousand for the packer's
/// residual gaps, so the cap sits above that.
pub const EVENT_CAP: usize = 16_384;
/// Points this close to a surface keep the compartment they had before.
pub const SURFACE_TOLERANCE: f64 = 1e-9;
/// Transit constant from the flux balance of fixed-length isotropic steps
/// against a planar membrane: hits per area per step are `ρℓ/4`, and
/// matching `κρ` gives `p = (2/3) κ ℓ / D`.
pub const DEFAULT_TRANSIT_CONSTANT: f64 = 2.0 / 3.0;
/// Runaway threshold in units of the free diffusion length `sqrt(6 D_max t)`.
const RUNAWAY_FACTOR: f64 = 10.0;
/// Particles per work unit.
const CHUNK_PARTICLES: usize = 64;

/// Marker stored for walkers in the extracellular space.
pub const EXTRA: u32 = u32::MAX;

/// Selects particles by the compartment they started in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagFilter {
    #[default]
    All,
    Intra,
    Extra,
}

impl TagFilter {
    pub fn accepts(self, tag: u32) -> bool {
        match self {
            TagFilter::All => true,
            TagFilter::Intra => tag != EXTRA,
            TagFilter::Extra => tag == EXTRA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleCount {
    /// Particles per μm³ of voxel.
    Density(f64),
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// μm²/ms.
    pub d_intra0: f64,
    /// μm²/ms.
    pub d_extra0: f64,
    /// Membrane permeability, μm/s.
    pub kappa: f64,
    /// ms.
    pub dt: f64,
    /// ms.
    pub duration: f64,
    pub particles: ParticleCount,
    pub seed: u64,
    /// Steps between stored trajectory samples.
    pub record_stride: usize,
    /// `c` in the crossing probability `min(1, c κ ℓ / D)`.
    #[serde(default = "default_transit_constant")]
    pub transit_constant: f64,
}

fn default_transit_constant() -> f64 {
    DEFAULT_TRANSIT_CONSTANT
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("d_intra0", self.d_intra0), ("d_extra0", self.d_extra0)] {
            if !(d > 0.0 && d <= 3.5) {
                return Err(Error::invalid(format!("{name} must lie in (0, 3.5] μm²/ms, got {d}")));
            }
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::invalid(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride must be at least 1"));
        }
        if !(self.transit_constant > 0.0) {
            return Err(Error::invalid("transit constant must be positive"));
        }
        match self.particles {
            ParticleCount::Density(r) if !(r > 0.0) => {
                Err(Error::invalid(format!("particle density must be positive, got {r}")))
            }
            ParticleCount::Count(0) => Err(Error::invalid("particle count must be positive")),
            _ => Ok(()),
        }
    }

    pub fn particle_count(&self, side: f64) -> usize {
        match self.particles {
            ParticleCount::Density(rho) => ((rho * side.powi(3)).round() as usize).max(1),
            ParticleCount::Count(n) => n,
        }
    }

    /// Steps needed to cover the duration.
    pub fn n_steps(&self) -> usize {
        (self.duration / self.dt - 1e-9).ceil() as usize
    }

    /// Sampling interval in ms.
    pub fn sample_interval(&self) -> f64 {
        self.dt * self.record_stride as f64
    }

    /// Every sampling instant from 0 up to the duration.
    pub fn regular_sample_times(&self) -> Vec<f64> {
        let n = (self.duration / self.sample_interval() + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.sample_interval()).collect()
    }

    pub fn step_length(&self, d: f64) -> f64 {
        step_length(d, self.dt)
    }
}

/// `ℓ = sqrt(6 D dt)`.
pub fn step_length(d: f64, dt: f64) -> f64 {
    (6.0 * d * dt).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transit {
    Transmit,
    Reflect,
}

/// `min(1, c κ ℓ / D_from)` with κ in μm/s and `ℓ = sqrt(6 D_from dt)`.
pub fn transit_probability(kappa: f64, d_from: f64, dt: f64, constant: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    (constant * kappa_um_per_ms(kappa) * step_length(d_from, dt) / d_from).min(1.0)
}

/// Draws a crossing decision against `probability`.
pub fn transit_decision<R: Rng + ?Sized>(probability: f64, rng: &mut R) -> Transit {
    if probability >= 1.0 || (probability > 0.0 && rng.gen::<f64>() < probability) {
        Transit::Transmit
    } else {
        Transit::Reflect
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerState {
    /// Unwrapped position, μm.
    pub position: Vec3,
    /// Position folded into `[0, L)^3`.
    pub wrapped: Vec3,
    /// Sphere id, or [`EXTRA`].
    pub compartment: u32,
    pub initial_compartment: u32,
}

impl WalkerState {
    pub fn is_intra(&self) -> bool {
        self.compartment != EXTRA
    }
}

/// Everything a step needs, shared read-only between threads.
pub struct StepContext<'a> {
    substrate: &'a Substrate,
    grid: SpatialGrid,
    len_intra: f64,
    len_extra: f64,
    p_out: f64,
    p_in: f64,
    /// `sqrt(D_e / D_i)`: path rescaling when leaving a sphere.
    scale_out: f64,
    scale_in: f64,
}

impl<'a> StepContext<'a> {
    pub fn new(substrate: &'a Substrate, config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let len_intra = config.step_length(config.d_intra0);
        let len_extra = config.step_length(config.d_extra0);
        let reach = len_intra.max(len_extra);
        let side = substrate.side();
        if 2.0 * reach >= side {
            return Err(Error::invalid(format!(
                "step length {reach} μm is too large for a voxel of side {side} μm"
            )));
        }
        // finer than the substrate's own index; the margin covers a whole step
        let min_cell = substrate.max_radius().max(side / 128.0);
        let grid = SpatialGrid::build(side, substrate.spheres(), min_cell, reach * (1.0 + 1e-9) + 1e-9);
        let c = config.transit_constant;
        Ok(StepContext {
            substrate,
            grid,
            len_intra,
            len_extra,
            p_out: transit_probability(config.kappa, config.d_intra0, config.dt, c),
            p_in: transit_probability(config.kappa, config.d_extra0, config.dt, c),
            scale_out: (config.d_extra0 / config.d_intra0).sqrt(),
            scale_in: (config.d_intra0 / config.d_extra0).sqrt(),
        })
    }

    /// Crossing probabilities (leaving, entering a sphere).
    pub fn probabilities(&self) -> (f64, f64) {
        (self.p_out, self.p_in)
    }

    /// Walker at `wrapped` tagged by the sphere that strictly contains it.
    pub fn place(&self, wrapped: Vec3) -> WalkerState {
        let c = self
            .grid
            .locate(self.substrate.spheres(), wrapped)
            .map_or(EXTRA, |i| i as u32);
        WalkerState {
            position: wrapped,
            wrapped,
            compartment: c,
            initial_compartment: c,
        }
    }

    /// Advances `w` by one time step.
    pub fn step<R: Rng + ?Sized>(&self, w: &mut WalkerState, rng: &mut R, particle: usize) -> Result<()> {
        let spheres = self.substrate.spheres();
        let side = self.substrate.side();
        let candidates = self.grid.candidates(w.wrapped);

        let z = 2.0 * rng.gen::<f64>() - 1.0;
        let phi = std::f64::consts::TAU * rng.gen::<f64>();
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let mut dir = Vec3::new(rho * phi.cos(), rho * phi.sin(), z);

        // geometry in a frame anchored at the step start
        let mut p = Vec3::ZERO;
        let mut remaining = if w.is_intra() { self.len_intra } else { self.len_extra };
        let mut events = 0usize;
        let mut first = true;
        loop {
            let mut hit: Option<(f64, u32)> = None;
            if w.is_intra() {
                let s = &spheres[w.compartment as usize];
                let o = p - min_image(w.wrapped, s.center, side);
                let b = o.dot(&dir);
                let c = o.norm2() - s.radius * s.radius;
                if first && c > 2.0 * s.radius * SURFACE_TOLERANCE {
                    return Err(Error::Geometry {
                        particle,
                        detail: format!(
                            "tagged inside sphere {} but {:.3e} μm outside it",
                            w.compartment,
                            o.norm() - s.radius
                        ),
                    });
                }
                let t = -b + (b * b - c).max(0.0).sqrt();
                if t < remaining {
                    hit = Some((t.max(0.0), w.compartment));
                }
            } else {
                let mut best = remaining;
                for &id in candidates {
                    let s = &spheres[id as usize];
                    let o = p - min_image(w.wrapped, s.center, side);
                    let b = o.dot(&dir);
                    let c = o.norm2() - s.radius * s.radius;
                    if first && c < -2.0 * s.radius * SURFACE_TOLERANCE {
                        return Err(Error::Geometry {
                            particle,
                            detail: format!(
                                "tagged extracellular but {:.3e} μm inside sphere {id}",
                                s.radius - o.norm()
                            ),
                        });
                    }
                    if b >= 0.0 {
                        continue;
                    }
                    let disc = b * b - c;
                    if disc <= 0.0 {
                        continue;
                    }
                    let t = c.max(0.0) / (-b + disc.sqrt());
                    if t < best {
                        best = t;
                        hit = Some((t, id));
                    }
                }
            }
            first = false;

            let Some((t, id)) = hit else {
                p += dir * remaining;
                break;
            };
            events += 1;
            if events > EVENT_CAP {
                return Err(Error::EventCap {
                    particle,
                    cap: EVENT_CAP,
                });
            }
            p += dir * t;
            remaining -= t;
            let leaving = w.is_intra();
            let probability = if leaving { self.p_out } else { self.p_in };
            match transit_decision(probability, rng) {
                Transit::Transmit => {
                    if leaving {
                        w.compartment = EXTRA;
                        remaining *= self.scale_out;
                    } else {
                        w.compartment = id;
                        remaining *= self.scale_in;
                    }
                }
                Transit::Reflect => {
                    let s = &spheres[id as usize];
                    let n = (p - min_image(w.wrapped, s.center, side)) * (1.0 / s.radius);
                    dir = (dir - n * (2.0 * dir.dot(&n))).normalized();
                }
            }
        }
        w.position += p;
        w.wrapped = wrap(w.wrapped + p, side);
        Ok(())
    }
}

fn particle_rng(seed: u64, particle: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * particle as u64 + purpose);
    rng
}

fn initial_position(side: f64, seed: u64, particle: usize) -> Vec3 {
    let mut rng = particle_rng(seed, particle, 0);
    Vec3::new(
        rng.gen::<f64>() * side,
        rng.gen::<f64>() * side,
        rng.gen::<f64>() * side,
    )
}

/// Uniformly seeded walkers, tagged by the sphere containing them.
pub fn init_walkers(substrate: &Substrate, config: &SimulationConfig) -> Result<Vec<WalkerState>> {
    let ctx = StepContext::new(substrate, config)?;
    let n = config.particle_count(substrate.side());
    Ok((0..n)
        .map(|i| ctx.place(initial_position(substrate.side(), config.seed, i)))
        .collect())
}

/// Unwrapped trajectories on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub sample_times: Vec<f64>,
    pub n_particles: usize,
    /// `[particle][sample][axis]`, μm.
    pub positions: Vec<f64>,
    /// Compartment at initialisation, per particle.
    pub initial: Vec<u32>,
    /// Walkers inside spheres at each sample.
    pub intra_counts: Vec<u64>,
}

impl TrajectoryStore {
    pub fn n_samples(&self) -> usize {
        self.sample_times.len()
    }

    #[inline]
    pub fn position(&self, particle: usize, sample: usize) -> Vec3 {
        let k = 3 * (particle * self.sample_times.len() + sample);
        Vec3::new(self.positions[k], self.positions[k + 1], self.positions[k + 2])
    }

    /// Displacement of `particle` between sample 0 and `sample`.
    #[inline]
    pub fn displacement(&self, particle: usize, sample: usize) -> Vec3 {
        self.position(particle, sample) - self.position(particle, 0)
    }

    /// Index of the sample at time `t`, if stored.
    pub fn sample_index(&self, t: f64) -> Option<usize> {
        self.sample_times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    /// Indices of the particles whose initial tag passes `filter`.
    pub fn select(&self, filter: TagFilter) -> Vec<usize> {
        (0..self.n_particles)
            .filter(|&i| filter.accepts(self.initial[i]))
            .collect()
    }

    pub fn intra_fraction(&self, sample: usize) -> f64 {
        self.intra_counts[sample] as f64 / self.n_particles as f64
    }
}

/// Maps requested sample times to step indices; each must be a multiple of
/// `dt * record_stride` and lie within the duration.
fn sample_steps(config: &SimulationConfig, sample_times: &[f64]) -> Result<Vec<usize>> {
    if sample_times.is_empty() {
        return Err(Error::EmptyInput("sample times"));
    }
    let interval = config.sample_interval();
    let mut steps = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        let k = (t / interval).round();
        if !(t >= 0.0) || (k * interval - t).abs() > 1e-9 * interval.max(t) {
            return Err(Error::invalid(format!(
                "sample time {t} ms is not a multiple of the {interval} ms sampling interval"
            )));
        }
        if t > config.duration * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "sample time {t} ms exceeds the simulated duration {} ms",
                config.duration
            )));
        }
        let step = k as usize * config.record_stride;
        if steps.last().is_some_and(|&last| step <= last) {
            return Err(Error::invalid("sample times must be strictly increasing"));
        }
        steps.push(step);
    }
    Ok(steps)
}

/// Simulates every particle and stores its unwrapped position at `sample_times`.
pub fn run_simulation(
    substrate: &Substrate,
    config: &SimulationConfig,
    sample_times: &[f64],
    exec: Execution,
) -> Result<TrajectoryStore> {
    let ctx = StepContext::new(substrate, config)?;
    let steps = sample_steps(config, sample_times)?;
    let n = config.particle_count(substrate.side());
    let ns = steps.len();
    let side = substrate.side();
    let d_max = config.d_intra0.max(config.d_extra0);
    let mut positions = vec![0.0f64; n * ns * 3];
    let chunk_len = CHUNK_PARTICLES * ns * 3;

    let tallies: Vec<(Vec<u32>, Vec<u64>)> = {
        let per_chunk = std::sync::Mutex::new(vec![(Vec::new(), Vec::new()); n.div_ceil(CHUNK_PARTICLES)]);
        try_for_each_chunk_mut(exec, &mut positions, chunk_len, |chunk, slot| {
            let first = chunk * CHUNK_PARTICLES;
            let count = slot.len() / (ns * 3);
            let mut initial = Vec::with_capacity(count);
            let mut intra = vec![0u64; ns];
            for local in 0..count {
                let particle = first + local;
                let mut w = ctx.place(initial_position(side, config.seed, particle));
                initial.push(w.initial_compartment);
                let mut rng = particle_rng(config.seed, particle, 1);
                let out = &mut slot[local * ns * 3..(local + 1) * ns * 3];
                let start = w.position;
                let mut done = 0usize;
                for (k, &target) in steps.iter().enumerate() {
                    while done < target {
                        ctx.step(&mut w, &mut rng, particle)?;
                        done += 1;
                    }
                    let p = w.position;
                    if !p.is_finite() {
                        return Err(Error::NonFinite(format!("particle {particle} at sample {k}")));
                    }
                    let t = target as f64 * config.dt;
                    let limit = RUNAWAY_FACTOR * (6.0 * d_max * t).sqrt();
                    let moved = (p - start).norm();
                    if t > 0.0 && moved > limit {
                        return Err(Error::Runaway {
                            particle,
                            sample: k,
                            displacement: moved,
                            limit,
                        });
                    }
                    out[3 * k..3 * k + 3].copy_from_slice(&p.0);
                    if w.is_intra() {
                        intra[k] += 1;
                    }
                }
            }
            per_chunk.lock().expect("tally lock")[chunk] = (initial, intra);
            Ok(())
        })?;
        per_chunk.into_inner().expect("tally lock")
    };

    let mut initial = Vec::with_capacity(n);
    let mut intra_counts = vec![0u64; ns];
    for (tags, counts) in tallies {
        initial.extend(tags);
        for (acc, c) in intra_counts.iter_mut().zip(counts) {
            *acc += c;
        }
    }
    Ok(TrajectoryStore {
        sample_times: steps.iter().map(|&s| s as f64 * config.dt).collect(),
        n_particles: n,
        positions,
        initial,
        intra_counts,
    })
}

/// First-exit times from one sphere for walkers started uniformly inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitSample {
    /// Exit time per walker in ms, `None` if still inside at the horizon.
    pub exit_times: Vec<Option<f64>>,
    pub horizon: f64,
}

impl ExitSample {
    /// Maximum-likelihood mean of an exponential law from right-censored
    /// data: observed exits over total time at risk.
    pub fn censored_mean(&self) -> f64 {
        let exits = self.exit_times.iter().filter(|t| t.is_some()).count();
        let at_risk: f64 = self
            .exit_times
            .iter()
            .map(|t| t.unwrap_or(self.horizon))
            .sum();
        at_risk / exits.max(1) as f64
    }

    pub fn exited(&self) -> usize {
        self.exit_times.iter().filter(|t| t.is_some()).count()
    }
}

/// Releases `n_walkers` uniformly inside sphere `sphere` and records when
/// each first crosses into the extracellular space.
pub fn first_exit_times(
    substrate: &Substrate,
    config: &SimulationConfig,
    sphere: usize,
    n_walkers: usize,
    horizon: f64,
    exec: Execution,
) -> Result<ExitSample> {
    let ctx = StepContext::new(substrate, config)?;
    let s = *substrate
        .spheres()
        .get(sphere)
        .ok_or_else(|| Error::invalid(format!("no sphere with index {sphere}")))?;
    let max_steps = (horizon / config.dt).ceil() as usize;
    let side = substrate.side();
    let exit_times = try_map_indexed(exec, n_walkers, |i| -> Result<Option<f64>> {
        let mut rng = particle_rng(config.seed, i, 0);
        let start = loop {
            let v = Vec3::new(
                2.0 * rng.gen::<f64>() - 1.0,
                2.0 * rng.gen::<f64>() - 1.0,
                2.0 * rng.gen::<f64>() - 1.0,
            );
            if v.norm2() < 1.0 {
                break wrap(s.center + v * s.radius, side);
            }
        };
        let mut w = ctx.place(start);
        if w.compartment != sphere as u32 {
            return Ok(Some(0.0));
        }
        let mut rng = particle_rng(config.seed, i, 1);
        for k in 1..=max_steps {
            ctx.step(&mut w, &mut rng, i)?;
            if !w.is_intra() {
                return Ok(Some(k as f64 * config.dt));
            }
        }
        Ok(None)
    })?;
    Ok(ExitSample {
        exit_times,
        horizon: max_steps as f64 * config.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Sphere;

    fn config(kappa: f64, d: f64) -> SimulationConfig {
        SimulationConfig {
            d_intra0: d,
            d_extra0: d,
            kappa,
            dt: 0.005,
            duration: 1.0,
            particles: ParticleCount::Count(100),
            seed: 7,
            record_stride: 100,
            transit_constant: DEFAULT_TRANSIT_CONSTANT,
        }
    }

    #[test]
    fn step_length_arithmetic() {
        assert!((step_length(2.0, 0.005) - 0.06f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn transit_probability_rule() {
        assert_eq!(transit_probability(0.0, 1.0, 0.005, 2.0), 0.0);
        let p = transit_probability(10.0, 1.0, 0.005, 2.0);
        assert!((p - 2.0 * 0.01 * 0.03f64.sqrt()).abs() < 1e-15);
        assert!((p - 3.464e-3).abs() < 1e-6);
        assert_eq!(transit_probability(1e12, 1.0, 0.005, 2.0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| transit_decision(0.0, &mut rng) == Transit::Reflect));
        assert!((0..1000).all(|_| transit_decision(1.0, &mut rng) == Transit::Transmit));
    }

    #[test]
    fn impermeable_sphere_confines() {
        let sub = Substrate::from_spheres(20.0, vec![Sphere::new(Vec3::new(10.0, 10.0, 10.0), 3.0)], 0)
            .unwrap();
        let cfg = config(0.0, 2.0);
        let ctx = StepContext::new(&sub, &cfg).unwrap();
        let mut w = ctx.place(Vec3::new(10.5, 10.0, 9.0));
        assert_eq!(w.compartment, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            ctx.step(&mut w, &mut rng, 0).unwrap();
            assert_eq!(w.compartment, 0);
        }
        assert!((w.wrapped - Vec3::new(10.0, 10.0, 10.0)).norm() <= 3.0 + 1e-9);
    }

    #[test]
    fn extracellular_walker_stays_out() {
        let sub = Substrate::from_spheres(10.0, vec![Sphere::new(Vec3::new(5.0, 5.0, 5.0), 3.0)], 0)
            .unwrap();
        let cfg = config(0.0, 2.0);
        let ctx = StepContext::new(&sub, &cfg).unwrap();
        let mut w = ctx.place(Vec3::new(0.5, 0.5, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100_000 {
            ctx.step(&mut w, &mut rng, 0).unwrap();
            assert_eq!(w.compartment, EXTRA);
            assert!(min_image(w.wrapped, Vec3::new(5.0, 5.0, 5.0), 10.0).norm() >= 3.0 - 1e-9);
        }
        // unwrapped and wrapped agree up to whole voxels
        for a in 0..3 {
            let k = (w.position[a] - w.wrapped[a]) / 10.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_times_must_sit_on_the_grid() {
        let cfg = config(0.0, 1.0);
        assert_eq!(sample_steps(&cfg, &[0.0, 0.5, 1.0]).unwrap(), vec![0, 100, 200]);
        assert!(sample_steps(&cfg, &[0.3]).is_err());
        assert!(sample_steps(&cfg, &[1.5]).is_err());
        assert!(sample_steps(&cfg, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut c = config(0.0, 1.0);
        c.d_intra0 = 4.0;
        assert!(c.validate().is_err());
        let mut c = config(-1.0, 1.0);
        assert!(c.validate().is_err());
        c.kappa = 0.0;
        c.record_stride = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_voxel_tags_everything_extra() {
        let sub = Substrate::empty(10.0).unwrap();
        let w = init_walkers(&sub, &config(0.0, 1.0)).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.iter().all(|w| w.compartment == EXTRA));
    }
}
