//! Signal synthesis from sampled trajectories.
//!
//! For a rectangular gradient pair the phase of a spin is
//! `φ = (q/δ) ĝ·m` with the lobe moment
//! `m = ∫_0^δ r dt − ∫_Δ^{Δ+δ} r dt`, so one moment vector per particle and
//! diffusion time is enough for every b-value and direction. Both integrals
//! use the same trapezoid weights on samples shifted by Δ, which makes the
//! phase of a static spin exactly zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PgseProtocol, SignalSet};
use crate::engine::{TagFilter, TrajectoryStore};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::par::{map_indexed, pairwise_sum, Execution};

/// Minimum bootstrap replicates and particles.
pub const MIN_BOOTSTRAP: usize = 100;
/// Fixed partition of the particles for reductions; independent of threads.
const REDUCTION_CHUNKS: usize = 16;

/// Lobe moments of the selected particles.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTable {
    pub deltas: Vec<f64>,
    pub little_delta: f64,
    pub n_particles: usize,
    /// `[particle][Δ]`, μm·ms.
    pub moments: Vec<Vec3>,
}

fn sample_of(store: &TrajectoryStore, t: f64, what: &str) -> Result<usize> {
    store.sample_index(t).ok_or_else(|| {
        Error::InsufficientSampling(format!("no trajectory sample at {what} = {t} ms"))
    })
}

/// Trapezoid weights for the samples `first..=last`.
fn trapezoid_weights(times: &[f64], first: usize, last: usize) -> Vec<f64> {
    let mut w = vec![0.0; last - first + 1];
    for k in first..last {
        let h = times[k + 1] - times[k];
        w[k - first] += 0.5 * h;
        w[k + 1 - first] += 0.5 * h;
    }
    w
}

impl PhaseTable {
    /// Checks the sampling and integrates the lobe moments.
    pub fn build(
        store: &TrajectoryStore,
        protocol: &PgseProtocol,
        filter: TagFilter,
        exec: Execution,
    ) -> Result<Self> {
        protocol.validate()?;
        let delta = protocol.little_delta;
        let times = &store.sample_times;
        let i0 = sample_of(store, 0.0, "t")?;
        let i1 = sample_of(store, delta, "δ")?;
        let mut plans = Vec::with_capacity(protocol.deltas.len());
        for &big in &protocol.deltas {
            let j0 = sample_of(store, big, "Δ")?;
            let j1 = sample_of(store, big + delta, "Δ + δ")?;
            if j1 - j0 != i1 - i0 {
                return Err(Error::InsufficientSampling(format!(
                    "the lobes at 0 and Δ = {big} ms are sampled on different grids"
                )));
            }
            for k in 0..=(i1 - i0) {
                if (times[j0 + k] - times[i0 + k] - big).abs() > 1e-9 * big {
                    return Err(Error::InsufficientSampling(format!(
                        "sample {} is not shifted by Δ = {big} ms from sample {}",
                        j0 + k,
                        i0 + k
                    )));
                }
            }
            plans.push(j0);
        }
        let widest = (i0..i1).map(|k| times[k + 1] - times[k]).fold(0.0, f64::max);
        if widest > delta / 4.0 * (1.0 + 1e-9) {
            return Err(Error::InsufficientSampling(format!(
                "sampling interval {widest} ms exceeds δ/4 = {} ms",
                delta / 4.0
            )));
        }
        let weights = trapezoid_weights(times, i0, i1);
        let selected = store.select(filter);
        if selected.is_empty() {
            return Err(Error::EmptyInput("particles passing the tag filter"));
        }
        let nd = plans.len();
        let per_particle = map_indexed(exec, selected.len(), |s| {
            let p = selected[s];
            let mut m = Vec::with_capacity(nd);
            for &j0 in &plans {
                let mut acc = Vec3::ZERO;
                for (k, &w) in weights.iter().enumerate() {
                    acc += (store.position(p, i0 + k) - store.position(p, j0 + k)) * w;
                }
                m.push(acc);
            }
            m
        });
        Ok(PhaseTable {
            deltas: protocol.deltas.clone(),
            little_delta: delta,
            n_particles: selected.len(),
            moments: per_particle.into_iter().flatten().collect(),
        })
    }

    #[inline]
    pub fn moment(&self, particle: usize, di: usize) -> Vec3 {
        self.moments[particle * self.deltas.len() + di]
    }

    /// Phase of `particle` for shell (bi, di) along direction `k`.
    #[inline]
    pub fn phase(&self, protocol: &PgseProtocol, particle: usize, bi: usize, di: usize, k: usize) -> f64 {
        protocol.q(bi, di) / self.little_delta * protocol.directions[k].dot(&self.moment(particle, di))
    }

    fn check(&self, protocol: &PgseProtocol) -> Result<()> {
        if protocol.deltas != self.deltas || protocol.little_delta != self.little_delta {
            return Err(Error::invalid("phase table was built for a different protocol timing"));
        }
        Ok(())
    }

    /// Adds `weight(p) · (cos φ, sin φ)` of particles `range` into `acc`,
    /// laid out `[entry][re, im]` with entries in signal-set order.
    fn accumulate(
        &self,
        protocol: &PgseProtocol,
        range: std::ops::Range<usize>,
        mut visit: impl FnMut(usize, usize, f64, f64),
    ) {
        let nb = protocol.b_values.len();
        let nd = protocol.deltas.len();
        let nk = protocol.directions.len();
        let scale: Vec<f64> = (0..nb * nd)
            .map(|s| protocol.q(s / nd, s % nd) / self.little_delta)
            .collect();
        let mut proj = vec![0.0; nd * nk];
        for p in range {
            for di in 0..nd {
                let m = self.moment(p, di);
                for k in 0..nk {
                    proj[di * nk + k] = protocol.directions[k].dot(&m);
                }
            }
            for bi in 0..nb {
                for di in 0..nd {
                    let s = scale[bi * nd + di];
                    let base = (bi * nd + di) * nk;
                    for k in 0..nk {
                        let (sin, cos) = (s * proj[di * nk + k]).sin_cos();
                        visit(p, base + k, cos, sin);
                    }
                }
            }
        }
    }

    fn chunk_range(&self, c: usize) -> std::ops::Range<usize> {
        let n = self.n_particles;
        (c * n / REDUCTION_CHUNKS)..((c + 1) * n / REDUCTION_CHUNKS)
    }

    /// `|mean e^{iφ}|` on every (b, Δ, direction).
    pub fn signal(&self, protocol: &PgseProtocol, exec: Execution) -> Result<SignalSet> {
        self.check(protocol)?;
        let entries = protocol.n_shells() * protocol.directions.len();
        let partial = map_indexed(exec, REDUCTION_CHUNKS, |c| {
            let mut acc = vec![0.0; 2 * entries];
            self.accumulate(protocol, self.chunk_range(c), |_, e, cos, sin| {
                acc[2 * e] += cos;
                acc[2 * e + 1] += sin;
            });
            acc
        });
        let n = self.n_particles as f64;
        let values = (0..entries)
            .map(|e| {
                let re: Vec<f64> = partial.iter().map(|a| a[2 * e]).collect();
                let im: Vec<f64> = partial.iter().map(|a| a[2 * e + 1]).collect();
                pairwise_sum(&re).hypot(pairwise_sum(&im)) / n
            })
            .collect();
        let set = SignalSet {
            b_values: protocol.b_values.clone(),
            deltas: protocol.deltas.clone(),
            directions: protocol.directions.clone(),
            values,
            sqrt_nmse: None,
            mean_sqrt_nmse: None,
            direction_sqrt_nmse: None,
        };
        Ok(set)
    }
}

/// Synthesises the PGSE signal of the particles selected by `filter`.
pub fn synthesize_signal(
    store: &TrajectoryStore,
    protocol: &PgseProtocol,
    filter: TagFilter,
    exec: Execution,
) -> Result<SignalSet> {
    PhaseTable::build(store, protocol, filter, exec)?.signal(protocol, exec)
}

/// Bootstrap normalised mean squared errors.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapNmse {
    pub n_boot: usize,
    /// Per (b, Δ, direction) entry.
    pub nmse: Vec<f64>,
    /// Per (b, Δ): NMSE of the direction-averaged signal.
    pub mean_signal_nmse: Vec<f64>,
    /// Per (b, Δ): per-direction NMSE averaged over directions.
    pub direction_average_nmse: Vec<f64>,
}

impl BootstrapNmse {
    /// Stores the square roots in `set`.
    pub fn attach(&self, set: &mut SignalSet) {
        let sqrt = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
        set.sqrt_nmse = Some(sqrt(&self.nmse));
        set.mean_sqrt_nmse = Some(sqrt(&self.mean_signal_nmse));
        set.direction_sqrt_nmse = Some(sqrt(&self.direction_average_nmse));
    }

    pub fn max_sqrt_mean_signal(&self) -> f64 {
        self.mean_signal_nmse.iter().fold(0.0f64, |m, v| m.max(v.sqrt()))
    }
}

/// Resamples particles with replacement `n_boot` times and compares each
/// replicate signal with the full-sample one: NMSE = mean (S_rep − S)² / S².
pub fn bootstrap_nmse(
    table: &PhaseTable,
    protocol: &PgseProtocol,
    n_boot: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapNmse> {
    if n_boot < MIN_BOOTSTRAP {
        return Err(Error::invalid(format!("at least {MIN_BOOTSTRAP} bootstrap replicates are needed")));
    }
    let n = table.n_particles;
    if n < MIN_BOOTSTRAP {
        return Err(Error::invalid(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP} particles, got {n}"
        )));
    }
    let full = table.signal(protocol, exec)?;
    let nk = protocol.directions.len();
    let shells = protocol.n_shells();
    let entries = shells * nk;

    // multinomial counts stored particle-major: counts[p * n_boot + r]
    let per_rep = map_indexed(exec, n_boot, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut c = vec![0u32; n];
        for _ in 0..n {
            c[rng.gen_range(0..n)] += 1;
        }
        c
    });
    let mut counts = vec![0u32; n * n_boot];
    for (r, c) in per_rep.iter().enumerate() {
        for (p, &k) in c.iter().enumerate() {
            counts[p * n_boot + r] = k;
        }
    }
    drop(per_rep);

    let partial = map_indexed(exec, REDUCTION_CHUNKS, |c| {
        let mut acc = vec![0.0; 2 * entries * n_boot];
        table.accumulate(protocol, table.chunk_range(c), |p, e, cos, sin| {
            let w = &counts[p * n_boot..(p + 1) * n_boot];
            let row = &mut acc[2 * e * n_boot..2 * (e + 1) * n_boot];
            let (re, im) = row.split_at_mut(n_boot);
            for r in 0..n_boot {
                let k = w[r] as f64;
                re[r] += k * cos;
                im[r] += k * sin;
            }
        });
        acc
    });

    let inv_n = 1.0 / n as f64;
    // replicate signals [entry][rep]
    let replicate = |e: usize, r: usize| -> f64 {
        let re: Vec<f64> = partial.iter().map(|a| a[2 * e * n_boot + r]).collect();
        let im: Vec<f64> = partial.iter().map(|a| a[(2 * e + 1) * n_boot + r]).collect();
        pairwise_sum(&re).hypot(pairwise_sum(&im)) * inv_n
    };
    let rel2 = |rep: f64, reference: f64| {
        let d = rep - reference;
        if reference > 0.0 {
            d * d / (reference * reference)
        } else {
            0.0
        }
    };

    let mut nmse = vec![0.0; entries];
    let mut mean_signal_nmse = vec![0.0; shells];
    let mut direction_average_nmse = vec![0.0; shells];
    for s in 0..shells {
        let reference = pairwise_sum(&full.values[s * nk..(s + 1) * nk]) / nk as f64;
        let mut shell_rel = Vec::with_capacity(n_boot);
        let mut per_dir = vec![Vec::with_capacity(n_boot); nk];
        for r in 0..n_boot {
            let reps: Vec<f64> = (0..nk).map(|k| replicate(s * nk + k, r)).collect();
            for k in 0..nk {
                per_dir[k].push(rel2(reps[k], full.values[s * nk + k]));
            }
            shell_rel.push(rel2(pairwise_sum(&reps) / nk as f64, reference));
        }
        for k in 0..nk {
            nmse[s * nk + k] = pairwise_sum(&per_dir[k]) / n_boot as f64;
        }
        mean_signal_nmse[s] = pairwise_sum(&shell_rel) / n_boot as f64;
        direction_average_nmse[s] = pairwise_sum(&nmse[s * nk..(s + 1) * nk]) / nk as f64;
    }
    Ok(BootstrapNmse {
        n_boot,
        nmse,
        mean_signal_nmse,
        direction_average_nmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EXTRA;

    /// Store with `n` particles sampled every 0.5 ms up to `t_max`, each at
    /// `pos(particle, t)`.
    fn store(n: usize, t_max: f64, pos: impl Fn(usize, f64) -> Vec3) -> TrajectoryStore {
        let times: Vec<f64> = (0..=(t_max / 0.5).round() as usize).map(|k| k as f64 * 0.5).collect();
        let mut positions = Vec::new();
        for p in 0..n {
            for &t in &times {
                positions.extend_from_slice(&pos(p, t).0);
            }
        }
        TrajectoryStore {
            intra_counts: vec![0; times.len()],
            sample_times: times,
            n_particles: n,
            positions,
            initial: vec![EXTRA; n],
        }
    }

    fn protocol() -> PgseProtocol {
        PgseProtocol::new(vec![12.0, 20.0], 4.5, vec![0.0, 1.0, 2.5], 6).unwrap()
    }

    #[test]
    fn static_spins_keep_full_signal() {
        let s = store(50, 24.5, |p, _| Vec3::new(p as f64 * 1.37, -3.0 * p as f64, 40.0));
        let pr = protocol();
        let table = PhaseTable::build(&s, &pr, TagFilter::All, Execution::Sequential).unwrap();
        for p in 0..50 {
            for bi in 0..3 {
                for di in 0..2 {
                    for k in 0..6 {
                        assert!(table.phase(&pr, p, bi, di, k).abs() < 1e-12);
                    }
                }
            }
        }
        let sig = table.signal(&pr, Execution::Sequential).unwrap();
        assert!(sig.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_drift_phase_matches_hand_value() {
        // r(t) = v t ẑ; lobe moment = -v Δ δ ẑ, so φ = -q v Δ along ẑ
        let v = 0.1;
        let s = store(1, 24.5, |_, t| Vec3::new(0.0, 0.0, v * t));
        let pr = PgseProtocol {
            directions: vec![Vec3::new(0.0, 0.0, 1.0)],
            ..protocol()
        };
        let table = PhaseTable::build(&s, &pr, TagFilter::All, Execution::Sequential).unwrap();
        let phi = table.phase(&pr, 0, 1, 1, 0);
        assert!((phi + pr.q(1, 1) * v * 20.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_or_misaligned_sampling_is_rejected() {
        let pr = protocol();
        let short = store(5, 20.0, |_, _| Vec3::ZERO);
        assert!(matches!(
            PhaseTable::build(&short, &pr, TagFilter::All, Execution::Sequential),
            Err(Error::InsufficientSampling(_))
        ));
        let mut coarse = store(5, 30.0, |_, _| Vec3::ZERO);
        let keep: Vec<usize> = (0..coarse.sample_times.len()).step_by(3).collect();
        coarse.sample_times = keep.iter().map(|&k| coarse.sample_times[k]).collect();
        assert!(PhaseTable::build(&coarse, &pr, TagFilter::All, Execution::Sequential).is_err());
    }

    #[test]
    fn identical_phases_have_zero_nmse() {
        let s = store(200, 24.5, |_, t| Vec3::new(0.01 * t, 0.0, 0.0));
        let pr = protocol();
        let table = PhaseTable::build(&s, &pr, TagFilter::All, Execution::Sequential).unwrap();
        let boot = bootstrap_nmse(&table, &pr, 100, 1, Execution::Sequential).unwrap();
        assert!(boot.nmse.iter().all(|&v| v < 1e-24));
        assert!(boot.mean_signal_nmse.iter().all(|&v| v < 1e-24));
        assert!(bootstrap_nmse(&table, &pr, 99, 1, Execution::Sequential).is_err());
    }

    #[test]
    fn trapezoid_weights_integrate_linear_functions() {
        let t = [0.0, 0.5, 1.0, 1.5, 2.0];
        let w = trapezoid_weights(&t, 0, 4);
        assert_eq!(w, vec![0.25, 0.5, 0.5, 0.5, 0.25]);
        let integral: f64 = w.iter().zip(&t).map(|(w, t)| w * (3.0 * t + 1.0)).sum();
        assert!((integral - 8.0).abs() < 1e-15);
    }
}
