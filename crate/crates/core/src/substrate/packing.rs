//! Dense periodic packing by event-driven growth of hard spheres.
//!
//! Centres start as random points with thermal velocities. All radii grow
//! in proportion, `r_i(t) = a(t) * R_i` with `a(t) = rate * t`, while the
//! spheres move ballistically and collide elastically in the frame of the
//! growing surfaces. Slow growth lets the configuration reorganise, which is
//! what makes fractions around 0.65 reachable for narrow radius
//! distributions. The state is overlap-free at every event, so once `a`
//! passes 1 the requested radii fit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{min_image_coord, sphere_volume, wrap, Vec3};

/// Diameter growth per unit time relative to the thermal speed, by the
/// volume fraction below which it applies.
const GROWTH_SCHEDULE: [(f64, f64); 3] = [(0.45, 5e-2), (0.58, 1e-2), (f64::INFINITY, 1e-3)];
/// Growth stops this relative margin past the requested radii.
const FINAL_SLACK: f64 = 1e-7;
/// Events per sphere between thermostat, schedule and stall checks.
const SYNC_EVENTS_PER_SPHERE: usize = 10;
/// Relative scale gain per sync below which the packing counts as jammed.
const STALL: f64 = 1e-6;
/// Largest factor by which a stalled packing slows its growth before
/// vacancies are made.
const MAX_SLOWDOWN: f64 = 4.0;
/// Syncs to let the packing rearrange around new vacancies before the
/// stall test applies again.
const VACANCY_GRACE_SYNCS: usize = 40;
/// Volume fraction released per vacancy round when jammed.
const VACANCY_FRACTION: f64 = 0.002;
/// Smallest radius scale at which a jammed packing is accepted as is.
pub(crate) const MIN_JAM_SCALE: f64 = 0.995;

/// Result of a successful packing run.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    /// Centres of the kept prefix of the radii.
    pub centers: Vec<Vec3>,
    /// Common factor applied to the kept radii; 1 unless the packing jammed
    /// inside the tolerance band.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
struct Ball {
    /// Position at local time `t`.
    x: Vec3,
    v: Vec3,
    t: f64,
    cell: usize,
    version: u64,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Collision { other: u32, other_version: u64 },
    Cross { axis: u8, up: bool },
    Horizon,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    ball: u32,
    version: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so that BinaryHeap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.ball.cmp(&self.ball))
    }
}

pub(crate) struct Packer<'a> {
    side: f64,
    radii: &'a [f64],
    rng: ChaCha8Rng,
}

impl<'a> Packer<'a> {
    pub(crate) fn new(side: f64, radii: &'a [f64], seed: u64) -> Self {
        Packer {
            side,
            radii,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn fraction(&self, scale: f64) -> f64 {
        let vol: f64 = self.radii.iter().map(|&r| sphere_volume(scale * r)).sum();
        vol / self.side.powi(3)
    }

    /// Runs the growth and returns the centres of the packed prefix of the
    /// radii. When the configuration jams, trailing spheres are dropped as
    /// long as the remaining volume fraction stays at or above
    /// `floor_fraction`. `max_iterations` bounds the events per sphere.
    pub(crate) fn run(mut self, max_iterations: usize, floor_fraction: f64) -> Result<Packed> {
        let n = self.radii.len();
        let l = self.side;
        let centers: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    self.rng.gen::<f64>() * l,
                    self.rng.gen::<f64>() * l,
                    self.rng.gen::<f64>() * l,
                )
            })
            .collect();
        if n < 2 {
            return Ok(Packed { centers, scale: 1.0 });
        }
        let velocities: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    self.rng.sample(StandardNormal),
                    self.rng.sample(StandardNormal),
                    self.rng.sample(StandardNormal),
                )
            })
            .collect();

        let mut sim = Collider::new(l, self.radii, 1.0 + FINAL_SLACK, &centers, velocities);
        let budget = max_iterations.saturating_mul(n);
        match sim.run(budget, floor_fraction) {
            Ok(scale) => Ok(Packed {
                centers: sim.final_positions(),
                scale,
            }),
            Err(scale) => {
                let kept = &self.radii[..sim.active];
                let vol = |a: f64| kept.iter().map(|&r| sphere_volume(a * r)).sum::<f64>();
                Err(Error::PackingFailed {
                    target: self.fraction(1.0),
                    achieved: vol(scale) / l.powi(3),
                    scale,
                    iterations: max_iterations,
                })
            }
        }
    }
}

/// Event-driven hard-sphere dynamics with uniformly growing radii.
///
/// Only the first `active` spheres take part; the rest were dropped as
/// vacancies. The common radius scale is `a_ref + rate * (t - t_ref)`.
struct Collider<'a> {
    side: f64,
    radii: &'a [f64],
    mean_radius: f64,
    final_scale: f64,
    a_ref: f64,
    t_ref: f64,
    rate: f64,
    slowdown: f64,
    horizon: f64,
    active: usize,
    cells_per_axis: usize,
    cell: f64,
    members: Vec<Vec<u32>>,
    neighbours: Vec<Vec<u32>>,
    balls: Vec<Ball>,
    queue: BinaryHeap<Event>,
    now: f64,
}

impl<'a> Collider<'a> {
    fn new(
        side: f64,
        radii: &'a [f64],
        final_scale: f64,
        centers: &[Vec3],
        velocities: Vec<Vec3>,
    ) -> Self {
        let r_max = radii.iter().cloned().fold(0.0, f64::max);
        let cells_per_axis = ((side / (2.0 * r_max * final_scale)).floor() as usize).max(1);
        let cell = side / cells_per_axis as f64;
        let total = cells_per_axis.pow(3);
        let mut c = Collider {
            side,
            radii,
            mean_radius: radii.iter().sum::<f64>() / radii.len() as f64,
            final_scale,
            a_ref: 0.0,
            t_ref: 0.0,
            rate: 0.0,
            slowdown: 1.0,
            horizon: 0.0,
            active: radii.len(),
            cells_per_axis,
            cell,
            members: vec![Vec::new(); total],
            neighbours: Vec::with_capacity(total),
            balls: Vec::with_capacity(centers.len()),
            queue: BinaryHeap::new(),
            now: 0.0,
        };
        for id in 0..total {
            let list = c.neighbourhood(id);
            c.neighbours.push(list);
        }
        for (i, (&x, v)) in centers.iter().zip(velocities).enumerate() {
            let cell = c.cell_index(x);
            c.members[cell].push(i as u32);
            c.balls.push(Ball {
                x,
                v,
                t: 0.0,
                cell,
                version: 0,
            });
        }
        c.sync();
        c
    }

    fn cell_index(&self, x: Vec3) -> usize {
        let n = self.cells_per_axis;
        let k = |v: f64| ((v / self.cell) as usize).min(n - 1);
        (k(x[0]) * n + k(x[1])) * n + k(x[2])
    }

    fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let n = self.cells_per_axis;
        [cell / (n * n), (cell / n) % n, cell % n]
    }

    /// Cells whose members can touch a ball in `cell`, without repeats.
    fn neighbourhood(&self, cell: usize) -> Vec<u32> {
        let n = self.cells_per_axis as isize;
        let c = self.cell_coords(cell);
        let mut out = Vec::with_capacity(27);
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let x = (c[0] as isize + dx).rem_euclid(n);
                    let y = (c[1] as isize + dy).rem_euclid(n);
                    let z = (c[2] as isize + dz).rem_euclid(n);
                    let id = ((x * n + y) * n + z) as u32;
                    if !out.contains(&id) {
                        out.push(id);
                    }
                }
            }
        }
        out
    }

    #[inline]
    fn scale_at(&self, t: f64) -> f64 {
        self.a_ref + self.rate * (t - self.t_ref)
    }

    /// Volume fraction of the active spheres at radius scale `a`.
    fn fraction(&self, a: f64) -> f64 {
        self.radii[..self.active]
            .iter()
            .map(|&r| sphere_volume(a * r))
            .sum::<f64>()
            / self.side.powi(3)
    }

    #[inline]
    fn position(&self, i: usize, t: f64) -> Vec3 {
        let b = &self.balls[i];
        b.x + b.v * (t - b.t)
    }

    #[inline]
    fn separation(&self, a: Vec3, b: Vec3) -> Vec3 {
        let d = b - a;
        Vec3::new(
            min_image_coord(d[0], self.side),
            min_image_coord(d[1], self.side),
            min_image_coord(d[2], self.side),
        )
    }

    /// Earliest time from `self.now` at which `i` and `j` touch, if any.
    fn contact_time(&self, i: usize, j: usize) -> Option<f64> {
        let t = self.now;
        let dx = self.separation(self.position(i, t), self.position(j, t));
        let dv = self.balls[j].v - self.balls[i].v;
        let s = self.radii[i] + self.radii[j];
        let g = self.rate;
        let a_now = self.scale_at(t);
        // |dx + dv tau|^2 = s^2 (a_now + g tau)^2
        let qa = dv.norm2() - s * s * g * g;
        let qb = dx.dot(&dv) - s * s * a_now * g;
        let qc = dx.norm2() - s * s * a_now * a_now;
        if qc <= 0.0 {
            return (qb < 0.0).then_some(t);
        }
        if qa >= 0.0 && qb >= 0.0 {
            return None;
        }
        let disc = qb * qb - qa * qc;
        if disc < 0.0 {
            return None;
        }
        let tau = if qb < 0.0 {
            qc / (-qb + disc.sqrt())
        } else {
            (-qb - disc.sqrt()) / qa
        };
        (tau >= 0.0).then_some(t + tau)
    }

    fn predict(&mut self, i: usize) {
        self.balls[i].version += 1;
        let b = self.balls[i];
        let mut best = Event {
            time: self.horizon,
            ball: i as u32,
            version: b.version,
            kind: Kind::Horizon,
        };
        let coords = self.cell_coords(b.cell);
        #[allow(clippy::needless_range_loop)]
        for axis in 0..3 {
            let v = b.v[axis];
            let pos = b.x[axis] + v * (self.now - b.t);
            let (up, dt) = if v > 0.0 {
                (true, ((coords[axis] + 1) as f64 * self.cell - pos) / v)
            } else if v < 0.0 {
                (false, (coords[axis] as f64 * self.cell - pos) / v)
            } else {
                continue;
            };
            let time = self.now + dt.max(0.0);
            if time < best.time {
                best.time = time;
                best.kind = Kind::Cross {
                    axis: axis as u8,
                    up,
                };
            }
        }
        for &cell in &self.neighbours[b.cell] {
            for &j in &self.members[cell as usize] {
                let j = j as usize;
                if j == i {
                    continue;
                }
                if let Some(time) = self.contact_time(i, j) {
                    if time < best.time {
                        best.time = time;
                        best.kind = Kind::Collision {
                            other: j as u32,
                            other_version: self.balls[j].version,
                        };
                    }
                }
            }
        }
        self.queue.push(best);
    }

    fn advance(&mut self, i: usize, t: f64) {
        let b = &mut self.balls[i];
        b.x += b.v * (t - b.t);
        b.t = t;
    }

    fn collide(&mut self, i: usize, j: usize) {
        let t = self.now;
        self.advance(i, t);
        self.advance(j, t);
        let d = self.separation(self.balls[i].x, self.balls[j].x);
        let n = d * (1.0 / d.norm());
        let s = self.radii[i] + self.radii[j];
        // normal approach speed measured against the growing surfaces
        let approach = (self.balls[j].v - self.balls[i].v).dot(&n) - s * self.rate;
        if approach < 0.0 {
            self.balls[i].v += n * approach;
            self.balls[j].v -= n * approach;
        }
    }

    fn unlink(&mut self, i: usize) {
        let list = &mut self.members[self.balls[i].cell];
        if let Some(k) = list.iter().position(|&m| m as usize == i) {
            list.swap_remove(k);
        }
    }

    fn cross(&mut self, i: usize, axis: usize, up: bool) {
        self.advance(i, self.now);
        let n = self.cells_per_axis;
        let mut c = self.cell_coords(self.balls[i].cell);
        c[axis] = if up { (c[axis] + 1) % n } else { (c[axis] + n - 1) % n };
        // pin the coordinate onto the shared face, on the wrapped side
        let face = if up {
            c[axis] as f64 * self.cell
        } else {
            (c[axis] + 1) as f64 * self.cell
        };
        self.balls[i].x.0[axis] = face;
        self.unlink(i);
        let new = (c[0] * n + c[1]) * n + c[2];
        self.members[new].push(i as u32);
        self.balls[i].cell = new;
    }

    /// Brings every sphere to `self.now`, resets the temperature, picks the
    /// growth rate for the current density and re-predicts all events.
    fn sync(&mut self) {
        let t = self.now;
        let m = self.active;
        for i in 0..m {
            self.advance(i, t);
        }
        let drift = self.balls[..m].iter().fold(Vec3::ZERO, |a, b| a + b.v) * (1.0 / m as f64);
        let temp = self.balls[..m]
            .iter()
            .map(|b| (b.v - drift).norm2())
            .sum::<f64>()
            / (3.0 * m as f64);
        let scale = if temp > 0.0 { 1.0 / temp.sqrt() } else { 1.0 };
        for b in &mut self.balls[..m] {
            b.v = (b.v - drift) * scale;
        }

        let a = self.scale_at(t);
        let phi = self.fraction(a);
        let growth = GROWTH_SCHEDULE
            .iter()
            .find(|(limit, _)| phi < *limit)
            .map_or(GROWTH_SCHEDULE[GROWTH_SCHEDULE.len() - 1].1, |g| g.1);
        self.a_ref = a;
        self.t_ref = t;
        self.rate = growth / (self.slowdown * 2.0 * self.mean_radius);
        self.horizon = t + (self.final_scale - a).max(0.0) / self.rate;

        self.queue.clear();
        for i in 0..m {
            self.predict(i);
        }
    }

    /// Drops trailing spheres worth `VACANCY_FRACTION` of the voxel if the
    /// full-size fraction stays at or above `floor`; false when impossible.
    fn make_vacancies(&mut self, floor: f64) -> bool {
        let voxel = self.side.powi(3);
        let mut full = self.fraction(1.0);
        let goal = full - VACANCY_FRACTION;
        let mut dropped = false;
        while self.active > 2 {
            let last = self.active - 1;
            let next = full - sphere_volume(self.radii[last]) / voxel;
            if next < floor {
                break;
            }
            self.unlink(last);
            self.active = last;
            full = next;
            dropped = true;
            if full <= goal {
                break;
            }
        }
        dropped
    }

    /// Ok(scale) once the horizon is reached (scale 1) or the packing jams
    /// with the fraction already at or above `floor` (scale slightly
    /// below 1). Err(scale) when the budget runs out or the packing jams
    /// with no room left for vacancies.
    fn run(&mut self, budget: usize, floor: f64) -> std::result::Result<f64, f64> {
        let mut processed = 0usize;
        let mut since_sync = 0usize;
        let mut last_scale = self.scale_at(self.now);
        let mut grace = 0usize;
        while let Some(ev) = self.queue.pop() {
            let i = ev.ball as usize;
            if ev.version != self.balls[i].version {
                continue;
            }
            if ev.time >= self.horizon {
                self.now = self.horizon;
                return Ok(1.0);
            }
            if processed >= budget {
                return Err(self.scale_at(self.now));
            }
            self.now = ev.time;
            processed += 1;
            since_sync += 1;
            match ev.kind {
                Kind::Collision {
                    other,
                    other_version,
                } => {
                    let j = other as usize;
                    if self.balls[j].version != other_version {
                        self.predict(i);
                        continue;
                    }
                    self.collide(i, j);
                    self.predict(i);
                    self.predict(j);
                }
                Kind::Cross { axis, up } => {
                    self.cross(i, axis as usize, up);
                    self.predict(i);
                }
                Kind::Horizon => unreachable!("horizon events are handled above"),
            }
            if since_sync >= SYNC_EVENTS_PER_SPHERE * self.active {
                since_sync = 0;
                let a = self.scale_at(self.now);
                if grace > 0 {
                    grace -= 1;
                } else if (a - last_scale) * self.slowdown < STALL * a {
                    if self.slowdown < MAX_SLOWDOWN {
                        self.slowdown *= 2.0;
                    } else if a >= MIN_JAM_SCALE && self.fraction(a) >= floor {
                        // touching spheres: back off by the slack to keep a gap
                        return Ok(a / (1.0 + FINAL_SLACK));
                    } else if self.make_vacancies(floor) {
                        grace = VACANCY_GRACE_SYNCS;
                    } else {
                        return Err(a);
                    }
                }
                last_scale = a;
                self.sync();
            }
        }
        Ok(1.0)
    }

    fn final_positions(&self) -> Vec<Vec3> {
        (0..self.active)
            .map(|i| wrap(self.position(i, self.now), self.side))
            .collect()
    }
}
