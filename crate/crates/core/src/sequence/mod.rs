//! PGSE protocols, gradient direction sets and signal containers.
//!
//! Phase synthesis from trajectories and the bootstrap error estimate live
//! in [`synth`].

pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::par::pairwise_sum;

pub use io::{
    read_mean_signal_csv, read_signal_csv, read_signal_csv_file, write_mean_signal_csv, write_signal_csv,
    MeanSignalRow,
};
pub use synth::{bootstrap_nmse, synthesize_signal, BootstrapNmse, PhaseTable};

/// Narrow-pulse wavenumber for a PGSE block: `q = sqrt(b / (Δ - δ/3))`.
pub fn q_of_b(b: f64, big_delta: f64, small_delta: f64) -> Result<f64> {
    let t_eff = big_delta - small_delta / 3.0;
    if !(t_eff > 0.0) {
        return Err(Error::invalid(format!(
            "effective diffusion time Δ - δ/3 = {t_eff} must be positive"
        )));
    }
    if !(b >= 0.0) {
        return Err(Error::invalid(format!("b must be non-negative, got {b}")));
    }
    Ok((b / t_eff).sqrt())
}

/// Pulsed-gradient spin-echo acquisition: every b at every Δ along every direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgseProtocol {
    /// Diffusion times Δ, ms.
    pub deltas: Vec<f64>,
    /// Pulse duration δ, ms.
    pub little_delta: f64,
    /// Echo time, ms. Recorded only.
    #[serde(default)]
    pub te: Option<f64>,
    /// ms/μm².
    pub b_values: Vec<f64>,
    pub directions: Vec<Vec3>,
}

impl PgseProtocol {
    pub fn new(
        deltas: Vec<f64>,
        little_delta: f64,
        b_values: Vec<f64>,
        n_directions: usize,
    ) -> Result<Self> {
        let p = PgseProtocol {
            deltas,
            little_delta,
            te: None,
            b_values,
            directions: make_directions(n_directions)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Δ = 12, 20, 30, 40 ms; δ = 4.5 ms; b = 1 … 7 ms/μm²; 24 directions.
    pub fn standard() -> Self {
        PgseProtocol::new(
            vec![12.0, 20.0, 30.0, 40.0],
            4.5,
            vec![1.0, 2.5, 4.0, 5.5, 7.0],
            24,
        )
        .expect("standard protocol is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() || self.b_values.is_empty() || self.directions.is_empty() {
            return Err(Error::EmptyInput("protocol deltas, b-values or directions"));
        }
        if !(self.little_delta > 0.0) {
            return Err(Error::invalid(format!("δ must be positive, got {}", self.little_delta)));
        }
        if let Some(&d) = self.deltas.iter().find(|&&d| !(d > self.little_delta)) {
            return Err(Error::invalid(format!("Δ = {d} ms must exceed δ = {} ms", self.little_delta)));
        }
        if let Some(&b) = self.b_values.iter().find(|&&b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::invalid(format!("invalid b-value {b}")));
        }
        if let Some(u) = self.directions.iter().find(|u| (u.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::invalid(format!("direction {:?} is not unit length", u.0)));
        }
        Ok(())
    }

    /// `Δ - δ/3` for diffusion time index `di`.
    pub fn effective_time(&self, di: usize) -> f64 {
        self.deltas[di] - self.little_delta / 3.0
    }

    pub fn q(&self, bi: usize, di: usize) -> f64 {
        (self.b_values[bi] / self.effective_time(di)).sqrt()
    }

    /// Latest instant any block needs: `max Δ + δ`.
    pub fn duration(&self) -> f64 {
        self.deltas.iter().cloned().fold(0.0, f64::max) + self.little_delta
    }

    pub fn n_shells(&self) -> usize {
        self.b_values.len() * self.deltas.len()
    }
}

/// `n` unit vectors spread over the sphere by electrostatic repulsion.
///
/// The start is a spherical Fibonacci lattice; the Coulomb energy is then
/// reduced by projected gradient steps with backtracking. Only plain
/// floating-point arithmetic is used, so the result is platform independent.
pub fn make_directions(n: usize) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::invalid("at least one gradient direction is required"));
    }
    if n == 1 {
        return Ok(vec![Vec3::new(0.0, 0.0, 1.0)]);
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<Vec3> = (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect();

    let mut energy = coulomb_energy(&pts);
    let mut step = 0.1 / n as f64;
    for _ in 0..20_000 {
        let forces = coulomb_forces(&pts);
        let trial: Vec<Vec3> = pts
            .iter()
            .zip(&forces)
            .map(|(&p, &f)| {
                let tangent = f - p * f.dot(&p);
                (p + tangent * step).normalized()
            })
            .collect();
        let e = coulomb_energy(&trial);
        if e < energy {
            let moved = pts
                .iter()
                .zip(&trial)
                .map(|(a, b)| (*a - *b).norm())
                .fold(0.0, f64::max);
            pts = trial;
            energy = e;
            step *= 1.2;
            if moved < 1e-13 {
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
    }
    Ok(pts)
}

fn coulomb_energy(pts: &[Vec3]) -> f64 {
    let mut e = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            e += 1.0 / (pts[i] - pts[j]).norm();
        }
    }
    e
}

fn coulomb_forces(pts: &[Vec3]) -> Vec<Vec3> {
    let mut f = vec![Vec3::ZERO; pts.len()];
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i] - pts[j];
            let r = d.norm();
            let push = d * (1.0 / (r * r * r));
            f[i] += push;
            f[j] -= push;
        }
    }
    f
}

/// Normalised signal on a (b, Δ, direction) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub b_values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub directions: Vec<Vec3>,
    /// S/S₀ laid out as `[b][Δ][direction]`.
    pub values: Vec<f64>,
    /// Relative bootstrap error per entry, same layout.
    #[serde(default)]
    pub sqrt_nmse: Option<Vec<f64>>,
    /// Relative bootstrap error of the direction-averaged signal, `[b][Δ]`.
    #[serde(default)]
    pub mean_sqrt_nmse: Option<Vec<f64>>,
    /// Root of the per-direction NMSE averaged over directions, `[b][Δ]`.
    #[serde(default)]
    pub direction_sqrt_nmse: Option<Vec<f64>>,
}

impl SignalSet {
    /// A set with every direction of a shell holding the same value,
    /// as produced by isotropic models. `shell(bi, di)` gives that value.
    pub fn isotropic(protocol: &PgseProtocol, mut shell: impl FnMut(usize, usize) -> f64) -> Self {
        let nd = protocol.directions.len();
        let mut values = Vec::with_capacity(protocol.n_shells() * nd);
        for bi in 0..protocol.b_values.len() {
            for di in 0..protocol.deltas.len() {
                let s = shell(bi, di);
                values.extend(std::iter::repeat_n(s, nd));
            }
        }
        SignalSet {
            b_values: protocol.b_values.clone(),
            deltas: protocol.deltas.clone(),
            directions: protocol.directions.clone(),
            values,
            sqrt_nmse: None,
            mean_sqrt_nmse: None,
            direction_sqrt_nmse: None,
        }
    }

    pub fn n_directions(&self) -> usize {
        self.directions.len()
    }

    #[inline]
    pub fn index(&self, bi: usize, di: usize, k: usize) -> usize {
        (bi * self.deltas.len() + di) * self.directions.len() + k
    }

    pub fn value(&self, bi: usize, di: usize, k: usize) -> f64 {
        self.values[self.index(bi, di, k)]
    }

    /// The per-direction values of one (b, Δ) shell.
    pub fn shell(&self, bi: usize, di: usize) -> &[f64] {
        let start = self.index(bi, di, 0);
        &self.values[start..start + self.directions.len()]
    }

    /// Direction-averaged signal of one shell.
    pub fn mean(&self, bi: usize, di: usize) -> f64 {
        let s = self.shell(bi, di);
        pairwise_sum(s) / s.len() as f64
    }

    /// Direction-averaged signals laid out as `[b][Δ]`.
    pub fn means(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.b_values.len() * self.deltas.len());
        for bi in 0..self.b_values.len() {
            for di in 0..self.deltas.len() {
                out.push(self.mean(bi, di));
            }
        }
        out
    }

    /// Checks the layout and the value range `[-0.01, 1.01]`.
    pub fn validate(&self) -> Result<()> {
        let expected = self.b_values.len() * self.deltas.len() * self.directions.len();
        if self.values.len() != expected {
            return Err(Error::Format(format!(
                "signal set holds {} values, layout needs {expected}",
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(**v >= -0.01 && **v <= 1.01)) {
            return Err(Error::NonFinite(format!("signal value {v} outside [-0.01, 1.01]")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn min_angle_deg(pts: &[Vec3]) -> f64 {
        let mut best = f64::MAX;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let c = pts[i].dot(&pts[j]).clamp(-1.0, 1.0);
                best = best.min(c.acos().to_degrees());
            }
        }
        best
    }

    #[test]
    fn q_from_b() {
        assert!((q_of_b(9.625, 40.0, 4.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(q_of_b(0.0, 12.0, 4.5).unwrap(), 0.0);
        assert!((q_of_b(1.0, 12.0, 4.5).unwrap() - (1.0f64 / 10.5).sqrt()).abs() < 1e-15);
        assert!(q_of_b(1.0, 1.0, 3.0).is_err());
    }

    #[test]
    fn single_direction_is_z() {
        assert_eq!(make_directions(1).unwrap(), vec![Vec3::new(0.0, 0.0, 1.0)]);
        assert!(make_directions(0).is_err());
    }

    #[test]
    fn six_directions_form_an_octahedron() {
        let pts = make_directions(6).unwrap();
        // every point has four orthogonal neighbours and one antipode
        for p in &pts {
            let mut dots: Vec<f64> = pts.iter().map(|q| p.dot(q)).collect();
            dots.sort_by(f64::total_cmp);
            assert!((dots[0] + 1.0).abs() < 1e-3, "{dots:?}");
            for d in &dots[1..5] {
                assert!(d.abs() < 1e-3, "{dots:?}");
            }
        }
    }

    #[test]
    fn twenty_four_directions_are_well_spread() {
        let pts = make_directions(24).unwrap();
        assert!(pts.iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));
        assert!(min_angle_deg(&pts) >= 20.0);
        assert_eq!(pts, make_directions(24).unwrap());
    }

    #[test]
    fn standard_protocol_grid() {
        let p = PgseProtocol::standard();
        assert_eq!(p.n_shells(), 20);
        assert_eq!(p.directions.len(), 24);
        assert!((p.duration() - 44.5).abs() < 1e-12);
        assert!((p.q(0, 0) - (1.0f64 / 10.5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_short_delta() {
        assert!(PgseProtocol::new(vec![4.0], 4.5, vec![1.0], 3).is_err());
        assert!(PgseProtocol::new(vec![], 4.5, vec![1.0], 3).is_err());
    }

    #[test]
    fn isotropic_layout_and_means() {
        let p = PgseProtocol::new(vec![12.0, 20.0], 4.5, vec![1.0, 2.0, 3.0], 5).unwrap();
        let s = SignalSet::isotropic(&p, |bi, di| 0.1 * (bi + 1) as f64 + 0.01 * di as f64);
        assert_eq!(s.values.len(), 30);
        assert!((s.value(2, 1, 4) - 0.31).abs() < 1e-15);
        assert!((s.mean(1, 0) - 0.2).abs() < 1e-15);
        assert_eq!(s.means().len(), 6);
        s.validate().unwrap();
    }
}
