//! Forward signal models: restricted diffusion in a sphere (Neuman /
//! Murday–Cotts), the impermeable Ball & Sphere mixture, and the
//! two-compartment exchange model with Kärger kinetics. Plus Rician noise.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{PgseProtocol, SignalSet};

/// Roots used by default in the restricted-sphere series.
pub const DEFAULT_M_MAX: usize = 20;
/// A series whose last term exceeds this fraction of the sum is flagged.
pub const SERIES_TOLERANCE: f64 = 1e-10;

/// Converts a permeability from μm/s to μm/ms.
#[inline]
pub fn kappa_um_per_ms(kappa_um_per_s: f64) -> f64 {
    kappa_um_per_s / 1000.0
}

/// `x^3 j1'(x)` for the spherical Bessel function `j1`.
#[inline]
fn reflecting_condition(x: f64) -> f64 {
    2.0 * x * x.cos() + (x * x - 2.0) * x.sin()
}

/// Dimensionless roots `x_m = α_m R` of `j1'(x) = 0`, increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereRootTable {
    pub roots: Vec<f64>,
}

/// The `m`-th root lies in `((m - 1/2)π, mπ)`, where the condition changes
/// sign exactly once; bisection runs until the bracket stops shrinking.
fn sphere_root(m: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let mut lo = (m as f64 - 0.5) * pi;
    let mut hi = m as f64 * pi;
    let f_lo = reflecting_condition(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = reflecting_condition(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn sphere_roots(m_max: usize) -> SphereRootTable {
    SphereRootTable {
        roots: (1..=m_max.max(1)).map(sphere_root).collect(),
    }
}

/// Upper limit on the roots the automatic tail check may add.
const MAX_ROOTS: usize = 2000;

fn cached_roots() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| sphere_roots(MAX_ROOTS).roots)
}

/// Restricted-sphere series value with its truncation diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    /// Magnitude of the last term relative to the sum.
    pub last_term_ratio: f64,
}

impl SeriesValue {
    pub fn converged(&self) -> bool {
        self.last_term_ratio <= SERIES_TOLERANCE
    }
}

/// Apparent diffusivity inside an impermeable sphere of radius `r` under a
/// finite-pulse PGSE pair (Gaussian phase approximation).
///
/// At least `m_max` terms are summed; more are added while the last term
/// exceeds [`SERIES_TOLERANCE`] of the sum. Terms decay as `x_m^-6` with
/// spacing close to π, so the neglected tail is below the last term times
/// `x_m / 5π`. A sum still above tolerance after `MAX_ROOTS` terms is
/// reported through [`SeriesValue::converged`].
pub fn neuman_adc_series(
    big_delta: f64,
    small_delta: f64,
    r: f64,
    d_free: f64,
    m_max: usize,
) -> Result<SeriesValue> {
    if !(big_delta > small_delta && small_delta > 0.0) {
        return Err(Error::invalid(format!(
            "need Δ > δ > 0, got Δ = {big_delta}, δ = {small_delta}"
        )));
    }
    if !(r > 0.0 && d_free > 0.0) {
        return Err(Error::invalid(format!(
            "radius and diffusivity must be positive, got r = {r}, D = {d_free}"
        )));
    }
    let roots = cached_roots();
    let minimum = m_max.clamp(1, MAX_ROOTS);
    let mut sum = 0.0;
    let mut last = 0.0;
    for (m, &x) in roots.iter().enumerate() {
        let alpha2 = x * x / (r * r);
        let a2d = alpha2 * d_free;
        let e = |t: f64| (-a2d * t).exp();
        let bracket = 2.0 * small_delta
            - (2.0 + e(big_delta - small_delta) - 2.0 * e(small_delta) - 2.0 * e(big_delta)
                + e(big_delta + small_delta))
                / a2d;
        last = bracket / (alpha2 * alpha2 * (x * x - 2.0));
        sum += last;
        if m + 1 >= minimum && (last / sum).abs() <= SERIES_TOLERANCE {
            break;
        }
    }
    let prefactor = 2.0 / (small_delta * small_delta * d_free * (big_delta - small_delta / 3.0));
    Ok(SeriesValue {
        value: prefactor * sum,
        last_term_ratio: (last / sum).abs(),
    })
}

/// [`neuman_adc_series`] returning only the diffusivity.
pub fn neuman_adc(big_delta: f64, small_delta: f64, r: f64, d_free: f64, m_max: usize) -> Result<f64> {
    neuman_adc_series(big_delta, small_delta, r, d_free, m_max).map(|s| s.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSphereParams {
    /// μm.
    pub r: f64,
    pub f_i: f64,
    /// Free diffusivity inside the spheres, μm²/ms.
    pub d_i_s: f64,
    /// μm²/ms.
    pub d_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CexiParams {
    pub r: f64,
    pub f_i: f64,
    pub d_i_s: f64,
    pub d_e: f64,
    /// Membrane permeability, μm/s.
    pub kappa: f64,
}

impl BallSphereParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && (0.0..=1.0).contains(&self.f_i) && self.d_i_s > 0.0 && self.d_e > 0.0) {
            return Err(Error::invalid(format!("invalid Ball & Sphere parameters {self:?}")));
        }
        Ok(())
    }
}

impl CexiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0
            && (0.0..=1.0).contains(&self.f_i)
            && self.d_i_s > 0.0
            && self.d_e > 0.0
            && self.kappa >= 0.0)
        {
            return Err(Error::invalid(format!("invalid exchange-model parameters {self:?}")));
        }
        Ok(())
    }

    pub fn without_exchange(&self) -> BallSphereParams {
        BallSphereParams {
            r: self.r,
            f_i: self.f_i,
            d_i_s: self.d_i_s,
            d_e: self.d_e,
        }
    }
}

/// Intracellular apparent diffusivity at every Δ of the protocol.
fn sphere_diffusivities(protocol: &PgseProtocol, r: f64, d_i_s: f64) -> Result<Vec<f64>> {
    protocol
        .deltas
        .iter()
        .map(|&d| neuman_adc(d, protocol.little_delta, r, d_i_s, DEFAULT_M_MAX))
        .collect()
}

/// Direction-averaged Ball & Sphere signal, laid out `[b][Δ]`.
pub fn ball_sphere_shells(params: &BallSphereParams, protocol: &PgseProtocol) -> Result<Vec<f64>> {
    params.validate()?;
    let d_i = sphere_diffusivities(protocol, params.r, params.d_i_s)?;
    let mut out = Vec::with_capacity(protocol.n_shells());
    for &b in &protocol.b_values {
        for di in d_i.iter() {
            out.push((1.0 - params.f_i) * (-b * params.d_e).exp() + params.f_i * (-b * di).exp());
        }
    }
    Ok(out)
}

pub fn ball_sphere_signal(params: &BallSphereParams, protocol: &PgseProtocol) -> Result<SignalSet> {
    let shells = ball_sphere_shells(params, protocol)?;
    let nd = protocol.deltas.len();
    Ok(SignalSet::isotropic(protocol, |bi, di| shells[bi * nd + di]))
}

/// Kärger exchange rates in 1/ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeRates {
    /// Intracellular to extracellular.
    pub k_i: f64,
    /// Extracellular to intracellular.
    pub k_ex: f64,
    /// True when `f_i` is 0 or 1 and both rates were set to zero.
    pub degenerate: bool,
}

/// `k_i = (1 - f_i) 3κ/R` and `k_ex = k_i f_i / (1 - f_i)`, κ in μm/s.
pub fn exchange_rates(f_i: f64, kappa: f64, r: f64) -> Result<ExchangeRates> {
    if !(r > 0.0 && kappa >= 0.0 && (0.0..=1.0).contains(&f_i)) {
        return Err(Error::invalid(format!(
            "exchange rates need r > 0, κ ≥ 0, f_i in [0, 1]; got r = {r}, κ = {kappa}, f_i = {f_i}"
        )));
    }
    if f_i == 0.0 || f_i == 1.0 {
        return Ok(ExchangeRates {
            k_i: 0.0,
            k_ex: 0.0,
            degenerate: true,
        });
    }
    let surface = 3.0 * kappa_um_per_ms(kappa) / r;
    let k_i = (1.0 - f_i) * surface;
    Ok(ExchangeRates {
        k_i,
        k_ex: k_i * f_i / (1.0 - f_i),
        degenerate: false,
    })
}

/// `sinh(x)/x`, accurate near zero.
#[inline]
fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        1.0 + x2 / 6.0 * (1.0 + x2 / 20.0)
    } else {
        x.sinh() / x
    }
}

/// Total magnetisation after evolving the 2×2 exchange system
/// `dM/dt = A M` from `m0` over `t`, using the closed form
/// `exp(At) = e^{μt} [cosh(νt) I + t sinhc(νt) (A - μI)]`.
pub fn exchange_evolve(a: [[f64; 2]; 2], m0: [f64; 2], t: f64) -> [f64; 2] {
    let mu = 0.5 * (a[0][0] + a[1][1]);
    let half_gap = 0.5 * (a[0][0] - a[1][1]);
    let nu = (half_gap * half_gap + a[0][1] * a[1][0]).max(0.0).sqrt();
    // e^{μt} cosh(νt) and e^{μt} t sinhc(νt), written to avoid overflow
    let (c, s) = if nu * t < 1e-3 {
        let g = (mu * t).exp();
        (g * (nu * t).cosh(), g * t * sinhc(nu * t))
    } else {
        let up = ((mu + nu) * t).exp();
        let down = ((mu - nu) * t).exp();
        (0.5 * (up + down), 0.5 * (up - down) / nu)
    };
    let b = [[a[0][0] - mu, a[0][1]], [a[1][0], a[1][1] - mu]];
    [
        c * m0[0] + s * (b[0][0] * m0[0] + b[0][1] * m0[1]),
        c * m0[1] + s * (b[1][0] * m0[0] + b[1][1] * m0[1]),
    ]
}

/// Generator of the exchange system for wavenumber squared `q2`,
/// acting on `(M_ex, M_i)`.
pub fn exchange_generator(q2: f64, d_e: f64, d_i: f64, rates: &ExchangeRates) -> [[f64; 2]; 2] {
    [
        [-(q2 * d_e + rates.k_ex), rates.k_i],
        [rates.k_ex, -(q2 * d_i + rates.k_i)],
    ]
}

/// Direction-averaged exchange-model signal, laid out `[b][Δ]`.
pub fn cexi_shells(params: &CexiParams, protocol: &PgseProtocol) -> Result<Vec<f64>> {
    params.validate()?;
    let d_i = sphere_diffusivities(protocol, params.r, params.d_i_s)?;
    let rates = exchange_rates(params.f_i, params.kappa, params.r)?;
    let m0 = [1.0 - params.f_i, params.f_i];
    let mut out = Vec::with_capacity(protocol.n_shells());
    for &b in &protocol.b_values {
        for (di, &d_in) in d_i.iter().enumerate() {
            let t_eff = protocol.effective_time(di);
            let q2 = b / t_eff;
            let m = exchange_evolve(exchange_generator(q2, params.d_e, d_in, &rates), m0, t_eff);
            out.push(m[0] + m[1]);
        }
    }
    Ok(out)
}

pub fn cexi_signal(params: &CexiParams, protocol: &PgseProtocol) -> Result<SignalSet> {
    let shells = cexi_shells(params, protocol)?;
    let nd = protocol.deltas.len();
    Ok(SignalSet::isotropic(protocol, |bi, di| shells[bi * nd + di]))
}

/// Rician magnitude noise: `sqrt((S + n1)^2 + n2^2)` with `n ~ N(0, 1/snr)`.
/// An infinite SNR returns the input unchanged.
pub fn add_rician_noise(signals: &SignalSet, snr: f64, seed: u64) -> Result<SignalSet> {
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("SNR must be positive, got {snr}")));
    }
    let mut out = signals.clone();
    out.sqrt_nmse = None;
    out.mean_sqrt_nmse = None;
    out.direction_sqrt_nmse = None;
    if snr.is_infinite() {
        return Ok(out);
    }
    let normal = Normal::new(0.0, 1.0 / snr).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.values.iter_mut() {
        let re = *v + normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        *v = re.hypot(im);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_roots_and_residuals() {
        let t = sphere_roots(20);
        let expected = [2.081576, 5.940370, 9.205840];
        for (r, e) in t.roots.iter().zip(expected) {
            assert!((r - e).abs() < 1e-6, "{r} vs {e}");
        }
        for &x in &t.roots {
            // j1'(x) itself, not the scaled condition
            assert!((reflecting_condition(x) / (x * x * x)).abs() < 1e-12);
        }
        assert!(t.roots.windows(2).all(|w| w[1] > w[0]));
        for m in 10..19 {
            let gap = t.roots[m + 1] - t.roots[m];
            assert!((gap - std::f64::consts::PI).abs() < 0.1);
        }
        assert_eq!(sphere_roots(1).roots[0].to_bits(), t.roots[0].to_bits());
    }

    #[test]
    fn large_sphere_is_quasi_free() {
        // the deficit follows the surface-to-volume law, so it halves with R
        let d100 = neuman_adc(12.0, 4.5, 100.0, 2.0, DEFAULT_M_MAX).unwrap();
        let d200 = neuman_adc(12.0, 4.5, 200.0, 2.0, DEFAULT_M_MAX).unwrap();
        assert!((d200 - 2.0).abs() / 2.0 < 0.025, "{d200}");
        let ratio = (2.0 - d100) / (2.0 - d200);
        assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn restricted_adc_falls_with_time() {
        let a = neuman_adc(12.0, 4.5, 5.0, 1.0, DEFAULT_M_MAX).unwrap();
        let b = neuman_adc(40.0, 4.5, 5.0, 1.0, DEFAULT_M_MAX).unwrap();
        assert!(a > b && b > 0.0 && a < 1.0);
        let small = neuman_adc(40.0, 4.5, 1.0, 1.0, DEFAULT_M_MAX).unwrap();
        assert!(small < 0.05);
    }

    #[test]
    fn series_is_stable_under_more_roots() {
        for &r in &[1.0, 2.0, 4.0, 8.0, 15.0] {
            for &d in &[12.0, 40.0] {
                let a = neuman_adc_series(d, 4.5, r, 2.0, DEFAULT_M_MAX).unwrap();
                let b = neuman_adc_series(d, 4.5, r, 2.0, 2 * DEFAULT_M_MAX).unwrap();
                assert!(a.converged() && b.converged());
                assert!(((a.value - b.value) / b.value).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn neuman_rejects_bad_timing() {
        assert!(neuman_adc(4.0, 4.5, 2.0, 1.0, 20).is_err());
    }

    #[test]
    fn ball_sphere_limits() {
        let p = PgseProtocol::new(vec![12.0, 40.0], 4.5, vec![0.0, 1.0], 1).unwrap();
        let ball = ball_sphere_shells(
            &BallSphereParams { r: 3.0, f_i: 0.0, d_i_s: 1.0, d_e: 2.0 },
            &p,
        )
        .unwrap();
        assert_eq!(ball[0], 1.0);
        assert!((ball[2] - (-2.0f64).exp()).abs() < 1e-15);
        let free = ball_sphere_shells(
            &BallSphereParams { r: 1e3, f_i: 1.0, d_i_s: 1.0, d_e: 2.0 },
            &p,
        )
        .unwrap();
        assert!((free[2] - (-1.0f64).exp()).abs() < 1e-2, "{}", free[2]);
    }

    #[test]
    fn exchange_rate_arithmetic() {
        let z = exchange_rates(0.5, 0.0, 3.0).unwrap();
        assert_eq!((z.k_i, z.k_ex), (0.0, 0.0));
        let k = exchange_rates(0.65, 10.0, 4.0).unwrap();
        assert!((k.k_i - 2.625e-3).abs() < 1e-15);
        assert!((k.k_ex - 4.875e-3).abs() < 1e-15);
        assert!(exchange_rates(1.0, 10.0, 4.0).unwrap().degenerate);
        assert!(exchange_rates(0.5, -1.0, 4.0).is_err());
    }

    #[test]
    fn evolve_matches_diagonal_case() {
        let m = exchange_evolve([[-0.3, 0.0], [0.0, -0.05]], [0.4, 0.6], 10.0);
        assert!((m[0] - 0.4 * (-3.0f64).exp()).abs() < 1e-15);
        assert!((m[1] - 0.6 * (-0.5f64).exp()).abs() < 1e-15);
        // repeated eigenvalue
        let m = exchange_evolve([[-0.1, 0.0], [0.0, -0.1]], [0.5, 0.5], 3.0);
        assert!((m[0] + m[1] - (-0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_b_conserves_magnetisation() {
        let p = PgseProtocol::new(vec![12.0, 40.0], 4.5, vec![0.0], 1).unwrap();
        let s = cexi_shells(
            &CexiParams { r: 3.0, f_i: 0.6, d_i_s: 1.5, d_e: 2.0, kappa: 40.0 },
            &p,
        )
        .unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn noise_free_at_infinite_snr() {
        let p = PgseProtocol::new(vec![12.0], 4.5, vec![1.0], 3).unwrap();
        let s = SignalSet::isotropic(&p, |_, _| 0.4);
        assert_eq!(add_rician_noise(&s, f64::INFINITY, 1).unwrap().values, s.values);
        assert!(add_rician_noise(&s, 0.0, 1).is_err());
        let a = add_rician_noise(&s, 30.0, 9).unwrap();
        assert_eq!(a, add_rician_noise(&s, 30.0, 9).unwrap());
        assert_ne!(a.values, s.values);
    }
}
