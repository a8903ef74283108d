//! Bounded multi-start Levenberg–Marquardt estimation of the Ball & Sphere
//! and exchange (CEXI) model parameters from direction-averaged signals.
//!
//! Each parameter lives in a box and is optimised through
//! `x = lo + (hi - lo) / (1 + e^{-u})`, so every iterate is strictly inside
//! its bounds. Residuals account for the magnitude noise floor:
//! `S_obs − sqrt(S_model² + σ²)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ball_sphere_shells, cexi_shells, BallSphereParams, CexiParams};
use crate::par::{map_indexed, Execution};
use crate::sequence::{PgseProtocol, SignalSet};

/// Internal coordinates are clamped here so the sigmoid never rounds onto a bound.
const U_LIMIT: f64 = 30.0;
const FD_STEP: f64 = 1e-6;
const COST_TOLERANCE: f64 = 1e-10;
const GRADIENT_TOLERANCE: f64 = 1e-8;
const MAX_DAMPING: f64 = 1e16;
/// Singular-value ratio below which the Jacobian counts as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;
/// κ estimates this close to the cap are not identified.
const CAP_FLAG_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BallSphere,
    Cexi,
}

impl ModelKind {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::BallSphere => &["r", "f_i", "d_i_s", "d_e"],
            ModelKind::Cexi => &["r", "f_i", "d_i_s", "d_e", "kappa"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BallSphere => "ball_sphere",
            ModelKind::Cexi => "cexi",
        }
    }

    /// Direction-averaged model signal `[b][Δ]` for parameters in name order.
    pub fn shells(self, x: &[f64], protocol: &PgseProtocol) -> Result<Vec<f64>> {
        match self {
            ModelKind::BallSphere => ball_sphere_shells(
                &BallSphereParams {
                    r: x[0],
                    f_i: x[1],
                    d_i_s: x[2],
                    d_e: x[3],
                },
                protocol,
            ),
            ModelKind::Cexi => cexi_shells(
                &CexiParams {
                    r: x[0],
                    f_i: x[1],
                    d_i_s: x[2],
                    d_e: x[3],
                    kappa: x[4],
                },
                protocol,
            ),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ball_sphere" => Ok(ModelKind::BallSphere),
            "cexi" => Ok(ModelKind::Cexi),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    /// μm.
    pub r: [f64; 2],
    pub f_i: [f64; 2],
    /// μm²/ms.
    pub d_i_s: [f64; 2],
    pub d_e: [f64; 2],
    /// μm/s.
    pub kappa: [f64; 2],
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            r: [0.1, 20.0],
            f_i: [0.1, 0.9],
            d_i_s: [0.01, 3.0],
            d_e: [0.01, 3.0],
            kappa: [0.0, 1000.0],
        }
    }
}

impl FitBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("r", self.r),
            ("f_i", self.f_i),
            ("d_i_s", self.d_i_s),
            ("d_e", self.d_e),
            ("kappa", self.kappa),
        ] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::invalid(format!("bounds for {name} must satisfy lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    fn boxes(&self, model: ModelKind) -> Vec<[f64; 2]> {
        let mut b = vec![self.r, self.f_i, self.d_i_s, self.d_e];
        if model == ModelKind::Cexi {
            b.push(self.kappa);
        }
        b
    }
}

#[inline]
fn to_box(u: f64, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) / (1.0 + (-u.clamp(-U_LIMIT, U_LIMIT)).exp())
}

#[inline]
fn from_box(x: f64, [lo, hi]: [f64; 2]) -> f64 {
    let p = ((x - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln().clamp(-U_LIMIT, U_LIMIT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub init: Vec<f64>,
    pub params: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub param_names: Vec<String>,
    pub best_params: Vec<f64>,
    /// Sum of squared residuals.
    pub best_cost: f64,
    pub per_start: Vec<StartRecord>,
    pub n_obs: usize,
    pub bic: f64,
    pub sigma: f64,
    /// The best start's Jacobian was numerically rank deficient.
    pub rank_deficient: bool,
    /// κ ended within 5% of its cap and is not identified.
    pub kappa_at_cap: bool,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.best_params[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub n_starts: usize,
    /// Noise level of a single measurement, `1/SNR`.
    pub sigma: f64,
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 10,
            sigma: 0.0,
            seed: 0,
            max_iterations: 500,
        }
    }
}

/// `n ln(cost/n) + k ln n`; NaN unless `n_obs > n_params`.
pub fn bic(best_cost: f64, n_params: usize, n_obs: usize) -> f64 {
    if n_obs <= n_params {
        return f64::NAN;
    }
    let n = n_obs as f64;
    n * (best_cost / n).ln() + n_params as f64 * n.ln()
}

/// Offset-Gaussian noise floor: the expected magnitude of a noisy signal.
#[inline]
pub fn noise_floor(model: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        model
    } else {
        model.hypot(sigma)
    }
}

struct Problem<'a> {
    model: ModelKind,
    protocol: &'a PgseProtocol,
    observed: Vec<f64>,
    boxes: Vec<[f64; 2]>,
    sigma: f64,
}

impl Problem<'_> {
    fn params(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.boxes).map(|(&u, &b)| to_box(u, b)).collect()
    }

    fn residuals(&self, u: &[f64]) -> Option<DVector<f64>> {
        let shells = self.model.shells(&self.params(u), self.protocol).ok()?;
        let r = DVector::from_iterator(
            shells.len(),
            self.observed
                .iter()
                .zip(&shells)
                .map(|(o, m)| o - noise_floor(*m, self.sigma)),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self, u: &[f64], r0: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(r0.len(), u.len());
        let mut probe = u.to_vec();
        for k in 0..u.len() {
            let h = FD_STEP * u[k].abs().max(1.0);
            probe[k] = u[k] + h;
            let r = self.residuals(&probe)?;
            probe[k] = u[k];
            j.set_column(k, &((r - r0) / h));
        }
        Some(j)
    }

    /// Damped Gauss–Newton with Marquardt scaling from `u0`.
    fn solve(&self, u0: Vec<f64>, max_iterations: usize) -> (Vec<f64>, f64, bool, usize, bool) {
        let mut u = u0;
        let Some(mut r) = self.residuals(&u) else {
            return (u, f64::INFINITY, false, 0, false);
        };
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let mut converged = false;
        let mut iterations = 0;
        let mut rank_deficient = false;
        while iterations < max_iterations {
            iterations += 1;
            let Some(j) = self.jacobian(&u, &r) else { break };
            let jt = j.transpose();
            let grad = &jt * &r;
            if grad.norm() < GRADIENT_TOLERANCE {
                converged = true;
                break;
            }
            let jtj = &jt * &j;
            let mut improved = false;
            while lambda < MAX_DAMPING {
                let mut a = jtj.clone();
                for k in 0..u.len() {
                    a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = u
                    .iter()
                    .zip(step.iter())
                    .map(|(u, s)| (u + s).clamp(-U_LIMIT, U_LIMIT))
                    .collect();
                match self.residuals(&trial) {
                    Some(rt) if rt.norm_squared() < cost => {
                        let new_cost = rt.norm_squared();
                        let change = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                        u = trial;
                        r = rt;
                        cost = new_cost;
                        lambda = (lambda / 3.0).max(1e-12);
                        improved = true;
                        if change < COST_TOLERANCE {
                            converged = true;
                        }
                        break;
                    }
                    _ => lambda *= 4.0,
                }
            }
            if !improved {
                // no descent direction left at finite-difference resolution
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }
        if let Some(j) = self.jacobian(&u, &r) {
            let sv = j.singular_values();
            let max = sv.max();
            rank_deficient = !(max > 0.0) || sv.min() / max < RANK_TOLERANCE;
        }
        (u, cost, converged, iterations, rank_deficient)
    }
}

/// Fits `model` to the direction-averaged signals of `signals`.
pub fn fit(
    signals: &SignalSet,
    protocol: &PgseProtocol,
    model: ModelKind,
    bounds: &FitBounds,
    options: &FitOptions,
    exec: Execution,
) -> Result<FitResult> {
    bounds.validate()?;
    if signals.b_values != protocol.b_values || signals.deltas != protocol.deltas {
        return Err(Error::invalid("signals and protocol cover different b-values or diffusion times"));
    }
    let distinct = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s.len()
    };
    if distinct(&protocol.deltas) < 2 || distinct(&protocol.b_values) < 3 {
        return Err(Error::invalid("fitting needs at least 2 diffusion times and 3 b-values"));
    }
    if !(options.sigma >= 0.0 && options.sigma.is_finite()) {
        return Err(Error::invalid(format!("noise level must be non-negative, got {}", options.sigma)));
    }
    if options.n_starts == 0 {
        return Err(Error::invalid("at least one start is required"));
    }
    let problem = Problem {
        model,
        protocol,
        observed: signals.means(),
        boxes: bounds.boxes(model),
        sigma: options.sigma,
    };
    if problem.observed.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed signals".into()));
    }
    let per_start: Vec<StartRecord> = map_indexed(exec, options.n_starts, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(s as u64);
        let init: Vec<f64> = problem
            .boxes
            .iter()
            .map(|&[lo, hi]| lo + (hi - lo) * rng.gen::<f64>())
            .collect();
        let u0 = init.iter().zip(&problem.boxes).map(|(&x, &b)| from_box(x, b)).collect();
        let (u, cost, converged, iterations, rank_deficient) = problem.solve(u0, options.max_iterations);
        StartRecord {
            init,
            params: problem.params(&u),
            cost,
            converged,
            iterations,
            rank_deficient,
        }
    });
    let best = per_start
        .iter()
        .filter(|s| s.cost.is_finite() && s.converged)
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .ok_or_else(|| Error::FitFailed(format!("all {} starts diverged", options.n_starts)))?
        .clone();
    let n_obs = problem.observed.len();
    let kappa_at_cap = model == ModelKind::Cexi && {
        let [lo, hi] = bounds.kappa;
        best.params[4] >= hi - CAP_FLAG_FRACTION * (hi - lo)
    };
    Ok(FitResult {
        model,
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        best_params: best.params.clone(),
        best_cost: best.cost,
        bic: bic(best.cost, model.n_params(), n_obs),
        n_obs,
        sigma: options.sigma,
        rank_deficient: best.rank_deficient,
        kappa_at_cap,
        per_start,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub truth: Option<f64>,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub model: ModelKind,
    pub n_realizations: usize,
    pub params: Vec<ParamSummary>,
}

impl EstimateSummary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Mean, sample variance and bias of each parameter over noise realizations.
pub fn aggregate(fits: &[FitResult], truth: &[(&str, f64)]) -> Result<EstimateSummary> {
    let first = fits.first().ok_or(Error::EmptyInput("fits"))?;
    if fits.iter().any(|f| f.model != first.model) {
        return Err(Error::invalid("cannot aggregate fits of different models"));
    }
    let n = fits.len() as f64;
    let params = first
        .param_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mean = fits.iter().map(|f| f.best_params[k]).sum::<f64>() / n;
            // undefined for a single realization
            let variance = if fits.len() < 2 {
                f64::NAN
            } else {
                fits.iter().map(|f| (f.best_params[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            };
            let truth = truth.iter().find(|(t, _)| t == name).map(|(_, v)| *v);
            ParamSummary {
                name: name.clone(),
                mean,
                variance,
                truth,
                bias: truth.map(|t| mean - t),
            }
        })
        .collect();
    Ok(EstimateSummary {
        model: first.model,
        n_realizations: fits.len(),
        params,
    })
}

/// Rows `substrate_id,kappa_true,model,param,mean,variance,truth`.
/// One aggregated (simulation, model, SNR) cell for [`write_aggregate_csv`].
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub sim_id: String,
    pub substrate_id: String,
    pub kappa_true: f64,
    pub snr: f64,
    pub summary: EstimateSummary,
}

pub fn write_aggregate_csv<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        substrate_id: &'a str,
        kappa_true: f64,
        model: &'a str,
        param: &'a str,
        mean: f64,
        variance: f64,
        truth: Option<f64>,
        snr: f64,
        n_realizations: usize,
        sim_id: &'a str,
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        for p in &r.summary.params {
            w.serialize(Row {
                substrate_id: &r.substrate_id,
                kappa_true: r.kappa_true,
                model: r.summary.model.name(),
                param: &p.name,
                mean: p.mean,
                variance: p.variance,
                truth: p.truth,
                snr: r.snr,
                n_realizations: r.summary.n_realizations,
                sim_id: &r.sim_id,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_arithmetic() {
        let d = bic(1.0, 5, 480) - bic(1.0, 4, 480);
        assert!((d - 480f64.ln()).abs() < 1e-12);
        assert!((d - 6.1738).abs() < 1e-4);
        let d = bic(0.5, 5, 480) - bic(1.0, 4, 480);
        assert!((d - (480.0 * 0.5f64.ln() + 480f64.ln())).abs() < 1e-9);
        assert!((d + 326.5).abs() < 0.1);
        assert!(bic(1.0, 5, 5).is_nan());
    }

    #[test]
    fn transform_round_trip() {
        let b = [0.1, 20.0];
        for x in [0.2, 1.0, 4.0, 19.5] {
            assert!((to_box(from_box(x, b), b) - x).abs() < 1e-9);
        }
        assert!(to_box(1e9, b) < 20.0 && to_box(-1e9, b) > 0.1);
    }

    #[test]
    fn floor_is_plain_model_without_noise() {
        assert_eq!(noise_floor(0.3, 0.0), 0.3);
        assert!((noise_floor(0.3, 0.4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_fits_have_zero_variance() {
        let f = FitResult {
            model: ModelKind::BallSphere,
            param_names: ModelKind::BallSphere.param_names().iter().map(|s| s.to_string()).collect(),
            best_params: vec![4.0, 0.6, 1.0, 1.2],
            best_cost: 0.0,
            per_start: vec![],
            n_obs: 20,
            bic: 0.0,
            sigma: 0.0,
            rank_deficient: false,
            kappa_at_cap: false,
        };
        let single = aggregate(std::slice::from_ref(&f), &[]).unwrap();
        assert!(single.params[0].variance.is_nan());
        let s = aggregate(&[f.clone(), f], &[("r", 3.0)]).unwrap();
        assert!(s.params.iter().all(|p| p.variance == 0.0));
        assert_eq!(s.get("r").unwrap().bias, Some(1.0));
        assert!(s.get("f_i").unwrap().truth.is_none());
    }
}
