//! Displacement statistics from trajectories: time-dependent diffusivity and
//! kurtosis, the `c∞ + A/t` long-time law, and diffusion regime detection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{TagFilter, TrajectoryStore};
use crate::error::{Error, Result};
use crate::par::{pairwise_sum, try_map_indexed, Execution};

/// Per-axis displacement moments of one particle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatorStats {
    pub filter: TagFilter,
    pub count: usize,
    /// ms.
    pub times: Vec<f64>,
    /// `⟨x_a²⟩(t)` in μm², per time and axis.
    pub m2: Vec<[f64; 3]>,
    /// `⟨x_a⁴⟩(t)` in μm⁴.
    pub m4: Vec<[f64; 3]>,
}

/// Apparent diffusion and kurtosis coefficients averaged over the axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcAkc {
    pub filter: TagFilter,
    pub count: usize,
    pub times: Vec<f64>,
    /// μm²/ms.
    pub adc: Vec<f64>,
    pub akc: Vec<f64>,
}

pub fn propagator_stats(
    store: &TrajectoryStore,
    times: &[f64],
    filter: TagFilter,
    exec: Execution,
) -> Result<PropagatorStats> {
    if times.is_empty() {
        return Err(Error::EmptyInput("analysis times"));
    }
    let samples = times
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::invalid(format!("analysis times must be positive, got {t}")));
            }
            store
                .sample_index(t)
                .ok_or_else(|| Error::invalid(format!("no trajectory sample at t = {t} ms")))
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = store.select(filter);
    if selected.is_empty() {
        return Err(Error::EmptyInput("particles passing the tag filter"));
    }
    let n = selected.len() as f64;
    let moments = try_map_indexed(exec, samples.len(), |j| -> Result<([f64; 3], [f64; 3])> {
        let k = samples[j];
        let mut m2 = [0.0; 3];
        let mut m4 = [0.0; 3];
        let mut buf2 = Vec::with_capacity(selected.len());
        let mut buf4 = Vec::with_capacity(selected.len());
        for axis in 0..3 {
            buf2.clear();
            buf4.clear();
            for &p in &selected {
                let x = store.displacement(p, k)[axis];
                let x2 = x * x;
                buf2.push(x2);
                buf4.push(x2 * x2);
            }
            m2[axis] = pairwise_sum(&buf2) / n;
            m4[axis] = pairwise_sum(&buf4) / n;
            if !(m2[axis].is_finite() && m4[axis].is_finite()) {
                return Err(Error::NonFinite(format!("displacement moments at t = {} ms", times[j])));
            }
        }
        Ok((m2, m4))
    })?;
    let (m2, m4) = moments.into_iter().unzip();
    Ok(PropagatorStats {
        filter,
        count: selected.len(),
        times: times.to_vec(),
        m2,
        m4,
    })
}

impl PropagatorStats {
    /// `ADC_a = ⟨x_a²⟩/(2t)`, `K_a = ⟨x_a⁴⟩/⟨x_a²⟩² − 3`, averaged over axes.
    pub fn adc_akc(&self) -> AdcAkc {
        let mut adc = Vec::with_capacity(self.times.len());
        let mut akc = Vec::with_capacity(self.times.len());
        for (j, &t) in self.times.iter().enumerate() {
            let (m2, m4) = (self.m2[j], self.m4[j]);
            adc.push((0..3).map(|a| m2[a] / (2.0 * t)).sum::<f64>() / 3.0);
            akc.push(
                (0..3)
                    .map(|a| if m2[a] > 0.0 { m4[a] / (m2[a] * m2[a]) - 3.0 } else { 0.0 })
                    .sum::<f64>()
                    / 3.0,
            );
        }
        AdcAkc {
            filter: self.filter,
            count: self.count,
            times: self.times.clone(),
            adc,
            akc,
        }
    }
}

/// ADC(t) and AKC(t) of the particles selected by `filter`.
pub fn adc_akc(store: &TrajectoryStore, times: &[f64], filter: TagFilter, exec: Execution) -> Result<AdcAkc> {
    Ok(propagator_stats(store, times, filter, exec)?.adc_akc())
}

/// Every stored sample time after 0.
pub fn positive_sample_times(store: &TrajectoryStore) -> Vec<f64> {
    store.sample_times.iter().copied().filter(|&t| t > 0.0).collect()
}

/// `y(t) ≈ c_inf + amplitude / t` over `fit_window`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub c_inf: f64,
    pub amplitude: f64,
    pub mse: f64,
    pub fit_window: [f64; 2],
    pub n_points: usize,
}

/// Decaying-phase window: from the series maximum to the last point.
pub fn decaying_window(times: &[f64], values: &[f64]) -> Result<[f64; 2]> {
    let (imax, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    match (times.get(imax), times.last()) {
        (Some(&a), Some(&b)) => Ok([a, b]),
        _ => Err(Error::DegenerateWindow("empty series".into())),
    }
}

/// Linear least squares of `values` against `1/t` inside `window`
/// (the decaying window when `None`).
pub fn fit_power_law(times: &[f64], values: &[f64], window: Option<[f64; 2]>) -> Result<PowerLawFit> {
    if times.len() != values.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    let window = match window {
        Some(w) => w,
        None => decaying_window(times, values)?,
    };
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, _)| t >= window[0] && t <= window[1])
        .map(|(&t, &v)| (1.0 / t, v))
        .collect();
    if pts.len() < 4 {
        return Err(Error::DegenerateWindow(format!(
            "{} points in [{}, {}] ms, at least 4 needed",
            pts.len(),
            window[0],
            window[1]
        )));
    }
    if pts.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(Error::DegenerateWindow("non-finite points in the window".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateWindow("all window points share one time".into()));
    }
    let amplitude = sxy / sxx;
    let c_inf = my - amplitude * mx;
    let mse = pts
        .iter()
        .map(|(x, y)| (y - c_inf - amplitude * x).powi(2))
        .sum::<f64>()
        / n;
    Ok(PowerLawFit {
        c_inf,
        amplitude,
        mse,
        fit_window: window,
        n_points: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Decreasing,
    Increasing,
    /// No significant change between any two neighbours.
    Flat,
    /// Significant changes of both signs.
    Turnover,
}

/// Direction-averaged signal vs diffusion time at one b-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellTrend {
    pub b: f64,
    pub trend: Trend,
    /// S(Δ_{j+1}) − S(Δ_j).
    pub steps: Vec<f64>,
    /// Noise allowance of each step.
    pub allowance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    ExchangeDominated,
    RestrictionDominated,
    Mixed { t_shift: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub shells: Vec<ShellTrend>,
    pub diagnostics: Vec<String>,
}

/// Trend of `s` (ordered by Δ) given per-point standard errors `se`.
/// A step counts only when it exceeds `z` combined standard errors.
pub fn classify_trend(s: &[f64], se: &[f64], z: f64) -> (Trend, Vec<f64>, Vec<f64>) {
    let steps: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
    let allowance: Vec<f64> = se.windows(2).map(|w| z * w[0].hypot(w[1])).collect();
    let up = steps.iter().zip(&allowance).any(|(d, a)| *d > *a);
    let down = steps.iter().zip(&allowance).any(|(d, a)| *d < -*a);
    let net = s.last().zip(s.first()).map_or(0.0, |(l, f)| l - f);
    let net_allow = z * se.first().copied().unwrap_or(0.0).hypot(se.last().copied().unwrap_or(0.0));
    let trend = match (up, down) {
        (true, true) => Trend::Turnover,
        (true, false) => Trend::Increasing,
        (false, true) => Trend::Decreasing,
        (false, false) if net > net_allow => Trend::Increasing,
        (false, false) if net < -net_allow => Trend::Decreasing,
        _ => Trend::Flat,
    };
    (trend, steps, allowance)
}

/// Classifies the diffusion regime from direction-averaged signals
/// `signal[b][Δ]` with relative errors `rel_error[b][Δ]`. Decreasing at every
/// b is exchange dominated and increasing at every b restriction dominated;
/// anything else is mixed, with the kurtosis peak time as `t_shift`.
pub fn detect_regime(
    deltas: &[f64],
    b_values: &[f64],
    signal: &[f64],
    rel_error: Option<&[f64]>,
    akc: Option<(&[f64], &[f64])>,
    z: f64,
) -> Result<RegimeReport> {
    let nd = deltas.len();
    if nd < 3 {
        return Err(Error::invalid("regime detection needs at least 3 diffusion times"));
    }
    if signal.len() != nd * b_values.len() || rel_error.is_some_and(|e| e.len() != signal.len()) {
        return Err(Error::invalid("signal table does not match the b × Δ grid"));
    }
    let mut shells = Vec::with_capacity(b_values.len());
    let mut diagnostics = Vec::new();
    for (bi, &b) in b_values.iter().enumerate() {
        let s = &signal[bi * nd..(bi + 1) * nd];
        let se: Vec<f64> = match rel_error {
            Some(e) => s.iter().zip(&e[bi * nd..(bi + 1) * nd]).map(|(s, r)| s * r).collect(),
            None => vec![0.0; nd],
        };
        let (trend, steps, allowance) = classify_trend(s, &se, z);
        if trend == Trend::Turnover || trend == Trend::Flat {
            diagnostics.push(format!("b = {b}: {trend:?} with steps {steps:?} (allowance {allowance:?})"));
        }
        shells.push(ShellTrend {
            b,
            trend,
            steps,
            allowance,
        });
    }
    let all = |t: Trend| shells.iter().all(|s| s.trend == t);
    let regime = if all(Trend::Decreasing) {
        Regime::ExchangeDominated
    } else if all(Trend::Increasing) {
        Regime::RestrictionDominated
    } else {
        let t_shift = akc.and_then(|(t, k)| {
            k.iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| t[i])
        });
        Regime::Mixed { t_shift }
    };
    Ok(RegimeReport {
        regime,
        shells,
        diagnostics,
    })
}

/// Rows `t_ms,adc,akc,tag,substrate_id,kappa` for each series.
/// One simulation's worth of time-dependence curves for [`write_adc_csv`].
#[derive(Debug, Clone)]
pub struct AdcGroup {
    pub sim_id: String,
    pub substrate_id: String,
    pub kappa: f64,
    pub series: Vec<AdcAkc>,
}

pub fn write_adc_csv<W: Write>(out: W, groups: &[AdcGroup]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        t_ms: f64,
        adc: f64,
        akc: f64,
        tag: TagFilter,
        substrate_id: &'a str,
        kappa: f64,
        sim_id: &'a str,
    }
    let mut w = csv::Writer::from_writer(out);
    for g in groups {
        for s in &g.series {
            for j in 0..s.times.len() {
                w.serialize(Row {
                    t_ms: s.times[j],
                    adc: s.adc[j],
                    akc: s.akc[j],
                    tag: s.filter,
                    substrate_id: &g.substrate_id,
                    kappa: g.kappa,
                    sim_id: &g.sim_id,
                })
                .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
