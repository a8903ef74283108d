//! Experiment configuration: one TOML document, sweeps written as lists and
//! expanded as cross-products.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use permex::engine::{ParticleCount, SimulationConfig, DEFAULT_TRANSIT_CONSTANT};
use permex::fitting::{FitBounds, ModelKind};
use permex::sequence::PgseProtocol;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub substrate: SubstrateSpec,
    pub simulation: SimulationSpec,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    pub fitting: FittingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstrateSpec {
    pub side_um: f64,
    pub mean_radii_um: Vec<f64>,
    /// Radius standard deviation as a fraction of the mean.
    #[serde(default = "default_std_fraction")]
    pub std_fraction: f64,
    pub target_icvf: f64,
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// μm²/ms.
    pub d_intra0: Vec<f64>,
    /// μm²/ms.
    pub d_extra0: Vec<f64>,
    pub kappa_um_per_s: Vec<f64>,
    pub density_per_um3: f64,
    #[serde(default = "default_dt")]
    pub dt_ms: f64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    /// Minimum simulated time; the protocol may require more.
    #[serde(default)]
    pub duration_ms: Option<f64>,
    #[serde(default = "default_transit_constant")]
    pub transit_constant: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub deltas_ms: Vec<f64>,
    pub little_delta_ms: f64,
    #[serde(default)]
    pub te_ms: Option<f64>,
    /// ms/μm².
    pub b_values: Vec<f64>,
    pub n_directions: usize,
    #[serde(default = "default_bootstrap")]
    pub n_bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Noise allowance of the regime classifier, in bootstrap standard errors.
    #[serde(default = "default_z")]
    pub regime_z: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec { regime_z: default_z() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittingSpec {
    pub models: Vec<ModelKind>,
    /// `inf` fits the noise-free signal once.
    pub snr: Vec<f64>,
    pub n_noise_realizations: usize,
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    pub seed: u64,
    #[serde(default)]
    pub bounds: FitBounds,
    #[serde(default = "default_fit_iterations")]
    pub max_iterations: usize,
}

fn default_std_fraction() -> f64 {
    0.01
}
fn default_max_iterations() -> usize {
    200_000
}
fn default_dt() -> f64 {
    0.005
}
fn default_stride() -> usize {
    100
}
fn default_transit_constant() -> f64 {
    DEFAULT_TRANSIT_CONSTANT
}
fn default_bootstrap() -> usize {
    100
}
fn default_z() -> f64 {
    2.0
}
fn default_starts() -> usize {
    10
}
fn default_fit_iterations() -> usize {
    500
}

/// One substrate of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstratePoint {
    pub id: String,
    pub mean_radius: f64,
    pub seed: u64,
}

/// One simulation of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoint {
    pub id: String,
    pub substrate: usize,
    pub d_intra0: f64,
    pub d_extra0: f64,
    pub kappa: f64,
}

/// Compact number tag for identifiers: `2.5 → 2p5`.
pub fn tag(x: f64) -> String {
    format!("{x}").replace('.', "p").replace('-', "m")
}

/// Stable per-purpose seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn override_seeds(&mut self, seed: u64) {
        self.substrate.seed = seed;
        self.simulation.seed = seed;
        self.fitting.seed = seed;
    }

    /// SHA-256 of the canonical JSON form, output directory excluded so a
    /// moved run still validates.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn protocol(&self) -> Result<PgseProtocol, CliError> {
        let p = &self.protocol;
        let mut proto = PgseProtocol::new(p.deltas_ms.clone(), p.little_delta_ms, p.b_values.clone(), p.n_directions)
            .map_err(|e| CliError::Validation(format!("protocol: {e}")))?;
        proto.te = p.te_ms;
        Ok(proto)
    }

    pub fn substrates(&self) -> Vec<SubstratePoint> {
        self.substrate
            .mean_radii_um
            .iter()
            .enumerate()
            .map(|(k, &r)| SubstratePoint {
                id: format!("s{}_r{}", k + 1, tag(r)),
                mean_radius: r,
                seed: self.substrate.seed.wrapping_add(k as u64),
            })
            .collect()
    }

    pub fn simulations(&self) -> Vec<SimPoint> {
        let subs = self.substrates();
        let s = &self.simulation;
        let mut out = Vec::new();
        for (k, sub) in subs.iter().enumerate() {
            for &di in &s.d_intra0 {
                for &de in &s.d_extra0 {
                    for &kappa in &s.kappa_um_per_s {
                        out.push(SimPoint {
                            id: format!("{}_di{}_de{}_k{}", sub.id, tag(di), tag(de), tag(kappa)),
                            substrate: k,
                            d_intra0: di,
                            d_extra0: de,
                            kappa,
                        });
                    }
                }
            }
        }
        out
    }

    /// Noise realizations actually fitted at one SNR.
    pub fn realizations(&self, snr: f64) -> usize {
        if snr.is_infinite() {
            1
        } else {
            self.fitting.n_noise_realizations
        }
    }

    pub fn n_fits(&self) -> usize {
        let per_sim: usize = self.fitting.snr.iter().map(|&s| self.realizations(s)).sum();
        self.simulations().len() * per_sim * self.fitting.models.len()
    }

    /// Simulated time: the longest Δ + δ or `duration_ms`, whichever is larger.
    pub fn duration(&self) -> f64 {
        let p = &self.protocol;
        let need = p.deltas_ms.iter().fold(0.0f64, |m, &d| m.max(d)) + p.little_delta_ms;
        self.simulation.duration_ms.map_or(need, |d| d.max(need))
    }

    pub fn sample_interval(&self) -> f64 {
        self.simulation.dt_ms * self.simulation.record_stride as f64
    }

    pub fn sim_config(&self, point: &SimPoint) -> SimulationConfig {
        let s = &self.simulation;
        // whole number of sampling intervals
        let interval = self.sample_interval();
        let duration = (self.duration() / interval - 1e-9).ceil() * interval;
        SimulationConfig {
            d_intra0: point.d_intra0,
            d_extra0: point.d_extra0,
            kappa: point.kappa,
            dt: s.dt_ms,
            duration,
            particles: ParticleCount::Density(s.density_per_um3),
            seed: derive_seed(s.seed, &format!("walk/{}", point.id)),
            record_stride: s.record_stride,
            transit_constant: s.transit_constant,
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = String::new();
        let mut bad = |msg: String| {
            let _ = writeln!(errs, "  - {msg}");
        };
        let sub = &self.substrate;
        if !(sub.side_um > 0.0 && sub.side_um.is_finite()) {
            bad(format!("substrate.side_um must be positive, got {}", sub.side_um));
        }
        if sub.mean_radii_um.is_empty() {
            bad("substrate.mean_radii_um is empty".into());
        }
        for &r in &sub.mean_radii_um {
            if !(r > 0.0) || 4.0 * r > sub.side_um {
                bad(format!("mean radius {r} μm must be positive and at most a quarter of the voxel side"));
            }
        }
        if !(sub.std_fraction >= 0.0 && sub.std_fraction < 1.0) {
            bad(format!("substrate.std_fraction must lie in [0, 1), got {}", sub.std_fraction));
        }
        // random dense packing tops out near 0.64-0.66
        if !(sub.target_icvf > 0.0 && sub.target_icvf <= 0.66) {
            bad(format!(
                "substrate.target_icvf {} is not reachable by random packing (must lie in (0, 0.66])",
                sub.target_icvf
            ));
        }
        let sim = &self.simulation;
        for (name, list) in [("d_intra0", &sim.d_intra0), ("d_extra0", &sim.d_extra0)] {
            if list.is_empty() {
                bad(format!("simulation.{name} is empty"));
            }
            for &d in list.iter() {
                if !(d > 0.0 && d <= 3.5) {
                    bad(format!("simulation.{name} value {d} outside (0, 3.5] μm²/ms"));
                }
            }
        }
        if sim.kappa_um_per_s.is_empty() {
            bad("simulation.kappa_um_per_s is empty".into());
        }
        for &k in &sim.kappa_um_per_s {
            if !(k >= 0.0 && k.is_finite()) {
                bad(format!("permeability {k} μm/s must be non-negative"));
            }
        }
        if !(sim.density_per_um3 > 0.0) {
            bad(format!("simulation.density_per_um3 must be positive, got {}", sim.density_per_um3));
        }
        if !(sim.dt_ms > 0.0) || sim.record_stride == 0 {
            bad("simulation.dt_ms and record_stride must be positive".into());
        }
        if !(sim.transit_constant > 0.0) {
            bad("simulation.transit_constant must be positive".into());
        }
        let proto = &self.protocol;
        match self.protocol() {
            Err(e) => bad(e.to_string()),
            Ok(_) => {
                let interval = self.sample_interval();
                let on_grid = |t: f64| ((t / interval).round() * interval - t).abs() <= 1e-9 * t.max(1.0);
                for &t in proto.deltas_ms.iter().chain([&proto.little_delta_ms]) {
                    if !on_grid(t) {
                        bad(format!("timing {t} ms is not a multiple of the {interval} ms sampling interval"));
                    }
                }
                if proto.little_delta_ms < 4.0 * interval {
                    bad(format!(
                        "δ = {} ms spans fewer than 4 sampling intervals of {interval} ms",
                        proto.little_delta_ms
                    ));
                }
            }
        }
        // the regime classifier needs two consecutive signal steps
        if proto.deltas_ms.len() < 3 || proto.b_values.len() < 3 {
            bad("protocol needs at least 3 diffusion times and 3 b-values".into());
        }
        if proto.n_bootstrap < 100 {
            bad(format!("protocol.n_bootstrap must be at least 100, got {}", proto.n_bootstrap));
        }
        let fit = &self.fitting;
        if fit.models.is_empty() {
            bad("fitting.models is empty".into());
        }
        if fit.snr.is_empty() {
            bad("fitting.snr is empty".into());
        }
        for &s in &fit.snr {
            if !(s > 0.0) {
                bad(format!("SNR {s} must be positive (inf for noise-free)"));
            }
        }
        if fit.n_noise_realizations == 0 || fit.n_starts == 0 || fit.max_iterations == 0 {
            bad("fitting counts must be at least 1".into());
        }
        if let Err(e) = fit.bounds.validate() {
            bad(e.to_string());
        }
        if self.output_dir.as_os_str().is_empty() {
            bad("output_dir is empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(format!("invalid configuration:\n{}", errs.trim_end())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[substrate]
side_um = 20.0
mean_radii_um = [2.0, 3.0]
target_icvf = 0.5
seed = 1
[simulation]
d_intra0 = [2.0]
d_extra0 = [1.0, 2.0]
kappa_um_per_s = [0.0, 25.0]
density_per_um3 = 0.1
seed = 2
[protocol]
deltas_ms = [12.0, 16.0, 20.0]
little_delta_ms = 4.5
b_values = [1.0, 2.5, 4.0]
n_directions = 6
[fitting]
models = ["ball_sphere", "cexi"]
snr = [80.0, inf]
n_noise_realizations = 3
seed = 3
"#;

    fn minimal() -> ExperimentConfig {
        let c: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        c.validate().unwrap();
        c
    }

    #[test]
    fn sweep_is_a_cross_product() {
        let c = minimal();
        let sims = c.simulations();
        assert_eq!(sims.len(), 2 * 2 * 2);
        assert_eq!(sims[0].id, "s1_r2_di2_de1_k0");
        assert_eq!(sims[7].id, "s2_r3_di2_de2_k25");
        // (3 noisy + 1 clean) per model
        assert_eq!(c.n_fits(), 8 * 4 * 2);
    }

    #[test]
    fn unreachable_icvf_is_rejected() {
        let mut c = minimal();
        c.substrate.target_icvf = 0.9;
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("target_icvf"));
    }

    #[test]
    fn off_grid_timing_is_rejected() {
        let mut c = minimal();
        c.protocol.deltas_ms = vec![12.2, 16.0, 20.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seeds() {
        let a = minimal();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.override_seeds(99);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn duration_covers_protocol_on_grid() {
        let c = minimal();
        let sim = c.sim_config(&c.simulations()[0]);
        assert!((sim.duration - 24.5).abs() < 1e-12);
        assert_ne!(sim.seed, c.sim_config(&c.simulations()[1]).seed);
    }

    #[test]
    fn tags() {
        assert_eq!(tag(2.5), "2p5");
        assert_eq!(tag(10.0), "10");
    }
}
