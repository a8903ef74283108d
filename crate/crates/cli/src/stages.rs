//! The six pipeline stages. Each reads only sealed upstream outputs and
//! writes into its own directory under the run's output root.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use permex::analysis::{
    adc_akc, detect_regime, fit_power_law, positive_sample_times, write_adc_csv, AdcAkc, AdcGroup, PowerLawFit,
    RegimeReport,
};
use permex::engine::io::{load_trajectories, save_trajectories};
use permex::engine::{run_simulation, StepContext, TagFilter, TrajectoryStore};
use permex::fitting::{aggregate, fit, write_aggregate_csv, AggregateRow, FitOptions, FitResult};
use permex::models::add_rician_noise;
use permex::par::{self, Execution};
use permex::sequence::{
    bootstrap_nmse, read_mean_signal_csv, read_signal_csv_file, write_mean_signal_csv, write_signal_csv,
    MeanSignalRow, PhaseTable, SignalSet,
};
use permex::substrate::{generate, read_substrate, write_substrate, Substrate, SubstrateHeader};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{derive_seed, tag, ExperimentConfig, SimPoint};
use crate::error::CliError;
use crate::provenance::{check_stage, require_upstream, stage_dir, Provenance, Stage, StageState, StageWriter};

pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub force: bool,
    pub exec: Execution,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> Self {
        let hash = config.hash();
        Context {
            config,
            hash,
            force: false,
            exec: Execution::Parallel,
        }
    }

    fn out(&self) -> &Path {
        &self.config.output_dir
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        stage_dir(self.out(), stage)
    }

    fn begin(&self, stage: Stage, seed: u64) -> Result<StageWriter, CliError> {
        StageWriter::begin(self.out(), stage, Provenance::new(&self.hash, seed))
    }
}

fn log(stage: Stage, msg: impl AsRef<str>) {
    eprintln!("[{}] {}", stage.name(), msg.as_ref());
}

/// Runs one stage: dependency check, skip if already complete, then work.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<(), CliError> {
    require_upstream(ctx.out(), stage, &ctx.hash)?;
    if !ctx.force {
        if let StageState::Complete = check_stage(ctx.out(), stage, &ctx.hash) {
            log(stage, "outputs are complete for this configuration; skipping (use --force to rerun)");
            return Ok(());
        }
    }
    let t0 = Instant::now();
    match stage {
        Stage::GenSubstrate => gen_substrate(ctx),
        Stage::Simulate => simulate(ctx),
        Stage::Signal => signal(ctx),
        Stage::Analyze => analyze(ctx),
        Stage::Fit => fit_stage(ctx),
        Stage::Report => report(ctx),
    }?;
    log(stage, format!("done in {:.1} s", t0.elapsed().as_secs_f64()));
    Ok(())
}

pub fn dry_run_plan(ctx: &Context, stage: Stage) -> String {
    let c = &ctx.config;
    let sims = c.simulations();
    let side = c.substrate.side_um;
    let sim0 = sims.first().map(|p| c.sim_config(p));
    let particles = sim0.as_ref().map_or(0, |s| s.particle_count(side));
    let steps = sim0.as_ref().map_or(0, |s| s.n_steps());
    let p = &c.protocol;
    let per_sim: usize = c.fitting.snr.iter().map(|&s| c.realizations(s)).sum();
    let mut s = format!("plan for `permex {}` (config hash {})\n", stage.name(), &ctx.hash[..12]);
    s += &format!("  output: {}\n", c.output_dir.display());
    s += &format!(
        "  substrates: {} (L = {side} μm, target icvf {})\n",
        c.substrates().len(),
        c.substrate.target_icvf
    );
    s += &format!(
        "  simulations: {} ({particles} particles × {steps} steps each)\n",
        sims.len()
    );
    s += &format!(
        "  signals: {} ({} b × {} Δ × {} directions, {} bootstrap replicates)\n",
        sims.len(),
        p.b_values.len(),
        p.deltas_ms.len(),
        p.n_directions,
        p.n_bootstrap
    );
    s += &format!(
        "  fits: {} ({} simulations × {per_sim} noise cases × {} models)\n",
        c.n_fits(),
        sims.len(),
        c.fitting.models.len()
    );
    for st in [
        Stage::GenSubstrate,
        Stage::Simulate,
        Stage::Signal,
        Stage::Analyze,
        Stage::Fit,
        Stage::Report,
    ] {
        let state = match check_stage(ctx.out(), st, &ctx.hash) {
            StageState::Complete => "complete".to_string(),
            StageState::Missing => "not run".to_string(),
            StageState::Invalid(why) => format!("stale: {why}"),
        };
        s += &format!("  stage {:<13} {state}\n", st.name());
    }
    s
}

// ---------------------------------------------------------------- substrate

fn gen_substrate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let spec = &c.substrate;
    let points = c.substrates();
    let mut w = ctx.begin(Stage::GenSubstrate, spec.seed)?;
    // distinct substrates are independent
    let built = par::try_map_indexed(ctx.exec, points.len(), |k| {
        let p = &points[k];
        let t0 = Instant::now();
        let s = generate(
            spec.side_um,
            p.mean_radius,
            spec.std_fraction * p.mean_radius,
            spec.target_icvf,
            p.seed,
            spec.max_iterations,
        )
        .map_err(|e| CliError::context(&format!("substrate {}", p.id), e))?;
        log(
            Stage::GenSubstrate,
            format!(
                "{}: {} spheres, icvf {:.4} ({:.1} s)",
                p.id,
                s.spheres().len(),
                s.icvf(),
                t0.elapsed().as_secs_f64()
            ),
        );
        Ok::<_, CliError>(s)
    })?;
    let mut summary = Vec::new();
    for (p, s) in points.iter().zip(&built) {
        write_substrate(s, &w.dir, &p.id, Some(&ctx.hash)).map_err(|e| CliError::context(&p.id, e))?;
        w.register(format!("{}.substrate.json", p.id));
        w.register(format!("{}.spheres.csv", p.id));
        w.record_seed(p.id.clone(), p.seed);
        summary.push(json!({
            "id": p.id,
            "mean_radius_um": p.mean_radius,
            "seed": p.seed,
            "n_spheres": s.spheres().len(),
            "icvf": s.icvf(),
            "radius_stats": s.radius_stats(),
        }));
    }
    w.finish(json!({ "substrates": summary }))?;
    Ok(())
}

fn load_substrate(ctx: &Context, index: usize) -> Result<(SubstrateHeader, Substrate), CliError> {
    let id = &ctx.config.substrates()[index].id;
    let path = ctx.dir(Stage::GenSubstrate).join(format!("{id}.substrate.json"));
    read_substrate(&path).map_err(|e| CliError::context(&format!("substrate {id}"), e))
}

// --------------------------------------------------------------- simulation

#[derive(Serialize, Deserialize)]
struct TrajectorySidecar {
    provenance: Provenance,
    sim_id: String,
    substrate_id: String,
    config: permex::engine::SimulationConfig,
    n_particles: usize,
    n_samples: usize,
    sample_interval_ms: f64,
    /// Crossing probabilities per membrane hit.
    p_leave_sphere: f64,
    p_enter_sphere: f64,
    intra_fraction_start: f64,
    intra_fraction_end: f64,
}

fn simulate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let sims = c.simulations();
    let subs = c.substrates();
    let mut w = ctx.begin(Stage::Simulate, c.simulation.seed)?;
    let mut cache: Option<(usize, Substrate)> = None;
    let mut summary = Vec::new();
    for point in &sims {
        if cache.as_ref().map(|(k, _)| *k) != Some(point.substrate) {
            cache = Some((point.substrate, load_substrate(ctx, point.substrate)?.1));
        }
        let substrate = &cache.as_ref().expect("loaded above").1;
        let cfg = c.sim_config(point);
        let what = format!("simulation {}", point.id);
        let probs = StepContext::new(substrate, &cfg)
            .map_err(|e| CliError::context(&what, e))?
            .probabilities();
        let t0 = Instant::now();
        let store = run_simulation(substrate, &cfg, &cfg.regular_sample_times(), ctx.exec)
            .map_err(|e| CliError::context(&what, e))?;
        let rel = format!("{}.traj", point.id);
        save_trajectories(&store, &w.path(&rel)).map_err(|e| CliError::context(&what, e))?;
        w.register(rel);
        let last = store.n_samples() - 1;
        let side = TrajectorySidecar {
            provenance: Provenance::new(&ctx.hash, cfg.seed),
            sim_id: point.id.clone(),
            substrate_id: subs[point.substrate].id.clone(),
            config: cfg.clone(),
            n_particles: store.n_particles,
            n_samples: store.n_samples(),
            sample_interval_ms: cfg.sample_interval(),
            p_leave_sphere: probs.0,
            p_enter_sphere: probs.1,
            intra_fraction_start: store.intra_fraction(0),
            intra_fraction_end: store.intra_fraction(last),
        };
        w.write_json(&format!("{}.traj.json", point.id), &side)?;
        w.record_seed(point.id.clone(), cfg.seed);
        log(
            Stage::Simulate,
            format!(
                "{}: {} particles × {} steps ({:.1} s)",
                point.id,
                store.n_particles,
                cfg.n_steps(),
                t0.elapsed().as_secs_f64()
            ),
        );
        summary.push(json!({
            "id": point.id,
            "n_particles": store.n_particles,
            "intra_fraction_start": side.intra_fraction_start,
            "intra_fraction_end": side.intra_fraction_end,
        }));
    }
    w.finish(json!({ "simulations": summary, "transit_constant": c.simulation.transit_constant }))?;
    Ok(())
}

fn load_store(ctx: &Context, point: &SimPoint) -> Result<TrajectoryStore, CliError> {
    let path = ctx.dir(Stage::Simulate).join(format!("{}.traj", point.id));
    load_trajectories(&path).map_err(|e| CliError::context(&format!("trajectories {}", point.id), e))
}

// ------------------------------------------------------------------- signal

fn signal(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let proto = c.protocol()?;
    let mut w = ctx.begin(Stage::Signal, c.simulation.seed)?;
    let mut summary = Vec::new();
    for point in &c.simulations() {
        let what = format!("signal {}", point.id);
        let store = load_store(ctx, point)?;
        let table =
            PhaseTable::build(&store, &proto, TagFilter::All, ctx.exec).map_err(|e| CliError::context(&what, e))?;
        drop(store);
        let mut set = table.signal(&proto, ctx.exec).map_err(|e| CliError::context(&what, e))?;
        let seed = derive_seed(c.simulation.seed, &format!("bootstrap/{}", point.id));
        let boot = bootstrap_nmse(&table, &proto, c.protocol.n_bootstrap, seed, ctx.exec)
            .map_err(|e| CliError::context(&what, e))?;
        boot.attach(&mut set);
        w.provenance.seed = seed;
        w.write_csv(&format!("{}.signal.csv", point.id), |b| write_signal_csv(&set, b))?;
        w.write_csv(&format!("{}.mean.csv", point.id), |b| write_mean_signal_csv(&set, b))?;
        w.record_seed(point.id.clone(), seed);
        let worst_dir = set
            .direction_sqrt_nmse
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        log(
            Stage::Signal,
            format!(
                "{}: max sqrt(NMSE) {:.4} (mean signal), {:.4} (per direction)",
                point.id,
                boot.max_sqrt_mean_signal(),
                worst_dir
            ),
        );
        summary.push(json!({
            "id": point.id,
            "max_sqrt_nmse_mean_signal": boot.max_sqrt_mean_signal(),
            "max_sqrt_nmse_direction_avg": worst_dir,
        }));
    }
    w.finish(json!({ "signals": summary }))?;
    Ok(())
}

fn load_mean_rows(ctx: &Context, point: &SimPoint) -> Result<Vec<MeanSignalRow>, CliError> {
    let path = ctx.dir(Stage::Signal).join(format!("{}.mean.csv", point.id));
    let f = fs::File::open(&path).map_err(|e| CliError::context(&path.display().to_string(), e.into()))?;
    read_mean_signal_csv(f).map_err(|e| CliError::context(&path.display().to_string(), e))
}

fn load_signal(ctx: &Context, point: &SimPoint) -> Result<SignalSet, CliError> {
    let path = ctx.dir(Stage::Signal).join(format!("{}.signal.csv", point.id));
    read_signal_csv_file(&path).map_err(|e| CliError::context(&path.display().to_string(), e))
}

/// Signal and relative error laid out `[b][Δ]` in protocol order.
fn shell_grid(ctx: &Context, rows: &[MeanSignalRow]) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let p = &ctx.config.protocol;
    let mut s = Vec::new();
    let mut e = Vec::new();
    for &b in &p.b_values {
        for &d in &p.deltas_ms {
            let row = rows
                .iter()
                .find(|r| r.b_ms_per_um2 == b && r.delta_ms == d)
                .ok_or_else(|| CliError::MissingDependency(format!("signal table lacks b = {b}, Δ = {d}")))?;
            s.push(row.s);
            e.push(row.sqrt_nmse.unwrap_or(0.0));
        }
    }
    Ok((s, e))
}

// ----------------------------------------------------------------- analysis

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sim_id: String,
    pub substrate_id: String,
    pub kappa: f64,
    /// Volume-weighted mean radius, μm.
    pub r: f64,
    pub f_i: f64,
    pub d_i_s: f64,
    /// Extracellular ADC at the longest diffusion time without exchange.
    pub d_e: f64,
    /// `impermeable_sibling` or `same_simulation` when the sweep has no κ = 0 point.
    pub d_e_source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DisorderFit {
    sim_id: String,
    substrate_id: String,
    mean_radius_um: f64,
    d_intra0: f64,
    d_extra0: f64,
    adc: Result<PowerLawFit, String>,
    akc: Result<PowerLawFit, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegimeEntry {
    sim_id: String,
    substrate_id: String,
    kappa: f64,
    report: RegimeReport,
}

#[derive(Serialize, Deserialize)]
struct AnalysisDoc<T> {
    provenance: Provenance,
    entries: Vec<T>,
}

fn analyze(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let sims = c.simulations();
    let subs = c.substrates();
    let d_max = c.protocol.deltas_ms.iter().fold(0.0f64, |m, &d| m.max(d));
    let mut w = ctx.begin(Stage::Analyze, c.simulation.seed)?;
    let mut groups = Vec::new();
    let mut disorder = Vec::new();
    let mut regimes = Vec::new();
    let mut adc_ex_at_max = Vec::new();
    for point in &sims {
        let what = format!("analysis {}", point.id);
        let store = load_store(ctx, point)?;
        let times = positive_sample_times(&store);
        let mut series: Vec<AdcAkc> = Vec::new();
        for filter in [TagFilter::All, TagFilter::Intra, TagFilter::Extra] {
            if store.select(filter).is_empty() {
                continue;
            }
            series.push(adc_akc(&store, &times, filter, ctx.exec).map_err(|e| CliError::context(&what, e))?);
        }
        drop(store);
        let find = |f: TagFilter| series.iter().find(|s| s.filter == f);
        let at_max = find(TagFilter::Extra).and_then(|s| {
            s.times
                .iter()
                .position(|&t| (t - d_max).abs() < 1e-9 * d_max)
                .map(|j| s.adc[j])
        });
        adc_ex_at_max.push(at_max);
        if point.kappa == 0.0 {
            if let Some(ex) = find(TagFilter::Extra) {
                let fit = |v: &[f64]| fit_power_law(&ex.times, v, None).map_err(|e| e.to_string());
                disorder.push(DisorderFit {
                    sim_id: point.id.clone(),
                    substrate_id: subs[point.substrate].id.clone(),
                    mean_radius_um: subs[point.substrate].mean_radius,
                    d_intra0: point.d_intra0,
                    d_extra0: point.d_extra0,
                    adc: fit(&ex.adc),
                    akc: fit(&ex.akc),
                });
            }
        }
        let rows = load_mean_rows(ctx, point)?;
        let (s, err) = shell_grid(ctx, &rows)?;
        let all = find(TagFilter::All).expect("the whole population is never empty");
        let report = detect_regime(
            &c.protocol.deltas_ms,
            &c.protocol.b_values,
            &s,
            Some(&err),
            Some((&all.times, &all.akc)),
            c.analysis.regime_z,
        )
        .map_err(|e| CliError::context(&what, e))?;
        log(Stage::Analyze, format!("{}: {:?}", point.id, report.regime));
        regimes.push(RegimeEntry {
            sim_id: point.id.clone(),
            substrate_id: subs[point.substrate].id.clone(),
            kappa: point.kappa,
            report,
        });
        groups.push(AdcGroup {
            sim_id: point.id.clone(),
            substrate_id: subs[point.substrate].id.clone(),
            kappa: point.kappa,
            series,
        });
    }

    let mut truth = Vec::new();
    let mut headers: BTreeMap<usize, SubstrateHeader> = BTreeMap::new();
    for (k, point) in sims.iter().enumerate() {
        if let std::collections::btree_map::Entry::Vacant(e) = headers.entry(point.substrate) {
            e.insert(load_substrate(ctx, point.substrate)?.0);
        }
        let header = &headers[&point.substrate];
        let sibling = sims.iter().position(|q| {
            q.substrate == point.substrate
                && q.d_intra0 == point.d_intra0
                && q.d_extra0 == point.d_extra0
                && q.kappa == 0.0
        });
        let (d_e, source) = match sibling.and_then(|j| adc_ex_at_max[j]) {
            Some(v) => (v, "impermeable_sibling"),
            None => (adc_ex_at_max[k].unwrap_or(point.d_extra0), "same_simulation"),
        };
        truth.push(GroundTruth {
            sim_id: point.id.clone(),
            substrate_id: subs[point.substrate].id.clone(),
            kappa: point.kappa,
            r: header.radius_stats.map_or(subs[point.substrate].mean_radius, |s| s.r_volume),
            f_i: header.icvf,
            d_i_s: point.d_intra0,
            d_e,
            d_e_source: source.to_string(),
        });
    }

    let prov = w.provenance.clone();
    w.write_csv("adc_akc.csv", |b| write_adc_csv(b, &groups))?;
    w.write_json(
        "disorder_fits.json",
        &AnalysisDoc {
            provenance: prov.clone(),
            entries: disorder,
        },
    )?;
    w.write_json(
        "regimes.json",
        &AnalysisDoc {
            provenance: prov.clone(),
            entries: regimes,
        },
    )?;
    w.write_json(
        "ground_truth.json",
        &AnalysisDoc {
            provenance: prov,
            entries: truth,
        },
    )?;
    w.finish(json!({ "simulations": sims.len() }))?;
    Ok(())
}

fn read_doc<T: for<'de> Deserialize<'de>>(ctx: &Context, stage: Stage, name: &str) -> Result<Vec<T>, CliError> {
    let path = ctx.dir(stage).join(name);
    let text = fs::read_to_string(&path).map_err(|e| CliError::context(&path.display().to_string(), e.into()))?;
    let doc: AnalysisDoc<T> =
        serde_json::from_str(&text).map_err(|e| CliError::context(&path.display().to_string(), e.into()))?;
    Ok(doc.entries)
}

// ------------------------------------------------------------------ fitting

#[derive(Serialize, Deserialize)]
struct FitRecord {
    provenance: Provenance,
    sim_id: String,
    snr: f64,
    realization: usize,
    noise_seed: Option<u64>,
    result: Result<FitResult, String>,
}

fn snr_tag(snr: f64) -> String {
    if snr.is_infinite() {
        "inf".into()
    } else {
        tag(snr)
    }
}

fn fit_stage(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let f = &c.fitting;
    let sims = c.simulations();
    let proto = c.protocol()?;
    let truth: Vec<GroundTruth> = read_doc(ctx, Stage::Analyze, "ground_truth.json")?;
    let clean: Vec<SignalSet> = sims.iter().map(|p| load_signal(ctx, p)).collect::<Result<_, _>>()?;

    let mut jobs = Vec::new();
    for si in 0..sims.len() {
        for &snr in &f.snr {
            for k in 0..c.realizations(snr) {
                jobs.push((si, snr, k));
            }
        }
    }
    let mut w = ctx.begin(Stage::Fit, f.seed)?;
    let t0 = Instant::now();
    // one job per noisy signal, every model fitted to the same draw
    let results = par::try_map_indexed(ctx.exec, jobs.len(), |j| {
        let (si, snr, k) = jobs[j];
        let id = &sims[si].id;
        let label = format!("{id}/{}/{k}", snr_tag(snr));
        let (noisy, noise_seed) = if snr.is_infinite() {
            (clean[si].clone(), None)
        } else {
            let seed = derive_seed(f.seed, &format!("noise/{label}"));
            let s = add_rician_noise(&clean[si], snr, seed).map_err(|e| CliError::context(&label, e))?;
            (s, Some(seed))
        };
        let sigma = if snr.is_infinite() { 0.0 } else { 1.0 / snr };
        let fits = f
            .models
            .iter()
            .map(|&model| {
                let opts = FitOptions {
                    n_starts: f.n_starts,
                    sigma,
                    seed: derive_seed(f.seed, &format!("starts/{label}/{}", model.name())),
                    max_iterations: f.max_iterations,
                };
                fit(&noisy, &proto, model, &f.bounds, &opts, Execution::Sequential)
            })
            .collect::<Vec<_>>();
        Ok::<_, CliError>((noise_seed, fits))
    })?;

    let mut failures = 0usize;
    let mut bic_rows = Vec::new();
    // (sim, model, snr) -> successful fits
    let mut cells: BTreeMap<(usize, usize, usize), Vec<FitResult>> = BTreeMap::new();
    for (j, (noise_seed, fits)) in results.into_iter().enumerate() {
        let (si, snr, k) = jobs[j];
        let snr_i = f.snr.iter().position(|&s| s == snr).expect("snr from list");
        for (mi, res) in fits.into_iter().enumerate() {
            let model = f.models[mi];
            let result = res.map_err(|e| {
                failures += 1;
                log(Stage::Fit, format!("{} {} snr {}: {e}", sims[si].id, model.name(), snr_tag(snr)));
                e.to_string()
            });
            if let Ok(r) = &result {
                bic_rows.push(BicRow {
                    sim_id: sims[si].id.clone(),
                    snr,
                    realization: k,
                    model: model.name(),
                    n_obs: r.n_obs,
                    best_cost: r.best_cost,
                    bic: r.bic,
                    rank_deficient: r.rank_deficient,
                    kappa_at_cap: r.kappa_at_cap,
                });
                cells.entry((si, mi, snr_i)).or_default().push(r.clone());
            }
            let rel = format!("{}/{}_snr{}_n{k}.json", sims[si].id, model.name(), snr_tag(snr));
            w.write_json(
                &rel,
                &FitRecord {
                    provenance: Provenance::new(&ctx.hash, f.seed),
                    sim_id: sims[si].id.clone(),
                    snr,
                    realization: k,
                    noise_seed,
                    result,
                },
            )?;
            if let Some(s) = noise_seed {
                w.record_seed(format!("noise/{}/{}/{k}", sims[si].id, snr_tag(snr)), s);
            }
        }
    }
    let total = jobs.len() * f.models.len();
    if failures == total {
        return Err(CliError::Numerical(format!("all {total} fits failed")));
    }

    let mut rows = Vec::new();
    for ((si, _, snr_i), fits) in &cells {
        let gt = truth
            .iter()
            .find(|t| t.sim_id == sims[*si].id)
            .ok_or_else(|| CliError::MissingDependency(format!("no ground truth for {}", sims[*si].id)))?;
        let truth_list = [
            ("r", gt.r),
            ("f_i", gt.f_i),
            ("d_i_s", gt.d_i_s),
            ("d_e", gt.d_e),
            ("kappa", gt.kappa),
        ];
        let summary = aggregate(fits, &truth_list).map_err(|e| CliError::context("aggregate", e))?;
        rows.push(AggregateRow {
            sim_id: sims[*si].id.clone(),
            substrate_id: gt.substrate_id.clone(),
            kappa_true: gt.kappa,
            snr: f.snr[*snr_i],
            summary,
        });
    }
    w.write_csv("aggregate.csv", |b| write_aggregate_csv(b, &rows))?;
    w.write_csv("bic.csv", |b| write_rows(b, &bic_rows))?;
    log(
        Stage::Fit,
        format!(
            "{total} fits, {failures} failed ({:.1} s)",
            t0.elapsed().as_secs_f64()
        ),
    );
    w.finish(json!({ "fits": total, "failed": failures }))?;
    Ok(())
}

#[derive(Serialize)]
struct BicRow {
    sim_id: String,
    snr: f64,
    realization: usize,
    model: &'static str,
    n_obs: usize,
    best_cost: f64,
    bic: f64,
    rank_deficient: bool,
    kappa_at_cap: bool,
}

fn write_rows<T: Serialize>(out: &mut Vec<u8>, rows: &[T]) -> permex::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| permex::Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------------- report

/// Body of an upstream CSV without its provenance comment.
fn csv_body(path: &Path) -> Result<String, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::context(&path.display().to_string(), e.into()))?;
    let mut body = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| CliError::io(path.display(), e))?;
        if !line.starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    Ok(body)
}

#[derive(Serialize)]
struct NmseRow<'a> {
    sim_id: &'a str,
    substrate_id: &'a str,
    d_intra0: f64,
    d_extra0: f64,
    kappa: f64,
    density_per_um3: f64,
    b_ms_per_um2: f64,
    #[serde(rename = "Delta_ms")]
    delta_ms: f64,
    #[serde(rename = "S")]
    s: f64,
    sqrt_nmse: Option<f64>,
    sqrt_nmse_direction_avg: Option<f64>,
}

#[derive(Serialize)]
struct RegimeRow<'a> {
    sim_id: &'a str,
    substrate_id: &'a str,
    kappa: f64,
    b_ms_per_um2: f64,
    #[serde(rename = "Delta_ms")]
    delta_ms: f64,
    #[serde(rename = "S")]
    s: f64,
    sqrt_nmse: Option<f64>,
    shell_trend: String,
    regime: String,
}

#[derive(Serialize)]
struct DisorderRow<'a> {
    substrate_id: &'a str,
    mean_radius_um: f64,
    d_intra0: f64,
    d_extra0: f64,
    quantity: &'static str,
    c_inf: Option<f64>,
    amplitude: Option<f64>,
    mse: Option<f64>,
    window_start_ms: Option<f64>,
    window_end_ms: Option<f64>,
    c_inf_over_d_extra0: Option<f64>,
    error: Option<&'a str>,
}

fn regime_name(r: &permex::analysis::Regime) -> String {
    use permex::analysis::Regime;
    match r {
        Regime::ExchangeDominated => "exchange_dominated".into(),
        Regime::RestrictionDominated => "restriction_dominated".into(),
        Regime::Mixed { t_shift: Some(t) } => format!("mixed(t_shift={t})"),
        Regime::Mixed { t_shift: None } => "mixed".into(),
    }
}

fn report(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let sims = c.simulations();
    let subs = c.substrates();
    let mut w = ctx.begin(Stage::Report, c.simulation.seed)?;

    let mut nmse = Vec::new();
    let mut curves = Vec::new();
    let regimes: Vec<RegimeEntry> = read_doc(ctx, Stage::Analyze, "regimes.json")?;
    let mean_rows: Vec<Vec<MeanSignalRow>> = sims.iter().map(|p| load_mean_rows(ctx, p)).collect::<Result<_, _>>()?;
    for (point, rows) in sims.iter().zip(&mean_rows) {
        let sub = &subs[point.substrate].id;
        let reg = regimes
            .iter()
            .find(|r| r.sim_id == point.id)
            .ok_or_else(|| CliError::MissingDependency(format!("no regime entry for {}", point.id)))?;
        for r in rows {
            nmse.push(NmseRow {
                sim_id: &point.id,
                substrate_id: sub,
                d_intra0: point.d_intra0,
                d_extra0: point.d_extra0,
                kappa: point.kappa,
                density_per_um3: c.simulation.density_per_um3,
                b_ms_per_um2: r.b_ms_per_um2,
                delta_ms: r.delta_ms,
                s: r.s,
                sqrt_nmse: r.sqrt_nmse,
                sqrt_nmse_direction_avg: r.sqrt_nmse_direction_avg,
            });
            let trend = reg
                .report
                .shells
                .iter()
                .find(|t| t.b == r.b_ms_per_um2)
                .map_or_else(String::new, |t| format!("{:?}", t.trend).to_lowercase());
            curves.push(RegimeRow {
                sim_id: &point.id,
                substrate_id: sub,
                kappa: point.kappa,
                b_ms_per_um2: r.b_ms_per_um2,
                delta_ms: r.delta_ms,
                s: r.s,
                sqrt_nmse: r.sqrt_nmse,
                shell_trend: trend,
                regime: regime_name(&reg.report.regime),
            });
        }
    }
    w.write_csv("nmse_grid.csv", |b| write_rows(b, &nmse))?;
    w.write_csv("regime_curves.csv", |b| write_rows(b, &curves))?;

    let td = csv_body(&ctx.dir(Stage::Analyze).join("adc_akc.csv"))?;
    w.write_csv("time_dependency.csv", |b| {
        b.extend_from_slice(td.as_bytes());
        Ok(())
    })?;
    let est = csv_body(&ctx.dir(Stage::Fit).join("aggregate.csv"))?;
    w.write_csv("estimates.csv", |b| {
        b.extend_from_slice(est.as_bytes());
        Ok(())
    })?;

    let disorder: Vec<DisorderFit> = read_doc(ctx, Stage::Analyze, "disorder_fits.json")?;
    let mut rows = Vec::new();
    for d in &disorder {
        for (quantity, fit) in [("adc_ex", &d.adc), ("akc_ex", &d.akc)] {
            let ok = fit.as_ref().ok();
            rows.push(DisorderRow {
                substrate_id: &d.substrate_id,
                mean_radius_um: d.mean_radius_um,
                d_intra0: d.d_intra0,
                d_extra0: d.d_extra0,
                quantity,
                c_inf: ok.map(|f| f.c_inf),
                amplitude: ok.map(|f| f.amplitude),
                mse: ok.map(|f| f.mse),
                window_start_ms: ok.map(|f| f.fit_window[0]),
                window_end_ms: ok.map(|f| f.fit_window[1]),
                c_inf_over_d_extra0: ok.filter(|_| quantity == "adc_ex").map(|f| f.c_inf / d.d_extra0),
                error: fit.as_ref().err().map(String::as_str),
            });
        }
    }
    w.write_csv("disorder_fits.csv", |b| write_rows(b, &rows))?;
    w.finish(json!({
        "bundles": ["nmse_grid.csv", "time_dependency.csv", "regime_curves.csv", "estimates.csv", "disorder_fits.csv"]
    }))?;
    Ok(())
}
