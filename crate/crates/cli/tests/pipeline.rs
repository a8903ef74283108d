//! End-to-end runs of the `permex` binary on a miniature sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
output_dir = "out"
[substrate]
side_um = 14.0
mean_radii_um = [2.0, 3.0]
target_icvf = 0.45
seed = 1
[simulation]
d_intra0 = [2.0]
d_extra0 = [2.0]
kappa_um_per_s = [0.0, 25.0]
density_per_um3 = 0.08
seed = 2
[protocol]
deltas_ms = [6.0, 8.0, 10.0]
little_delta_ms = 2.0
b_values = [0.5, 1.0, 2.0]
n_directions = 6
[fitting]
models = ["ball_sphere", "cexi"]
snr = [50.0, inf]
n_noise_realizations = 2
n_starts = 3
seed = 3
"#;

const STAGES: [&str; 6] = ["gen-substrate", "simulate", "signal", "analyze", "fit", "report"];

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn setup(text: &str) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    Run {
        _dir: dir,
        config,
        out,
    }
}

fn permex(run: &Run, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permex"))
        .args(args)
        .arg("--config")
        .arg(&run.config)
        .output()
        .unwrap()
}

fn ok(run: &Run, args: &[&str]) -> String {
    let o = permex(run, args);
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(o.status.success(), "permex {args:?} failed: {err}");
    err
}

fn run_all(run: &Run, extra: &[&str]) {
    for s in STAGES {
        let mut args = vec![s];
        args.extend_from_slice(extra);
        ok(run, &args);
    }
}

/// Every file under `root` except the wall-clock sidecars, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else if p.file_name().unwrap() != "run_meta.json" {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn read_bundle(path: &Path) -> (String, Vec<String>, usize) {
    let text = fs::read_to_string(path).unwrap();
    let comment = text.lines().next().unwrap().to_string();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().inspect(|x| assert!(x.is_ok())).count();
    (comment, header, rows)
}

#[test]
fn full_pipeline_produces_every_bundle() {
    let run = setup(TINY);
    run_all(&run, &[]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.out.join("reports/manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    let expect: [(&str, &[&str], usize); 5] = [
        ("nmse_grid.csv", &["sim_id", "kappa", "b_ms_per_um2", "Delta_ms", "S", "sqrt_nmse"], 4 * 9),
        ("time_dependency.csv", &["t_ms", "adc", "akc", "tag", "substrate_id", "kappa"], 0),
        ("regime_curves.csv", &["sim_id", "b_ms_per_um2", "Delta_ms", "S", "shell_trend", "regime"], 4 * 9),
        (
            "estimates.csv",
            &["substrate_id", "kappa_true", "model", "param", "mean", "variance", "truth"],
            // 4 sims × 2 SNR cases × (4 + 5) parameters
            4 * 2 * 9,
        ),
        ("disorder_fits.csv", &["substrate_id", "quantity", "c_inf", "amplitude"], 2 * 2),
    ];
    for (name, cols, rows) in expect {
        let (comment, header, n) = read_bundle(&run.out.join("reports").join(name));
        assert!(comment.starts_with("# permex "), "{name}: {comment}");
        assert!(comment.contains(&format!("config_hash={hash}")), "{name}");
        for c in cols {
            assert!(header.iter().any(|h| h == c), "{name} lacks column {c}: {header:?}");
        }
        if rows > 0 {
            assert_eq!(n, rows, "{name}");
        } else {
            assert!(n > 0, "{name} is empty");
        }
    }
    // JSON outputs carry the provenance block
    let fit: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.out.join("fits/s1_r2_di2_de2_k25/cexi_snr50_n1.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(fit["provenance"]["config_hash"], hash.as_str());
    assert!(fit["result"]["Ok"]["bic"].is_number());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = setup(TINY);
    let b = setup(TINY);
    run_all(&a, &["--threads", "1"]);
    run_all(&b, &["--threads", "3"]);
    let (sa, sb) = (snapshot(&a.out), snapshot(&b.out));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between runs");
    }
}

#[test]
fn completed_stages_are_skipped_unless_forced() {
    let run = setup(TINY);
    ok(&run, &["gen-substrate"]);
    let before = fs::read(run.out.join("substrates/manifest.json")).unwrap();
    let err = ok(&run, &["gen-substrate"]);
    assert!(err.contains("skipping"), "{err}");
    let err = ok(&run, &["gen-substrate", "--force"]);
    assert!(!err.contains("skipping"));
    assert_eq!(before, fs::read(run.out.join("substrates/manifest.json")).unwrap());
}

#[test]
fn report_without_fit_names_the_missing_stage() {
    let run = setup(TINY);
    for s in &STAGES[..4] {
        ok(&run, &[s]);
    }
    let o = permex(&run, &["report"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`fit`"), "{err}");
}

#[test]
fn tampered_upstream_is_a_dependency_error() {
    let run = setup(TINY);
    ok(&run, &["gen-substrate"]);
    let body = run.out.join("substrates/s1_r2.spheres.csv");
    let mut text = fs::read_to_string(&body).unwrap();
    text.push_str("1,1,1,0.5\n");
    fs::write(&body, text).unwrap();
    let o = permex(&run, &["simulate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn seed_override_invalidates_downstream_stages() {
    let run = setup(TINY);
    ok(&run, &["gen-substrate"]);
    ok(&run, &["simulate"]);
    let o = permex(&run, &["signal", "--seed-override", "99"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
    ok(&run, &["gen-substrate", "--seed-override", "99"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.out.join("substrates/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["s1_r2"], 99);
    assert_eq!(m["seeds"]["s2_r3"], 100);
}

#[test]
fn dry_run_prints_the_plan_and_touches_nothing() {
    let run = setup(TINY);
    let o = permex(&run, &["simulate", "--dry-run"]);
    assert!(o.status.success());
    let plan = String::from_utf8_lossy(&o.stdout);
    assert!(plan.contains("simulations: 4"), "{plan}");
    // 4 sims × (2 noisy + 1 clean) × 2 models
    assert!(plan.contains("fits: 24"), "{plan}");
    assert!(!run.out.exists());
}

#[test]
fn unreachable_icvf_fails_validation_before_any_work() {
    let run = setup(&TINY.replace("target_icvf = 0.45", "target_icvf = 0.9"));
    let o = permex(&run, &["gen-substrate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("target_icvf"));
    assert!(!run.out.exists());
}

#[test]
fn missing_config_is_a_validation_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_permex")).arg("fit").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_permex"))
        .args(["fit", "--config", "/nonexistent/exp.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_emits_the_signal_schema() {
    let run = setup(TINY);
    let target = run.out.with_file_name("pred.csv");
    ok(
        &run,
        &[
            "predict",
            "--model",
            "ball_sphere",
            "--params",
            "r=3,f_i=0.5,d_i_s=2,d_e=1.5",
            "--out",
            target.to_str().unwrap(),
        ],
    );
    let (_, header, rows) = read_bundle(&target);
    assert_eq!(header, ["b_ms_per_um2", "Delta_ms", "dir_x", "dir_y", "dir_z", "S", "sqrt_nmse"]);
    assert_eq!(rows, 3 * 3 * 6);
    let o = permex(&run, &["predict", "--model", "cexi", "--params", "r=3,f_i=0.5"]);
    assert_eq!(o.status.code(), Some(2));
}
