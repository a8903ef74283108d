//! Stage manifests. Each stage directory holds `manifest.json` (config hash,
//! seeds, version, SHA-256 of every output) and `run_meta.json` (wall-clock
//! details that are allowed to differ between reruns).

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenSubstrate,
    Simulate,
    Signal,
    Analyze,
    Fit,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenSubstrate => "gen-substrate",
            Stage::Simulate => "simulate",
            Stage::Signal => "signal",
            Stage::Analyze => "analyze",
            Stage::Fit => "fit",
            Stage::Report => "report",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::GenSubstrate => "substrates",
            Stage::Simulate => "trajectories",
            Stage::Signal => "signals",
            Stage::Analyze => "analysis",
            Stage::Fit => "fits",
            Stage::Report => "reports",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenSubstrate => &[],
            Stage::Simulate => &[Stage::GenSubstrate],
            Stage::Signal => &[Stage::Simulate],
            Stage::Analyze => &[Stage::GenSubstrate, Stage::Simulate, Stage::Signal],
            Stage::Fit => &[Stage::GenSubstrate, Stage::Signal, Stage::Analyze],
            Stage::Report => &[Stage::Signal, Stage::Analyze, Stage::Fit],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the stage directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub software_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

/// Embedded in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Provenance {
            software_version: VERSION.to_string(),
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    /// First line of every CSV output.
    pub fn csv_comment(&self) -> String {
        format!(
            "# permex {} config_hash={} seed={}\n",
            self.software_version, self.config_hash, self.seed
        )
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub enum StageState {
    Complete,
    Missing,
    /// Present but unusable; the reason says why.
    Invalid(String),
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.dir_name())
}

pub fn check_stage(out: &Path, stage: Stage, config_hash: &str) -> StageState {
    let dir = stage_dir(out, stage);
    let path = dir.join("manifest.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(_) => return StageState::Missing,
    };
    let m: Manifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => return StageState::Invalid(format!("unreadable manifest {}: {e}", path.display())),
    };
    if m.config_hash != config_hash {
        return StageState::Invalid(format!(
            "produced by a different configuration (hash {} vs {})",
            short(&m.config_hash),
            short(config_hash)
        ));
    }
    for f in &m.files {
        match sha256_file(&dir.join(&f.path)) {
            Ok(h) if h == f.sha256 => {}
            Ok(_) => return StageState::Invalid(format!("checksum mismatch for {}", f.path)),
            Err(e) => return StageState::Invalid(format!("{}: {e}", f.path)),
        }
    }
    StageState::Complete
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Upstream stages must be complete for this config, or the run stops with
/// a missing-dependency error naming the stage.
pub fn require_upstream(out: &Path, stage: Stage, config_hash: &str) -> Result<(), CliError> {
    for &up in stage.upstream() {
        match check_stage(out, up, config_hash) {
            StageState::Complete => {}
            StageState::Missing => {
                return Err(CliError::MissingDependency(format!(
                    "stage `{}` needs stage `{}`, which has not been run (run `permex {}` first)",
                    stage.name(),
                    up.name(),
                    up.name()
                )))
            }
            StageState::Invalid(why) => {
                return Err(CliError::MissingDependency(format!(
                    "stage `{}` needs stage `{}`, whose outputs are invalid: {why} (rerun `permex {} --force`)",
                    stage.name(),
                    up.name(),
                    up.name()
                )))
            }
        }
    }
    Ok(())
}

/// Collects outputs as they are written, then seals the stage.
pub struct StageWriter {
    pub stage: Stage,
    pub dir: PathBuf,
    pub provenance: Provenance,
    files: Vec<String>,
    seeds: BTreeMap<String, u64>,
    started: Instant,
}

impl StageWriter {
    /// Clears any previous manifest so an interrupted rerun never looks complete.
    pub fn begin(out: &Path, stage: Stage, provenance: Provenance) -> Result<Self, CliError> {
        let dir = stage_dir(out, stage);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(dir.display(), e))?;
        let manifest = dir.join("manifest.json");
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| CliError::io(manifest.display(), e))?;
        }
        Ok(StageWriter {
            stage,
            dir,
            provenance,
            files: Vec::new(),
            seeds: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn record_seed(&mut self, key: impl Into<String>, seed: u64) {
        self.seeds.insert(key.into(), seed);
    }

    /// Registers a file already written under the stage directory.
    pub fn register(&mut self, rel: impl Into<String>) {
        self.files.push(rel.into());
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(p.display(), e))?;
        self.register(rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes the provenance comment and then whatever `body` emits.
    pub fn write_csv(
        &mut self,
        rel: &str,
        body: impl FnOnce(&mut Vec<u8>) -> permex::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = self.provenance.csv_comment().into_bytes();
        body(&mut buf).map_err(|e| CliError::context(rel, e))?;
        self.write_bytes(rel, &buf)
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<Manifest, CliError> {
        self.files.sort();
        self.files.dedup();
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let p = self.dir.join(rel);
            let sha256 = sha256_file(&p).map_err(|e| CliError::io(p.display(), e))?;
            files.push(FileEntry {
                path: rel.clone(),
                sha256,
            });
        }
        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            software_version: VERSION.to_string(),
            config_hash: self.provenance.config_hash.clone(),
            seeds: std::mem::take(&mut self.seeds),
            files,
            summary,
        };
        let meta = serde_json::json!({
            "stage": self.stage.name(),
            "finished_unix_s": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            "elapsed_s": self.started.elapsed().as_secs_f64(),
            "threads": permex::par::current_threads(),
        });
        let write = |name: &str, v: String| {
            let p = self.dir.join(name);
            fs::write(&p, v + "\n").map_err(|e| CliError::io(p.display(), e))
        };
        write("run_meta.json", serde_json::to_string_pretty(&meta).expect("json"))?;
        // the manifest goes last: its presence marks the stage complete
        write("manifest.json", serde_json::to_string_pretty(&manifest).expect("json"))?;
        Ok(manifest)
    }
}
