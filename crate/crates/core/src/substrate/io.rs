//! `<name>.substrate.json` header plus `<name>.spheres.csv` body.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RadiusStats, Sphere, Substrate};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const SUBSTRATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstrateHeader {
    pub format_version: u32,
    pub side_um: f64,
    pub seed: u64,
    pub n_spheres: usize,
    pub icvf: f64,
    pub radius_stats: Option<RadiusStats>,
    /// File name of the CSV body, relative to the header.
    pub spheres_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.substrate.json")),
        dir.join(format!("{name}.spheres.csv")),
    )
}

/// Formats with 9 significant digits.
fn sig9(x: f64) -> String {
    format!("{:.8e}", x)
        .parse::<f64>()
        .map(|v| format!("{v}"))
        .unwrap_or_else(|_| x.to_string())
}

/// Writes the two substrate files and returns their paths (header, body).
pub fn write_substrate(
    substrate: &Substrate,
    dir: &Path,
    name: &str,
    config_hash: Option<&str>,
) -> Result<(PathBuf, PathBuf)> {
    let (header_path, body_path) = paths(dir, name);
    let header = SubstrateHeader {
        format_version: SUBSTRATE_FORMAT_VERSION,
        side_um: substrate.side(),
        seed: substrate.seed(),
        n_spheres: substrate.spheres().len(),
        icvf: substrate.icvf(),
        radius_stats: substrate.radius_stats(),
        spheres_file: body_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config_hash: config_hash.map(str::to_owned),
    };
    let mut body = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(body, "# config_hash={h} seed={}", substrate.seed());
    }
    body.push_str("cx,cy,cz,r\n");
    for s in substrate.spheres() {
        let c = s.center;
        let _ = writeln!(
            body,
            "{},{},{},{}",
            sig9(c.x()),
            sig9(c.y()),
            sig9(c.z()),
            sig9(s.radius)
        );
    }
    fs::write(&header_path, serde_json::to_string_pretty(&header)? + "\n")?;
    fs::write(&body_path, body)?;
    Ok((header_path, body_path))
}

/// Reads a substrate back from its header path.
pub fn read_substrate(header_path: &Path) -> Result<(SubstrateHeader, Substrate)> {
    let header: SubstrateHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format_version != SUBSTRATE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported substrate format version {}",
            header.format_version
        )));
    }
    let body_path = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.spheres_file);
    let text = fs::read_to_string(&body_path)?;
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    match lines.next() {
        Some("cx,cy,cz,r") => {}
        other => return Err(Error::Format(format!("unexpected sphere header {other:?}"))),
    }
    let mut spheres = Vec::with_capacity(header.n_spheres);
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("sphere row {}: {e}", k + 1)))?;
        if v.len() != 4 {
            return Err(Error::Format(format!("sphere row {} has {} fields", k + 1, v.len())));
        }
        spheres.push(Sphere::new(Vec3::new(v[0], v[1], v[2]), v[3]));
    }
    if spheres.len() != header.n_spheres {
        return Err(Error::Format(format!(
            "header lists {} spheres, body has {}",
            header.n_spheres,
            spheres.len()
        )));
    }
    let substrate = Substrate::from_spheres(header.side_um, spheres, header.seed)?;
    Ok((header, substrate))
}
