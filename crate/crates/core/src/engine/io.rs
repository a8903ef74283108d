//! Binary trajectory files. Layout (all little-endian) is documented in
//! `docs/trajectory-format.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TrajectoryStore;
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: [u8; 8] = *b"PMXTRAJ\0";
pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

/// Writes `store` to `w`. Positions are narrowed to f32.
pub fn write_trajectories<W: Write>(store: &TrajectoryStore, mut w: W) -> Result<()> {
    w.write_all(&TRAJECTORY_MAGIC)?;
    w.write_all(&TRAJECTORY_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.n_particles as u64).to_le_bytes())?;
    w.write_all(&(store.n_samples() as u64).to_le_bytes())?;
    for t in &store.sample_times {
        w.write_all(&t.to_le_bytes())?;
    }
    for c in &store.intra_counts {
        w.write_all(&c.to_le_bytes())?;
    }
    for tag in &store.initial {
        w.write_all(&tag.to_le_bytes())?;
    }
    for x in &store.positions {
        w.write_all(&(*x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated trajectory file: {e}")))?;
    Ok(buf)
}

/// Reads a store written by [`write_trajectories`].
pub fn read_trajectories<R: Read>(mut r: R) -> Result<TrajectoryStore> {
    if take::<8, _>(&mut r)? != TRAJECTORY_MAGIC {
        return Err(Error::Format("not a trajectory file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported trajectory format version {version}")));
    }
    let n_particles = u64::from_le_bytes(take(&mut r)?) as usize;
    let n_samples = u64::from_le_bytes(take(&mut r)?) as usize;
    let values = n_particles
        .checked_mul(n_samples)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::Format("trajectory dimensions overflow".into()))?;
    let sample_times = (0..n_samples)
        .map(|_| take(&mut r).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let intra_counts = (0..n_samples)
        .map(|_| take(&mut r).map(u64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let initial = (0..n_particles)
        .map(|_| take(&mut r).map(u32::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0u8; values * 4];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated trajectory positions: {e}")))?;
    let positions = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after trajectory data".into()));
    }
    Ok(TrajectoryStore {
        sample_times,
        n_particles,
        positions,
        initial,
        intra_counts,
    })
}

pub fn save_trajectories(store: &TrajectoryStore, path: &Path) -> Result<()> {
    write_trajectories(store, BufWriter::new(File::create(path)?))
}

pub fn load_trajectories(path: &Path) -> Result<TrajectoryStore> {
    read_trajectories(BufReader::new(File::open(path)?))
}
