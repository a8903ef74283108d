//! Signal CSV files: one row per (b, Δ, direction), plus a companion file
//! with the direction-averaged signal.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SignalSet;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Serialize, Deserialize)]
struct SignalRow {
    b_ms_per_um2: f64,
    #[serde(rename = "Delta_ms")]
    delta_ms: f64,
    dir_x: f64,
    dir_y: f64,
    dir_z: f64,
    #[serde(rename = "S")]
    s: f64,
    sqrt_nmse: Option<f64>,
}

/// A row of the direction-averaged signal file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSignalRow {
    pub b_ms_per_um2: f64,
    #[serde(rename = "Delta_ms")]
    pub delta_ms: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub sqrt_nmse: Option<f64>,
    pub sqrt_nmse_direction_avg: Option<f64>,
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("signal csv: {other:?}")),
    }
}

pub fn write_signal_csv<W: Write>(set: &SignalSet, out: W) -> Result<()> {
    set.validate()?;
    let mut w = csv::Writer::from_writer(out);
    for bi in 0..set.b_values.len() {
        for di in 0..set.deltas.len() {
            for (k, u) in set.directions.iter().enumerate() {
                let e = set.index(bi, di, k);
                w.serialize(SignalRow {
                    b_ms_per_um2: set.b_values[bi],
                    delta_ms: set.deltas[di],
                    dir_x: u.x(),
                    dir_y: u.y(),
                    dir_z: u.z(),
                    s: set.values[e],
                    sqrt_nmse: set.sqrt_nmse.as_ref().map(|v| v[e]),
                })
                .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_mean_signal_csv<W: Write>(set: &SignalSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let nd = set.deltas.len();
    for bi in 0..set.b_values.len() {
        for di in 0..nd {
            let s = bi * nd + di;
            w.serialize(MeanSignalRow {
                b_ms_per_um2: set.b_values[bi],
                delta_ms: set.deltas[di],
                s: set.mean(bi, di),
                sqrt_nmse: set.mean_sqrt_nmse.as_ref().map(|v| v[s]),
                sqrt_nmse_direction_avg: set.direction_sqrt_nmse.as_ref().map(|v| v[s]),
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn push_unique(list: &mut Vec<f64>, x: f64) -> usize {
    match list.iter().position(|&v| v == x) {
        Some(i) => i,
        None => {
            list.push(x);
            list.len() - 1
        }
    }
}

pub fn read_mean_signal_csv<R: Read>(input: R) -> Result<Vec<MeanSignalRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let rows: Vec<MeanSignalRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_error)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("mean signal rows"));
    }
    Ok(rows)
}

pub fn read_signal_csv_file(path: &Path) -> Result<SignalSet> {
    read_signal_csv(std::fs::File::open(path)?)
}

/// Reads a per-direction signal table back; the rows may come in any order
/// but must cover the full (b, Δ, direction) grid exactly once. Lines
/// starting with `#` are skipped.
pub fn read_signal_csv<R: Read>(input: R) -> Result<SignalSet> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let rows: Vec<SignalRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_error)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("signal rows"));
    }
    let (mut bs, mut ds, mut dirs) = (Vec::new(), Vec::new(), Vec::<Vec3>::new());
    for row in &rows {
        push_unique(&mut bs, row.b_ms_per_um2);
        push_unique(&mut ds, row.delta_ms);
        let u = Vec3::new(row.dir_x, row.dir_y, row.dir_z);
        if !dirs.contains(&u) {
            dirs.push(u);
        }
    }
    let total = bs.len() * ds.len() * dirs.len();
    if total != rows.len() {
        return Err(Error::Format(format!(
            "{} rows do not form a {}×{}×{} grid",
            rows.len(),
            bs.len(),
            ds.len(),
            dirs.len()
        )));
    }
    let mut values = vec![f64::NAN; total];
    let has_nmse = rows.iter().all(|r| r.sqrt_nmse.is_some());
    let mut nmse = vec![0.0; total];
    for row in &rows {
        let bi = push_unique(&mut bs, row.b_ms_per_um2);
        let di = push_unique(&mut ds, row.delta_ms);
        let u = Vec3::new(row.dir_x, row.dir_y, row.dir_z);
        let k = dirs.iter().position(|d| *d == u).expect("collected above");
        let e = (bi * ds.len() + di) * dirs.len() + k;
        if !values[e].is_nan() {
            return Err(Error::Format(format!(
                "duplicate row for b={}, Δ={}",
                row.b_ms_per_um2, row.delta_ms
            )));
        }
        values[e] = row.s;
        nmse[e] = row.sqrt_nmse.unwrap_or(0.0);
    }
    let set = SignalSet {
        b_values: bs,
        deltas: ds,
        directions: dirs,
        values,
        sqrt_nmse: has_nmse.then_some(nmse),
        mean_sqrt_nmse: None,
        direction_sqrt_nmse: None,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::PgseProtocol;

    #[test]
    fn round_trip() {
        let p = PgseProtocol::new(vec![12.0, 20.0], 4.5, vec![1.0, 2.5], 3).unwrap();
        let mut set = SignalSet::isotropic(&p, |bi, di| 0.9 - 0.1 * bi as f64 - 0.05 * di as f64);
        set.sqrt_nmse = Some(vec![0.001; set.values.len()]);
        let mut buf = b"# provenance line\n".to_vec();
        write_signal_csv(&set, &mut buf).unwrap();
        let back = read_signal_csv(buf.as_slice()).unwrap();
        assert_eq!(back, set);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\nb_ms_per_um2,Delta_ms,dir_x,dir_y,dir_z,S,sqrt_nmse\n"));
        let mut mean = Vec::new();
        write_mean_signal_csv(&set, &mut mean).unwrap();
        assert_eq!(String::from_utf8(mean.clone()).unwrap().lines().count(), 5);
        let rows = read_mean_signal_csv(mean.as_slice()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!((rows[3].s - set.mean(1, 1)).abs() < 1e-15);
    }
}
