//! CSV, JSON and binary exports.
//!
//! Floats are written with 17 significant digits so that repeated runs produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::dynamics::FastSpace;
use crate::ergodic::CorrelationSeries;
use crate::error::{Error, Result};
use crate::homogenize::HomogenizedCoefficients;
use crate::integrate::Trajectory;
use crate::rng::SeedSpec;

/// `v` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Buffered CSV writer with a fixed header.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create<S: AsRef<str>>(path: &Path, header: &[S]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let line: Vec<&str> = header.iter().map(|h| h.as_ref()).collect();
        writeln!(out, "{}", line.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        if cells.len() != self.columns {
            return Err(Error::invalid(format!("CSV row has {} cells, header has {}", cells.len(), self.columns)));
        }
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn numbers(&mut self, values: &[f64]) -> Result<()> {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.row(&cells)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Columns `t, x0.., y0..`; fast states are written as stored (unwrapped).
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..traj.d).map(|i| format!("x{i}")));
    header.extend((0..traj.m).map(|i| format!("y{i}")));
    let mut w = CsvWriter::create(path, &header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..traj.len() {
        row.clear();
        row.push(traj.times[i]);
        row.extend_from_slice(traj.x(i));
        row.extend_from_slice(traj.y(i));
        w.numbers(&row)?;
    }
    w.finish()
}

const MAGIC: &[u8; 8] = b"FSTRAJ\0\0";
const VERSION: u32 = 1;

/// Little-endian binary layout:
///
/// ```text
/// magic[8] version:u32 d:u32 m:u32 fast_space:u8 antithetic:u8 pad[2]
/// dt:f64 record_every:u64 n:u64 master:u64 stream:u64 system_hash:u64
/// times[n] x[n·d] y[n·m]        (f64)
/// ```
pub fn write_trajectory_binary(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(traj.d as u32).to_le_bytes())?;
    out.write_all(&(traj.m as u32).to_le_bytes())?;
    let space = match traj.fast_space {
        FastSpace::TorusUnit => 0u8,
        FastSpace::Unbounded => 1u8,
    };
    out.write_all(&[space, traj.seed.antithetic as u8, 0, 0])?;
    out.write_all(&traj.dt.to_le_bytes())?;
    for v in [traj.record_every as u64, traj.len() as u64, traj.seed.master, traj.seed.stream, traj.system_hash] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in traj.times.iter().chain(&traj.x_path).chain(&traj.y_path) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_binary(path: &Path) -> Result<Trajectory> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a trajectory file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::invalid(format!("unsupported trajectory version {version}")));
    }
    let d = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let mut flags = [0u8; 4];
    r.read_exact(&mut flags)?;
    let mut b8 = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let dt = f64::from_bits(read_u64(&mut r)?);
    let record_every = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let master = read_u64(&mut r)?;
    let stream = read_u64(&mut r)?;
    let system_hash = read_u64(&mut r)?;
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let times = read_f64s(n)?;
    let x_path = read_f64s(n * d)?;
    let y_path = read_f64s(n * m)?;
    Ok(Trajectory {
        times,
        x_path,
        y_path,
        d,
        m,
        seed: SeedSpec { master, stream, antithetic: flags[1] != 0 },
        dt,
        record_every,
        fast_space: if flags[0] == 0 { FastSpace::TorusUnit } else { FastSpace::Unbounded },
        system_hash,
    })
}

/// Columns `lag, value, stderr`.
pub fn write_correlation_csv(series: &CorrelationSeries, path: &Path) -> Result<()> {
    let mut w = CsvWriter::create(path, &["lag", "value", "stderr"])?;
    for ((l, v), s) in series.lags.iter().zip(&series.values).zip(&series.stderr) {
        w.numbers(&[*l, *v, *s])?;
    }
    w.finish()
}

/// Columns `x*, F*, F_stderr*, A0_ij (row-major), A0_stderr_ij, A_ij, tail_flag, failure`.
pub fn write_coefficients_csv(table: &HomogenizedCoefficients, path: &Path) -> Result<()> {
    let d = table.d;
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..d).map(|i| format!("F{i}")));
    header.extend((0..d).map(|i| format!("F_stderr{i}")));
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
    header.extend(pairs.iter().map(|(i, j)| format!("A0_{i}{j}")));
    header.extend(pairs.iter().map(|(i, j)| format!("A0_stderr_{i}{j}")));
    header.extend(pairs.iter().map(|(i, j)| format!("A_{i}{j}")));
    header.push("tail_flag".into());
    header.push("failure".into());
    let mut w = CsvWriter::create(path, &header)?;
    for k in 0..table.len() {
        let mut cells: Vec<String> = table.x_grid[k]
            .iter()
            .chain(&table.f_values[k])
            .chain(&table.f_stderr[k])
            .chain(&table.a0_values[k])
            .chain(&table.a0_stderr[k])
            .chain(&table.a_values[k])
            .map(|v| fmt_f64(*v))
            .collect();
        cells.push(if table.tail_flags[k] { "1".into() } else { "0".into() });
        cells.push(csv_text(table.failures[k].as_deref().unwrap_or("")));
        w.row(&cells)?;
    }
    w.finish()
}

/// Quote free text for a CSV cell.
pub fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::heat_torus_system;
    use crate::integrate::{integrate_fast_slow, TimeGrid};

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
            assert_eq!(digits, 17);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn binary_trajectory_round_trip() {
        let sys = heat_torus_system(1.0).unwrap().with_epsilon(0.5).unwrap();
        let seed = SeedSpec::with_stream(3, 7).mirrored();
        let traj = integrate_fast_slow(&sys, &[0.2], &[0.4], &TimeGrid::new(0.1, 1e-3).recording_every(10), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trajectory_binary(&traj, &path).unwrap();
        assert_eq!(read_trajectory_binary(&path).unwrap(), traj);
    }

    #[test]
    fn trajectory_csv_layout() {
        let sys = heat_torus_system(1.0).unwrap();
        let traj = integrate_fast_slow(&sys, &[0.2], &[0.4], &TimeGrid::new(0.2, 0.01).recording_every(10), SeedSpec::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&traj, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,y0");
        assert_eq!(lines.len(), traj.len() + 1);
    }

    #[test]
    fn text_cells_are_quoted() {
        assert_eq!(csv_text("a,b"), "\"a,b\"");
        assert_eq!(csv_text("plain"), "plain");
    }
}
