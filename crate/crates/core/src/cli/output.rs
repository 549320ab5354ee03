//! File formats. CSV files open with `#` lines carrying the code version and
//! the resolved config; grids are a JSON header next to a raw little-endian
//! f64 payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleStats, Estimate};
use crate::error::{QbmError, Result};
use crate::model::{GridSpec, WaveFunction};
use crate::oracle::OracleSample;
use crate::wigner::{GridDensity, WignerGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const ENSEMBLE_COLUMNS: [&str; 12] = [
    "t",
    "mean_q",
    "se_mean_q",
    "mean_p",
    "se_mean_p",
    "m_dq",
    "se_m_dq",
    "m_dp",
    "se_m_dp",
    "m_uncert",
    "se_m_uncert",
    "n_traj",
];

pub const MOMENT_COLUMNS: [&str; 6] = ["t", "mean_q", "mean_p", "mean_q2", "mean_p2", "mean_qp_sym"];

pub const EIGEN_COLUMNS: [&str; 4] = ["t", "min_eigenvalue", "trace", "top_population"];

pub const GRID_FORMAT: &str = "qbm-grid";

/// Version and resolved config stamped into every output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub version: String,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            version: VERSION.to_string(),
            config: serde_json::to_value(config).map_err(|e| QbmError::Config(e.to_string()))?,
        })
    }

    fn csv_header(&self) -> String {
        format!("# qbm-core {}\n# config {}\n", self.version, self.config)
    }
}

/// Files written by one command. Unless `commit` is called, dropping the set
/// deletes everything it created.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    created: Vec<PathBuf>,
    created_dir: bool,
    committed: bool,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created: Vec::new(),
            created_dir,
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` for cleanup and returns its full path.
    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.created.push(p.clone());
        p
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.created
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.created)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.created {
            let _ = std::fs::remove_file(p);
        }
        if self.created_dir {
            // only succeeds if nothing else was put there
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

pub fn write_csv(path: &Path, prov: &Provenance, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(prov.csv_header().as_bytes())?;
    writeln!(f, "{}", columns.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Parsed CSV: the `#` comment lines, the column names and the numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let mut comments = Vec::new();
    let mut columns = None;
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim_start().to_string());
        } else if columns.is_none() {
            columns = Some(line.split(',').map(str::to_string).collect::<Vec<_>>());
        } else if !line.is_empty() {
            let row = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|e| QbmError::Config(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
    }
    Ok(CsvTable {
        comments,
        columns: columns.unwrap_or_default(),
        rows,
    })
}

pub fn ensemble_rows(stats: &EnsembleStats) -> Vec<Vec<f64>> {
    let pair = |e: &Estimate| [e.mean, e.se];
    stats
        .series
        .iter()
        .map(|s| {
            let mut row = vec![s.t];
            for e in [&s.mean_q, &s.mean_p, &s.m_dq, &s.m_dp, &s.m_uncert] {
                row.extend(pair(e));
            }
            row.push(stats.n_traj as f64);
            row
        })
        .collect()
}

pub fn moment_rows(series: &[(f64, crate::oracle::Moments)]) -> Vec<Vec<f64>> {
    series.iter().map(|(t, m)| vec![*t, m.q, m.p, m.q2, m.p2, m.s]).collect()
}

pub fn eigen_rows(samples: &[OracleSample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| vec![s.t, s.min_eigenvalue, s.trace, s.top_population])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Wigner,
    Density,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float64,
    /// interleaved (re, im) pairs
    Complex128,
}

/// Sidecar describing a `.bin` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub format: String,
    pub version: String,
    pub kind: GridKind,
    pub t: f64,
    /// Row-major shape; the first axis varies slowest.
    pub dims: Vec<usize>,
    /// Coordinates of the first and last node along each axis.
    pub extents: Vec<[f64; 2]>,
    pub axes: Vec<String>,
    pub hbar: f64,
    pub dtype: Dtype,
    pub layout: String,
    pub byte_order: String,
    /// File name of the payload, relative to the header.
    pub payload: String,
    /// Trajectory index for single-trajectory snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<u64>,
    pub config: serde_json::Value,
}

impl GridHeader {
    fn new(kind: GridKind, t: f64, hbar: f64, dtype: Dtype, prov: &Provenance) -> Self {
        Self {
            format: GRID_FORMAT.into(),
            version: prov.version.clone(),
            kind,
            t,
            dims: Vec::new(),
            extents: Vec::new(),
            axes: Vec::new(),
            hbar,
            dtype,
            layout: "row-major".into(),
            byte_order: "little-endian".into(),
            payload: String::new(),
            trajectory: None,
            config: prov.config.clone(),
        }
    }

    pub fn len(&self) -> usize {
        let n: usize = self.dims.iter().product();
        match self.dtype {
            Dtype::Float64 => n,
            Dtype::Complex128 => 2 * n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform node coordinates of axis `k`.
    pub fn axis(&self, k: usize) -> Vec<f64> {
        let n = self.dims[k];
        let [a, b] = self.extents[k];
        if n == 1 {
            return vec![a];
        }
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    /// The position grid of a density or state payload.
    pub fn position_grid(&self) -> Result<GridSpec> {
        let n = self.dims[0];
        let [a, b] = self.extents[0];
        let dq = (b - a) / (n - 1) as f64;
        GridSpec::new(a, b + dq, n)
    }
}

fn grid_extent(grid: &GridSpec) -> [f64; 2] {
    [grid.q(0), grid.q(grid.n - 1)]
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_grid(out: &mut OutputSet, stem: &str, mut header: GridHeader, data: &[f64]) -> Result<PathBuf> {
    header.payload = format!("{stem}.bin");
    if data.len() != header.len() {
        return Err(QbmError::Config(format!(
            "grid {stem}: payload has {} values, header expects {}",
            data.len(),
            header.len()
        )));
    }
    let bin = out.path(&header.payload);
    let mut f = BufWriter::new(File::create(&bin)?);
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    let json = out.path(&format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).map_err(|e| QbmError::Config(e.to_string()))?;
    std::fs::write(&json, text + "\n")?;
    Ok(json)
}

pub fn read_grid(header_path: &Path) -> Result<(GridHeader, Vec<f64>)> {
    let text = std::fs::read_to_string(header_path)?;
    let header: GridHeader = serde_json::from_str(&text)
        .map_err(|e| QbmError::Config(format!("{}: {e}", header_path.display())))?;
    if header.format != GRID_FORMAT || header.layout != "row-major" || header.byte_order != "little-endian" {
        return Err(QbmError::Config(format!("{}: not a qbm grid header", header_path.display())));
    }
    let bin = header_path.parent().unwrap_or(Path::new(".")).join(&header.payload);
    let mut bytes = Vec::new();
    File::open(&bin)?.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.len() {
        return Err(QbmError::Config(format!(
            "{}: expected {} bytes, found {}",
            bin.display(),
            8 * header.len(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}

fn interleave(values: &[Complex64]) -> Vec<f64> {
    values.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn deinterleave(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
}

pub fn write_wigner(out: &mut OutputSet, stem: &str, t: f64, w: &WignerGrid, prov: &Provenance) -> Result<PathBuf> {
    let mut h = GridHeader::new(GridKind::Wigner, t, w.hbar, Dtype::Float64, prov);
    h.dims = vec![w.n_q(), w.n_p()];
    h.extents = vec![[w.q[0], w.q[w.n_q() - 1]], [w.p[0], w.p[w.n_p() - 1]]];
    h.axes = vec!["q".into(), "p".into()];
    write_grid(out, stem, h, &w.values)
}

pub fn write_density(
    out: &mut OutputSet,
    stem: &str,
    t: f64,
    rho: &GridDensity,
    hbar: f64,
    prov: &Provenance,
) -> Result<PathBuf> {
    let mut h = GridHeader::new(GridKind::Density, t, hbar, Dtype::Complex128, prov);
    h.dims = vec![rho.grid.n, rho.grid.n];
    h.extents = vec![grid_extent(&rho.grid); 2];
    h.axes = vec!["q".into(), "q'".into()];
    write_grid(out, stem, h, &interleave(&rho.values))
}

pub fn write_state(
    out: &mut OutputSet,
    stem: &str,
    t: f64,
    psi: &WaveFunction,
    hbar: f64,
    trajectory: Option<u64>,
    prov: &Provenance,
) -> Result<PathBuf> {
    let mut h = GridHeader::new(GridKind::State, t, hbar, Dtype::Complex128, prov);
    h.dims = vec![psi.grid.n];
    h.extents = vec![grid_extent(&psi.grid)];
    h.axes = vec!["q".into()];
    h.trajectory = trajectory;
    write_grid(out, stem, h, &interleave(&psi.amps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance::new(&serde_json::json!({"a": 1})).unwrap()
    }

    #[test]
    fn csv_round_trip_keeps_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![vec![0.0, 1.5e-300, -2.0], vec![0.1, f64::NAN, 3.0]];
        write_csv(&p, &prov(), &["t", "a", "b"], &rows).unwrap();
        let t = read_csv(&p).unwrap();
        assert_eq!(t.columns, ["t", "a", "b"]);
        assert_eq!(t.comments[0], format!("qbm-core {VERSION}"));
        assert_eq!(t.comments[1], r#"config {"a":1}"#);
        assert_eq!(t.rows[0], rows[0]);
        assert!(t.rows[1][1].is_nan());
    }

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::new(dir.path()).unwrap();
        let grid = GridSpec::new(-1.0, 1.0, 8).unwrap();
        let psi = WaveFunction::from_fn(grid, |q| Complex64::new(q.sin(), q.cos() / 3.0));
        let json = write_state(&mut out, "s", 0.5, &psi, 0.1, Some(3), &prov()).unwrap();
        let (h, data) = read_grid(&json).unwrap();
        assert_eq!(h.dims, [8]);
        assert_eq!(h.trajectory, Some(3));
        assert_eq!(h.position_grid().unwrap(), grid);
        assert_eq!(deinterleave(&data), psi.amps);
        assert_eq!(std::fs::metadata(dir.path().join("s.bin")).unwrap().len(), 8 * 16);
        out.commit();
    }

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("run");
        {
            let mut out = OutputSet::new(&sub).unwrap();
            let p = out.path("a.csv");
            std::fs::write(&p, "x").unwrap();
        }
        assert!(!sub.exists());
        let mut out = OutputSet::new(&sub).unwrap();
        let p = out.path("a.csv");
        std::fs::write(&p, "x").unwrap();
        out.commit();
        assert!(p.exists());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::new(dir.path()).unwrap();
        let grid = GridSpec::new(-1.0, 1.0, 8).unwrap();
        let w = WignerGrid::zeros(&grid, 0.1);
        let json = write_wigner(&mut out, "w", 0.0, &w, &prov()).unwrap();
        out.commit();
        let bin = dir.path().join("w.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_grid(&json).is_err());
    }
}
