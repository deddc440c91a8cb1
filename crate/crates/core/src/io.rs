//! File formats.
//!
//! Binary files (snapshots, surfaces) start with an 8-byte magic line, a
//! little-endian `u64` header length and a JSON header, followed by raw
//! little-endian `f64` frames. CSV files carry their provenance as leading
//! `# ` comment lines. Every file records the SHA-256 of its inputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factorization::{InversionOptions, SurfaceFrame, SurfaceSet, WboForceTerms};
use crate::model::ModelParams;
use crate::observables::{ObservableRow, ObservableSeries};
use crate::quantum::{Grid, GridWavefunction};

const SNAPSHOT_MAGIC: &[u8; 8] = b"CXFSNAP1";
const SURFACE_MAGIC: &[u8; 8] = b"CXFSURF1";

/// Names and SHA-256 digests of the inputs an output was derived from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance(pub BTreeMap<String, String>);

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, digest: impl Into<String>) -> Self {
        self.0.insert(name.into(), digest.into());
        self
    }

    /// Adds the digest of a file under `name`.
    pub fn with_file(self, name: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(self.with(name, sha256_file(path)?))
    }

    fn comment_lines(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("# input {k} sha256={v}\n"))
            .collect()
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_binary_header<H: Serialize>(
    w: &mut impl Write,
    magic: &[u8; 8],
    header: &H,
) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Invariant(e.to_string()))?;
    w.write_all(magic)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_binary_header<H: DeserializeOwned>(
    r: &mut impl Read,
    magic: &[u8; 8],
    path: &Path,
) -> Result<H> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::format(path, "file too short"))?;
    if &m != magic {
        return Err(Error::format(path, "unexpected magic bytes"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::format(path, "missing header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 32 {
        return Err(Error::format(path, "implausible header length"));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::format(path, "truncated header"))?;
    serde_json::from_slice(&json).map_err(|e| Error::format(path, format!("bad header: {e}")))
}

fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; 8 * n];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated data"))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::format(path, "trailing data after last frame")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub grid: Grid,
    pub params: ModelParams,
    pub dt: f64,
    pub stride: f64,
    pub frames: usize,
    pub inputs: Provenance,
}

/// Exact-propagation snapshots: per frame `t`, then `Re, Im` interleaved
/// for the ground and the excited component.
pub fn write_snapshots(
    path: &Path,
    header: &SnapshotHeader,
    snapshots: &[GridWavefunction],
) -> Result<()> {
    if header.frames != snapshots.len() {
        return Err(Error::Invariant(
            "snapshot header frame count disagrees with data".into(),
        ));
    }
    let mut w = create(path)?;
    write_binary_header(&mut w, SNAPSHOT_MAGIC, header)?;
    for s in snapshots {
        if s.grid != header.grid {
            return Err(Error::GridMismatch(
                "snapshot grid differs from header".into(),
            ));
        }
        write_f64s(&mut w, std::iter::once(s.t))?;
        for comp in [&s.comp_g, &s.comp_e] {
            write_f64s(&mut w, comp.iter().flat_map(|z| [z.re, z.im]))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<(SnapshotHeader, Vec<GridWavefunction>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header: SnapshotHeader = read_binary_header(&mut r, SNAPSHOT_MAGIC, path)?;
    header
        .grid
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n = header.grid.n_points;
    let mut out = Vec::with_capacity(header.frames);
    let unpack = |v: &[f64]| -> Vec<Complex64> {
        v.chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect()
    };
    for _ in 0..header.frames {
        let data = read_f64s(&mut r, 1 + 4 * n, path)?;
        out.push(GridWavefunction {
            grid: header.grid,
            t: data[0],
            comp_g: unpack(&data[1..1 + 2 * n]),
            comp_e: unpack(&data[1 + 2 * n..]),
        });
    }
    expect_eof(&mut r, path)?;
    Ok((header, out))
}

/// Per-point columns of the surface file, in order.
pub const SURFACE_COLUMNS: [&str; 11] = [
    "q",
    "e_wbo",
    "e_kin",
    "e_gd",
    "e_qtdpes",
    "density",
    "pop_upper",
    "mask",
    "f_lower_slope",
    "f_gap_slope",
    "f_population_gradient",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceHeader {
    pub grid: Grid,
    pub params: ModelParams,
    pub t0: f64,
    pub stride: f64,
    pub frames: usize,
    pub times: Vec<f64>,
    pub gauge_ref_q: f64,
    pub options: InversionOptions,
    pub columns: Vec<String>,
    pub trusted: Vec<bool>,
    /// `None` where the gauge term could not be formed.
    pub gd_imag: Vec<Option<f64>>,
    pub failures: Vec<(f64, String)>,
    pub inputs: Provenance,
}

pub fn write_surfaces(path: &Path, set: &SurfaceSet, inputs: &Provenance) -> Result<()> {
    let header = SurfaceHeader {
        grid: set.grid,
        params: set.params,
        t0: set.t0,
        stride: set.stride,
        frames: set.frames.len(),
        times: set.times(),
        gauge_ref_q: set.gauge_ref_q,
        options: set.options,
        columns: SURFACE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        trusted: set.frames.iter().map(|f| f.trusted).collect(),
        gd_imag: set
            .frames
            .iter()
            .map(|f| f.gd_imag.is_finite().then_some(f.gd_imag))
            .collect(),
        failures: set.failures.clone(),
        inputs: inputs.clone(),
    };
    let mut w = create(path)?;
    write_binary_header(&mut w, SURFACE_MAGIC, &header)?;
    for f in &set.frames {
        for j in 0..set.grid.n_points {
            write_f64s(
                &mut w,
                [
                    set.grid.q(j),
                    f.wbo[j],
                    f.kin[j],
                    f.gd[j],
                    f.qtdpes[j],
                    f.density[j],
                    f.pop_e[j],
                    if f.mask[j] { 1.0 } else { 0.0 },
                    f.forces.lower_slope[j],
                    f.forces.gap_slope[j],
                    f.forces.population_gradient[j],
                ],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_surfaces(path: &Path) -> Result<(SurfaceHeader, SurfaceSet)> {
    let mut r = BufReader::new(File::open(path)?);
    let header: SurfaceHeader = read_binary_header(&mut r, SURFACE_MAGIC, path)?;
    header
        .grid
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.columns.len() != SURFACE_COLUMNS.len()
        || header
            .columns
            .iter()
            .zip(SURFACE_COLUMNS)
            .any(|(a, b)| a != b)
    {
        return Err(Error::format(path, "unexpected column layout"));
    }
    if header.trusted.len() != header.frames || header.gd_imag.len() != header.frames {
        return Err(Error::format(path, "per-frame metadata length mismatch"));
    }
    let n = header.grid.n_points;
    let width = SURFACE_COLUMNS.len();
    let mut frames = Vec::with_capacity(header.frames);
    for k in 0..header.frames {
        let data = read_f64s(&mut r, width * n, path)?;
        let col = |c: usize| -> Vec<f64> { (0..n).map(|j| data[j * width + c]).collect() };
        let lower_slope = col(8);
        let gap_slope = col(9);
        let population_gradient = col(10);
        frames.push(SurfaceFrame {
            t: header.t0 + k as f64 * header.stride,
            wbo: col(1),
            kin: col(2),
            gd: col(3),
            qtdpes: col(4),
            density: col(5),
            pop_e: col(6),
            mask: col(7).into_iter().map(|m| m != 0.0).collect(),
            forces: WboForceTerms {
                weighted: lower_slope
                    .iter()
                    .zip(&gap_slope)
                    .map(|(a, b)| a + b)
                    .collect(),
                population: population_gradient.clone(),
                lower_slope,
                gap_slope,
                population_gradient,
            },
            trusted: header.trusted[k],
            gd_imag: header.gd_imag[k].unwrap_or(f64::NAN),
        });
    }
    expect_eof(&mut r, path)?;
    let set = SurfaceSet {
        grid: header.grid,
        params: header.params,
        t0: header.t0,
        stride: header.stride,
        gauge_ref_q: header.gauge_ref_q,
        options: header.options,
        frames,
        failures: header.failures.clone(),
    };
    Ok((header, set))
}

/// Formats a float so it parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// Writes a CSV with provenance comments, a header row and numeric rows.
pub fn write_csv<R, I>(
    path: &Path,
    comments: &[String],
    inputs: &Provenance,
    columns: &[&str],
    rows: I,
) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut w = create(path)?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    w.write_all(inputs.comment_lines().as_bytes())?;
    writeln!(w, "{}", columns.join(","))?;
    for row in rows {
        let line: Vec<String> = row.as_ref().iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Comment lines and numeric table of a CSV written by [`write_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Value of a `key: value` comment line.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.comments
            .iter()
            .find_map(|c| c.strip_prefix(key).and_then(|rest| rest.strip_prefix(": ")))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    let mut comments = Vec::new();
    let mut columns = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim_start().to_string());
        } else if columns.is_none() {
            columns = Some(line.split(',').map(str::to_string).collect::<Vec<_>>());
        } else if !line.trim().is_empty() {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            rows.push(row);
        }
    }
    let columns = columns.ok_or_else(|| Error::format(path, "missing header row"))?;
    if rows.iter().any(|r| r.len() != columns.len()) {
        return Err(Error::format(path, "row width differs from header"));
    }
    Ok(CsvTable {
        comments,
        columns,
        rows,
    })
}

pub const SERIES_COLUMNS: [&str; 8] = [
    "t",
    "N",
    "q2",
    "p2",
    "p2_chi",
    "kin_correction",
    "norm",
    "excluded",
];

pub fn write_series(path: &Path, series: &ObservableSeries, inputs: &Provenance) -> Result<()> {
    write_csv(
        path,
        &[
            format!("method: {}", series.method),
            format!("omega_c: {}", fmt_f64(series.omega_c)),
        ],
        inputs,
        &SERIES_COLUMNS,
        series.rows.iter().map(|r| {
            [
                r.t,
                r.n_photon,
                r.q2,
                r.p2,
                r.p2_chi,
                r.kin_correction,
                r.norm,
                r.excluded as f64,
            ]
        }),
    )
}

pub fn read_series(path: &Path) -> Result<ObservableSeries> {
    let table = read_csv(path)?;
    if table.columns != SERIES_COLUMNS {
        return Err(Error::format(path, "not an observable series"));
    }
    let method = table
        .meta("method")
        .ok_or_else(|| Error::format(path, "missing method line"))?
        .to_string();
    let omega_c = table
        .meta("omega_c")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "missing omega_c line"))?;
    let rows = table
        .rows
        .iter()
        .map(|r| ObservableRow {
            t: r[0],
            n_photon: r[1],
            q2: r[2],
            p2: r[3],
            p2_chi: r[4],
            kin_correction: r[5],
            norm: r[6],
            excluded: r[7] as usize,
        })
        .collect();
    Ok(ObservableSeries {
        method,
        omega_c,
        rows,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}
