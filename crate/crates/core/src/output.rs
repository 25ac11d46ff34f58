//! Frame and manifest output: full-precision CSV densities, optional 16-bit
//! binary graymaps with shared max scaling, and a JSON run manifest indexing
//! every written file with its checksum.
//!
//! Output is deterministic: the same resolved configuration produces
//! byte-identical frames and manifest (no timestamps are recorded).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{FrameFormat, ScenarioConfig};
use crate::diagnostics::RunMetrics;
use crate::grid::{Field, GridSpec};
use crate::sinkhorn::ConvergenceReport;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("frame file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{0}")]
    Unsupported(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Shortest round-trip decimal, plain notation for moderate magnitudes and
/// exponent notation outside them.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Writes one density frame as CSV: `M/m` rows of `m` comma-separated values
/// (row-major, last dimension across the columns, LF newlines).
pub fn write_csv_field(path: &Path, field: &Field<f64>) -> Result<(), OutputError> {
    let m = field.spec().points_per_dim;
    let mut text = String::with_capacity(field.len() * 20);
    for row in field.values().chunks(m) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            text.push_str(&format_float(*v));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a frame written by [`write_csv_field`] (any comma/whitespace layout
/// with the right cell count in row-major order is accepted).
pub fn read_csv_field(path: &Path, grid: &GridSpec) -> Result<Field<f64>, OutputError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut values = Vec::with_capacity(grid.total_cells());
    for token in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if token.is_empty() {
            continue;
        }
        let v: f64 = token.parse().map_err(|_| OutputError::Malformed {
            path: path.to_path_buf(),
            reason: format!("unparseable value '{token}'"),
        })?;
        values.push(v);
    }
    if values.len() != grid.total_cells() {
        return Err(OutputError::Malformed {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} values, found {}",
                grid.total_cells(),
                values.len()
            ),
        });
    }
    Ok(Field::new(*grid, values).expect("length checked above"))
}

/// Writes a 16-bit binary graymap (P5, maxval 65535, big-endian samples).
/// `scale_max` maps to 65535; pass the shared maximum across all frames.
pub fn write_pgm_field(path: &Path, field: &Field<f64>, scale_max: f64) -> Result<(), OutputError> {
    let spec = field.spec();
    if spec.dims > 2 {
        return Err(OutputError::Unsupported(
            "graymap output supports 1- and 2-dimensional grids".into(),
        ));
    }
    let width = spec.points_per_dim;
    let height = field.len() / width;
    let mut bytes = Vec::with_capacity(32 + 2 * field.len());
    bytes.extend_from_slice(format!("P5\n{width} {height}\n65535\n").as_bytes());
    let scale = if scale_max > 0.0 { 65535.0 / scale_max } else { 0.0 };
    for &v in field.values() {
        let level = (v * scale).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&level.to_be_bytes());
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

/// One written frame file.
#[derive(Debug, Clone, Serialize)]
pub struct FrameEntry {
    pub index: usize,
    pub path: String,
    pub sha256: String,
}

/// Fixed implementation choices recorded with every run.
#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub log_convolution: &'static str,
    pub nonlocal_potential: &'static str,
    pub obstacle_sampling: &'static str,
    pub entropy_reference: &'static str,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            log_convolution: "per-slice max-shift",
            nonlocal_potential: "f2 = -(K * rho) * cell_volume, no 1/2 factor",
            obstacle_sampling: "marginal times kT/N, strict cell-center interior",
            entropy_reference: "Lebesgue via cell_volume-scaled counting measure",
        }
    }
}

/// The run manifest: resolved config echo, solver report, metrics and the
/// frame index with checksums.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ScenarioConfig,
    pub conventions: Conventions,
    pub residuals: ConvergenceReport,
    pub metrics: RunMetrics,
    pub frames: Vec<FrameEntry>,
}

fn sha256_hex(path: &Path) -> Result<String, OutputError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

/// Writes all marginal frames plus `manifest.json` into `dir` and returns the
/// manifest. Frame `k` is named `frame_{k:04}.csv` / `.pgm`; graymaps share
/// one max scaling so the brightest cell across the run maps to 65535.
pub fn write_run(
    dir: &Path,
    format: FrameFormat,
    config: &ScenarioConfig,
    report: &ConvergenceReport,
    metrics: &RunMetrics,
    marginals: &[Field<f64>],
) -> Result<RunManifest, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut frames = Vec::new();
    let global_max = marginals
        .iter()
        .map(|m| m.max_value())
        .fold(0.0f64, f64::max);
    for (k, marginal) in marginals.iter().enumerate() {
        if matches!(format, FrameFormat::Csv | FrameFormat::Both) {
            let name = format!("frame_{k:04}.csv");
            let path = dir.join(&name);
            write_csv_field(&path, marginal)?;
            frames.push(FrameEntry {
                index: k,
                path: name,
                sha256: sha256_hex(&path)?,
            });
        }
        if matches!(format, FrameFormat::Pgm | FrameFormat::Both) {
            let name = format!("frame_{k:04}.pgm");
            let path = dir.join(&name);
            write_pgm_field(&path, marginal, global_max)?;
            frames.push(FrameEntry {
                index: k,
                path: name,
                sha256: sha256_hex(&path)?,
            });
        }
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        conventions: Conventions::default(),
        residuals: report.clone(),
        metrics: metrics.clone(),
        frames,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
