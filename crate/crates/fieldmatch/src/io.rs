//! Wire formats: the dense text matrix format and the TOML run configuration.
//!
//! Matrix files are row-major comma-separated text with a `rows,cols` header
//! line. Values are written with 17 significant digits, which round-trips
//! every finite double bitwise.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    build_grid, gaussian_covariance, Grid, SigmaField,
};
use crate::error::{FieldMatchError, Result};
use crate::gp::{GpConfig, MeanKind};
use crate::rotation::RotationConfig;
use crate::wave::{BasisKind, ThresholdKind, WaveConfig};

fn io_err(path: &Path, source: std::io::Error) -> FieldMatchError {
    FieldMatchError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> FieldMatchError {
    FieldMatchError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Write a matrix in the text format; bitwise-exact round-trip for finite
/// doubles.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = |s: String| w.write_all(s.as_bytes()).map_err(|e| io_err(path, e));
    emit(format!("{},{}\n", m.nrows(), m.ncols()))?;
    for i in 0..m.nrows() {
        let mut line = String::new();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            // 16 digits after the point = 17 significant digits
            line.push_str(&format!("{:.16e}", m[(i, j)]));
        }
        line.push('\n');
        emit(line)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a matrix written by [`write_matrix`]. The header shape is
/// authoritative; mismatches and bad tokens error with their line number.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut parts = header.split(',');
    let rows: usize = parts
        .next()
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "header must be `rows,cols`"))?;
    let cols: usize = parts
        .next()
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| parse_err(path, 1, "header must be `rows,cols`"))?;
    if parts.next().is_some() {
        return Err(parse_err(path, 1, "header must be `rows,cols`"));
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut row = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row >= rows {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {rows} rows but found more"),
            ));
        }
        let mut col = 0usize;
        for tok in line.split(',') {
            if col >= cols {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("expected {cols} columns but found more"),
                ));
            }
            let v: f64 = tok.trim().parse().map_err(|_| {
                parse_err(path, idx + 1, format!("non-numeric token `{}`", tok.trim()))
            })?;
            m[(row, col)] = v;
            col += 1;
        }
        if col != cols {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {cols} columns, found {col}"),
            ));
        }
        row += 1;
    }
    if row != rows {
        return Err(parse_err(
            path,
            text.lines().count() + 1,
            format!("expected {rows} rows, found {row}"),
        ));
    }
    Ok(m)
}

/// Write a vector as an `n x 1` matrix file.
pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Read an `n x 1` (or `1 x n`) matrix file as a vector.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() == 1 {
        Ok(DVector::from_column_slice(m.as_slice()))
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(FieldMatchError::InvalidArgument(format!(
            "expected a vector file, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

fn default_probability() -> f64 {
    0.995
}
fn default_threshold() -> f64 {
    0.90
}
fn default_basis_kind() -> BasisKind {
    BasisKind::Svd
}
fn default_threshold_kind() -> ThresholdKind {
    ThresholdKind::Chi2Coeff
}
fn default_min_first() -> f64 {
    0.10
}
fn default_sigma_eta() -> f64 {
    0.0
}

/// Grid section of the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_lon: usize,
    pub n_lat: usize,
}

/// Error-covariance section: Gaussian correlation with constant or
/// latitude-banded standard deviations, plus an optional diagonal discrepancy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorSection {
    pub delta_lon: f64,
    pub delta_lat: f64,
    pub sigma: f64,
    /// Optional distinct sigma south of `lat_cut`.
    pub sigma_south: Option<f64>,
    pub lat_cut: Option<f64>,
    /// Diagonal discrepancy variance (0 disables it).
    #[serde(default = "default_sigma_eta")]
    pub sigma_eta: f64,
}

/// Wave section mirroring [`WaveConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSection {
    pub input_dim: usize,
    pub sample_count: usize,
    pub seed: u64,
    #[serde(default = "default_basis_kind")]
    pub basis_kind: BasisKind,
    #[serde(default = "default_threshold")]
    pub truncation_threshold: f64,
    #[serde(default = "default_threshold_kind")]
    pub threshold_kind: ThresholdKind,
    #[serde(default = "default_probability")]
    pub probability: f64,
    #[serde(default = "default_min_first")]
    pub min_first_vector_variance: f64,
}

/// Optional GP hyperparameter section.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    pub mean_kind: Option<MeanKind>,
    pub nugget: Option<f64>,
    pub lengthscale_lower: Option<f64>,
    pub lengthscale_upper: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
}

/// File-path section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub ensemble: String,
    pub design: String,
    pub z: String,
    pub true_x: Option<String>,
}

/// The full run configuration document; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub errors: ErrorSection,
    pub wave: WaveSection,
    #[serde(default)]
    pub gp: GpSection,
    pub paths: PathSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| FieldMatchError::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<Grid> {
        build_grid(self.grid.n_lon, self.grid.n_lat)
    }

    /// Build the observation-error and discrepancy variance matrices.
    pub fn error_matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let grid = self.grid()?;
        let ell = grid.ell();
        let sf = match (self.errors.sigma_south, self.errors.lat_cut) {
            (Some(south), Some(cut)) => {
                SigmaField::with_southern_band(&grid, self.errors.sigma, cut, south)?
            }
            (None, None) => SigmaField::constant(ell, self.errors.sigma)?,
            _ => {
                return Err(FieldMatchError::Config(
                    "sigma_south and lat_cut must be given together".into(),
                ))
            }
        };
        let sigma_e =
            gaussian_covariance(&grid, (self.errors.delta_lon, self.errors.delta_lat), &sf)?;
        let sigma_eta = if self.errors.sigma_eta > 0.0 {
            DMatrix::from_diagonal_element(ell, ell, self.errors.sigma_eta)
        } else {
            DMatrix::zeros(ell, ell)
        };
        Ok((sigma_e, sigma_eta))
    }

    pub fn gp_config(&self) -> GpConfig {
        let mut cfg = GpConfig::default();
        if let Some(mk) = self.gp.mean_kind {
            cfg.mean_kind = mk;
        }
        if let Some(n) = self.gp.nugget {
            cfg.nugget = n;
        }
        if let (Some(lo), Some(hi)) = (self.gp.lengthscale_lower, self.gp.lengthscale_upper) {
            cfg.lengthscale_bounds = vec![(lo, hi)];
        }
        if let Some(r) = self.gp.restarts {
            cfg.restarts = r;
        }
        if let Some(s) = self.gp.seed {
            cfg.seed = s;
        }
        cfg
    }

    pub fn wave_config(&self) -> WaveConfig {
        WaveConfig {
            input_dim: self.wave.input_dim,
            sample_count: self.wave.sample_count,
            seed: self.wave.seed,
            basis_kind: self.wave.basis_kind,
            truncation_threshold: self.wave.truncation_threshold,
            rotation: RotationConfig {
                min_first_vector_variance: self.wave.min_first_vector_variance,
                truncation_threshold: self.wave.truncation_threshold,
            },
            gp: self.gp_config(),
            threshold_kind: self.wave.threshold_kind,
            probability: self.wave.probability,
            include_points: None,
        }
    }
}
