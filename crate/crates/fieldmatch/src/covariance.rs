//! Longitude-latitude grids and structured error covariance matrices.
//!
//! The weight matrix `W = sigma_e + sigma_eta` is held with a reusable
//! Cholesky factorization so that every downstream solve reuses the one-off
//! factorization cost.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FieldMatchError, Result};

/// Regular global longitude-latitude grid, lon-major indexing:
/// field index `i = j_lat * n_lon + j_lon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n_lon: usize,
    pub n_lat: usize,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
}

impl Grid {
    /// Total field size.
    pub fn ell(&self) -> usize {
        self.n_lon * self.n_lat
    }

    /// Longitude of field index `i`.
    pub fn lon_of(&self, i: usize) -> f64 {
        self.lon[i % self.n_lon]
    }

    /// Latitude of field index `i`.
    pub fn lat_of(&self, i: usize) -> f64 {
        self.lat[i / self.n_lon]
    }
}

/// Equally spaced longitudes in [0, 360), cell-centered latitudes in (-90, 90).
pub fn build_grid(n_lon: usize, n_lat: usize) -> Result<Grid> {
    if n_lon == 0 || n_lat == 0 {
        return Err(FieldMatchError::InvalidArgument(format!(
            "grid counts must be positive, got {n_lon}x{n_lat}"
        )));
    }
    let lon: Vec<f64> = (0..n_lon).map(|j| 360.0 * j as f64 / n_lon as f64).collect();
    let dlat = 180.0 / n_lat as f64;
    let lat: Vec<f64> = (0..n_lat)
        .map(|j| -90.0 + dlat * (j as f64 + 0.5))
        .collect();
    Ok(Grid { n_lon, n_lat, lon, lat })
}

/// Per-location standard deviations, length `ell`.
#[derive(Debug, Clone)]
pub struct SigmaField {
    pub sigma: DVector<f64>,
}

impl SigmaField {
    pub fn constant(ell: usize, sigma: f64) -> Result<Self> {
        Self::new(DVector::from_element(ell, sigma))
    }

    pub fn new(sigma: DVector<f64>) -> Result<Self> {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(FieldMatchError::InvalidArgument(
                "all standard deviations must be strictly positive".into(),
            ));
        }
        Ok(SigmaField { sigma })
    }

    /// Base value everywhere, with a different value strictly below `lat_cut`
    /// degrees, e.g. a higher observation tolerance near the southern pole.
    pub fn with_southern_band(grid: &Grid, base: f64, lat_cut: f64, south: f64) -> Result<Self> {
        let sigma = DVector::from_fn(grid.ell(), |i, _| {
            if grid.lat_of(i) < lat_cut { south } else { base }
        });
        Self::new(sigma)
    }
}

/// Shortest angular longitude distance, wrapping at 360 degrees.
fn lon_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// Gaussian covariance on the grid: entry (i,j) is
/// `sigma_i sigma_j exp{ -(dlon_ij/delta_lon)^2 - (dlat_ij/delta_lat)^2 }`.
///
/// Distances are raw degrees with longitudinal wrap-around. The output is
/// exactly symmetric: the upper triangle is computed and mirrored.
pub fn gaussian_covariance(
    grid: &Grid,
    delta: (f64, f64),
    sigma_field: &SigmaField,
) -> Result<DMatrix<f64>> {
    let (delta_lon, delta_lat) = delta;
    if !(delta_lon > 0.0) || !(delta_lat > 0.0) {
        return Err(FieldMatchError::InvalidArgument(format!(
            "correlation lengths must be positive, got ({delta_lon}, {delta_lat})"
        )));
    }
    let ell = grid.ell();
    if sigma_field.sigma.len() != ell {
        return Err(FieldMatchError::InvalidArgument(format!(
            "sigma field length {} does not match grid size {ell}",
            sigma_field.sigma.len()
        )));
    }
    let sigma = &sigma_field.sigma;
    let mut cov = DMatrix::zeros(ell, ell);
    for j in 0..ell {
        let (lon_j, lat_j) = (grid.lon_of(j), grid.lat_of(j));
        for i in 0..=j {
            let dlon = lon_distance(grid.lon_of(i), lon_j) / delta_lon;
            let dlat = (grid.lat_of(i) - lat_j) / delta_lat;
            let v = sigma[i] * sigma[j] * (-dlon * dlon - dlat * dlat).exp();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Relative jitter ladder applied when the factorization of `W` fails.
#[derive(Debug, Clone)]
pub struct JitterPolicy {
    /// Relative epsilons tried in order; each is scaled by mean(diag(W)).
    pub ladder: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { ladder: vec![1e-12, 1e-10, 1e-8, 1e-6] }
    }
}

/// Observation error and discrepancy variances with their factorized sum.
#[derive(Debug, Clone)]
pub struct ErrorSpec {
    pub sigma_e: DMatrix<f64>,
    pub sigma_eta: DMatrix<f64>,
    w: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal to make the factorization succeed.
    pub applied_jitter: f64,
}

/// Smallest pivot reached by a plain Cholesky sweep; used only for error
/// reporting when nalgebra's factorization rejects the matrix.
fn smallest_cholesky_pivot(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut l = m.clone();
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = l[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        min_pivot = min_pivot.min(d);
        if d <= 0.0 {
            return min_pivot;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    min_pivot
}

/// Cholesky with the jitter ladder; returns the factor and the absolute
/// jitter that was applied (0.0 if none was needed).
pub(crate) fn factorize_spd(
    m: &DMatrix<f64>,
    policy: &JitterPolicy,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok((chol, m.clone(), 0.0));
    }
    let mean_diag = m.diagonal().mean();
    let mut max_jitter = 0.0;
    for &eps in &policy.ladder {
        let jitter = eps * mean_diag;
        max_jitter = jitter;
        let mut jm = m.clone();
        for i in 0..jm.nrows() {
            jm[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jm.clone()) {
            return Ok((chol, jm, jitter));
        }
    }
    Err(FieldMatchError::NotPositiveDefinite {
        pivot: smallest_cholesky_pivot(m),
        max_jitter,
    })
}

impl ErrorSpec {
    /// Combine observation error and discrepancy variances into the weight
    /// matrix `W = sigma_e + sigma_eta` with a validated factorization.
    pub fn combine(
        sigma_e: DMatrix<f64>,
        sigma_eta: DMatrix<f64>,
        policy: &JitterPolicy,
    ) -> Result<Self> {
        let ell = sigma_e.nrows();
        if sigma_e.ncols() != ell || sigma_eta.nrows() != ell || sigma_eta.ncols() != ell {
            return Err(FieldMatchError::InvalidArgument(
                "sigma_e and sigma_eta must be square with matching dimensions".into(),
            ));
        }
        for (name, m) in [("sigma_e", &sigma_e), ("sigma_eta", &sigma_eta)] {
            if !is_symmetric(m, 1e-8) {
                return Err(FieldMatchError::InvalidArgument(format!(
                    "{name} is not symmetric"
                )));
            }
        }
        let w = &sigma_e + &sigma_eta;
        let (factor, w, applied_jitter) = factorize_spd(&w, policy)?;
        Ok(ErrorSpec { sigma_e, sigma_eta, w, factor, applied_jitter })
    }

    /// `W = c * I` with zero discrepancy; the L2 weight when `c = 1`.
    pub fn scaled_identity(ell: usize, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(FieldMatchError::InvalidArgument(
                "identity scale must be positive".into(),
            ));
        }
        Self::combine(
            DMatrix::from_diagonal_element(ell, ell, c),
            DMatrix::zeros(ell, ell),
            &JitterPolicy::default(),
        )
    }

    pub fn identity(ell: usize) -> Result<Self> {
        Self::scaled_identity(ell, 1.0)
    }

    pub fn ell(&self) -> usize {
        self.w.nrows()
    }

    /// The factorized weight matrix (includes any applied jitter).
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Solve `W x = b` for a vector using the stored factorization.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// Solve `W X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    /// Squared weighted norm `v^T W^{-1} v`.
    pub fn weighted_sq_norm(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve_vec(v))
    }
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = m.amax().max(1.0);
    for j in 0..m.ncols() {
        for i in 0..j {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}
