//! Terminal-case detection and observation-driven basis rotation.
//!
//! A truncated SVD basis can be unable to represent the observations well
//! enough to ever pass the implausibility threshold, regardless of the
//! emulators. `terminal_case_check` detects this. `rotate_basis` builds an
//! alternative basis whose leading vector reconstructs the observations as
//! well as the ensemble span allows, blended toward the leading SVD
//! direction just enough to keep its coefficients emulatable, with the
//! remaining vectors taken from the SVD of the deflated ensemble.

use nalgebra::{DMatrix, DVector};

use crate::basis::{
    canonical_signs, cumulative_variance, reconstruction_error, svd_basis, truncate_basis, Basis,
    WeightedProjector,
};
use crate::covariance::ErrorSpec;
use crate::error::{FieldMatchError, Result};

/// Number of blend values scanned between the observation direction and the
/// leading SVD direction.
pub const BLEND_GRID: usize = 512;

#[derive(Debug, Clone)]
pub struct RotationConfig {
    /// Fraction of ensemble variance the leading rotated vector must retain.
    pub min_first_vector_variance: f64,
    /// Truncation threshold applied to the rotated sequence.
    pub truncation_threshold: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig { min_first_vector_variance: 0.10, truncation_threshold: 0.90 }
    }
}

/// Outcome of the terminal-case check.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TerminalCheck {
    pub terminal: bool,
    pub r_w: f64,
    pub threshold: f64,
}

/// True iff the reconstruction error of `z` on the retained basis exceeds
/// the threshold, in which case NROY space is guaranteed empty.
pub fn terminal_case_check(
    basis: &Basis,
    z: &DVector<f64>,
    weight: &ErrorSpec,
    threshold_t: f64,
) -> Result<TerminalCheck> {
    let r_w = reconstruction_error(basis, z, weight, false)?;
    Ok(TerminalCheck { terminal: r_w > threshold_t, r_w, threshold: threshold_t })
}

/// Fraction of total ensemble variance explained by unit (L2) vector `v`.
fn variance_fraction(f_centered: &DMatrix<f64>, v: &DVector<f64>, total: f64) -> f64 {
    let coeffs = f_centered.transpose() * v;
    coeffs.norm_squared() / total
}

fn blend(v_obs: &DVector<f64>, leading: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let v = v_obs * (1.0 - lambda) + leading * lambda;
    let n = v.norm();
    if n < 1e-12 {
        None
    } else {
        Some(v / n)
    }
}

/// Build the rotated basis for a fixed leading vector `v1`: deflate the
/// ensemble W-orthogonally to `v1`, take the SVD of the residual, then
/// W-orthogonalize the residual sequence.
fn build_rotated(
    ensemble_centered: &DMatrix<f64>,
    mu: &DVector<f64>,
    v1: &DVector<f64>,
    weight: &ErrorSpec,
) -> Basis {
    let n = ensemble_centered.ncols();
    let wv = weight.solve_vec(v1);
    let denom = v1.dot(&wv);
    let proj_coeffs = ensemble_centered.transpose() * &wv / denom;
    let deflated = ensemble_centered - v1 * proj_coeffs.transpose();

    let svd = deflated.transpose().svd(false, true);
    let v_t = svd.v_t.expect("svd with v requested");
    let sv = &svd.singular_values;
    let max_sv = sv.max();
    let mut residual_vecs: Vec<DVector<f64>> = Vec::new();
    if max_sv > 0.0 {
        for (k, &d) in sv.iter().enumerate() {
            if d > crate::basis::RANK_CUTOFF * max_sv {
                residual_vecs.push(v_t.row(k).transpose());
            }
        }
    }

    // W Gram-Schmidt among the residual vectors (they are already
    // W-orthogonal to v1 by the deflation)
    let mut columns: Vec<DVector<f64>> = vec![v1.clone()];
    let mut w_solved: Vec<DVector<f64>> = vec![wv];
    for vec in residual_vecs {
        let mut u = vec;
        for (c, ws) in columns.iter().zip(&w_solved) {
            let coeff = u.dot(ws) / c.dot(ws);
            u -= c * coeff;
        }
        let norm = u.norm();
        if norm < 1e-10 {
            continue;
        }
        u /= norm;
        w_solved.push(weight.solve_vec(&u));
        columns.push(u);
    }

    let mut gamma = DMatrix::from_columns(&columns);
    canonical_signs(&mut gamma);

    // variance accounting: L2-orthonormalize the sequence incrementally so
    // each pseudo singular value is a genuine subspace-increment norm
    let total: f64 = ensemble_centered
        .column_iter()
        .map(|c| c.norm_squared())
        .sum();
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(gamma.ncols());
    let mut pseudo_sv = Vec::with_capacity(gamma.ncols());
    for col in gamma.column_iter() {
        let mut u = col.into_owned();
        for e in &ortho {
            let coeff = u.dot(e);
            u -= e * coeff;
        }
        let norm = u.norm();
        let d2 = if norm < 1e-10 {
            0.0
        } else {
            u /= norm;
            let d2 = (ensemble_centered.transpose() * &u).norm_squared();
            ortho.push(u);
            d2
        };
        pseudo_sv.push(d2.sqrt());
    }
    let singular_values = DVector::from_vec(pseudo_sv);
    let mut variance_explained = cumulative_variance(&singular_values);
    // guard against rounding pushing the cumulative fraction past 1
    for v in &mut variance_explained {
        *v = v.min(1.0);
    }
    let _ = total;

    let q = gamma.ncols();
    Basis {
        gamma,
        singular_values,
        mu: mu.clone(),
        q,
        variance_explained,
        n_members: n,
    }
}

/// Rotate the SVD basis toward the observations.
///
/// `z` must already be centered by the ensemble mean. The returned basis
/// satisfies `R_W(rotated truncated, z) <= R_W(SVD truncated, z)` at the
/// rotated basis's truncation size.
pub fn rotate_basis(
    ensemble: &crate::basis::Ensemble,
    z: &DVector<f64>,
    weight: &ErrorSpec,
    config: &RotationConfig,
) -> Result<Basis> {
    if !(config.min_first_vector_variance > 0.0 && config.min_first_vector_variance < 1.0)
        || !(config.truncation_threshold > 0.0 && config.truncation_threshold <= 1.0)
    {
        return Err(FieldMatchError::InvalidArgument(
            "rotation config fractions must lie in (0, 1)".into(),
        ));
    }
    let full = svd_basis(ensemble)?;
    if full.rank() < 2 {
        return Err(FieldMatchError::InvalidArgument(
            "rotation needs ensemble rank >= 2".into(),
        ));
    }
    let total: f64 = full.singular_values.iter().map(|d| d * d).sum();

    // weighted least-squares reconstruction of z within the full span
    let projector = WeightedProjector::new(&full, weight)?;
    let c_full = projector.project(z);
    let v_raw = &full.gamma * &c_full;
    let raw_norm = v_raw.norm();
    if raw_norm < 1e-12 * z.norm().max(1.0) {
        // z has no component in the ensemble span: nothing to gain
        return truncate_basis(&full, config.truncation_threshold);
    }
    let v_obs = v_raw / raw_norm;
    let leading = full.gamma.column(0).into_owned();

    let leading_frac = variance_fraction(&ensemble.f_centered, &leading, total);
    if leading_frac < config.min_first_vector_variance {
        return Err(FieldMatchError::ConstraintInfeasible {
            achieved: leading_frac,
            required: config.min_first_vector_variance,
        });
    }

    // smallest blend on the grid meeting the variance constraint
    let lambdas: Vec<f64> = (0..BLEND_GRID)
        .map(|i| i as f64 / (BLEND_GRID - 1) as f64)
        .collect();
    let mut chosen = None;
    for &lambda in &lambdas {
        if let Some(v) = blend(&v_obs, &leading, lambda) {
            if variance_fraction(&ensemble.f_centered, &v, total)
                >= config.min_first_vector_variance
            {
                chosen = Some((lambda, v));
                break;
            }
        }
    }
    let (mut lambda, mut v1) = chosen.ok_or(FieldMatchError::ConstraintInfeasible {
        achieved: leading_frac,
        required: config.min_first_vector_variance,
    })?;

    let svd_trunc = truncate_basis(&full, config.truncation_threshold)?;
    loop {
        let rotated = build_rotated(&ensemble.f_centered, &ensemble.mu, &v1, weight);
        let rotated = truncate_basis(&rotated, config.truncation_threshold)?;
        // compare at equal q: the rotated truncation size, capped by the
        // SVD basis rank
        let q_cmp = rotated.q.min(svd_trunc.rank());
        let r_rot = reconstruction_error(&rotated.with_q(q_cmp)?, z, weight, false)?;
        let r_svd = reconstruction_error(&svd_trunc.with_q(q_cmp)?, z, weight, false)?;
        if r_rot <= r_svd * (1.0 + 1e-10) || lambda == 0.0 {
            return Ok(rotated);
        }
        // the blend overshot: walk back toward the pure observation
        // direction, which always satisfies the guarantee
        let step = 1.0 / (BLEND_GRID - 1) as f64;
        lambda = (lambda - step).max(0.0);
        v1 = blend(&v_obs, &leading, lambda).unwrap_or_else(|| v_obs.clone());
    }
}
