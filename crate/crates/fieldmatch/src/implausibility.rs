//! Implausibility three ways: the dense direct Mahalanobis distance, the
//! coefficient implausibility in the projected space, and the fast-exact
//! decomposition `I(x) = R_W + I~_W(x)` that holds when the projection norm is
//! the total error variance `W = sigma_e + sigma_eta`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::basis::{Basis, WeightedProjector};
use crate::covariance::{factorize_spd, ErrorSpec, JitterPolicy};
use crate::error::{FieldMatchError, Result};

/// Emulated field variance for the direct evaluation path.
pub enum FieldVar<'a> {
    /// Full `ell x ell` variance matrix.
    Dense(&'a DMatrix<f64>),
    /// `factor * diag(diag) * factor^T` with an `ell x q` factor.
    LowRank {
        factor: &'a DMatrix<f64>,
        diag: &'a DVector<f64>,
    },
}

impl FieldVar<'_> {
    fn dense(&self, ell: usize) -> Result<DMatrix<f64>> {
        match self {
            FieldVar::Dense(m) => {
                if m.nrows() != ell || m.ncols() != ell {
                    return Err(FieldMatchError::InvalidArgument(format!(
                        "field variance is {}x{} but fields have length {ell}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok((*m).clone())
            }
            FieldVar::LowRank { factor, diag } => {
                if factor.nrows() != ell || factor.ncols() != diag.len() {
                    return Err(FieldMatchError::InvalidArgument(
                        "low-rank variance factor shape mismatch".into(),
                    ));
                }
                let mut scaled = (*factor).clone();
                for (j, mut col) in scaled.column_iter_mut().enumerate() {
                    col *= diag[j];
                }
                Ok(scaled * factor.transpose())
            }
        }
    }
}

/// Direct field implausibility `(z - e_f)^T (var_f + sigma_e + sigma_eta)^{-1}
/// (z - e_f)` via a dense factorization.
///
/// This is the slow reference path: quadratic memory and cubic time in the
/// field length. The decomposed path reproduces it exactly with q-dimensional
/// work per candidate.
pub fn field_implausibility_direct(
    z: &DVector<f64>,
    e_f: &DVector<f64>,
    var_f: FieldVar<'_>,
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
) -> Result<f64> {
    let ell = z.len();
    if e_f.len() != ell || sigma_e.nrows() != ell || sigma_eta.nrows() != ell {
        return Err(FieldMatchError::InvalidArgument(
            "direct implausibility inputs must share the field length".into(),
        ));
    }
    let total = var_f.dense(ell)? + sigma_e + sigma_eta;
    let (chol, _, _) = factorize_spd(&total, &JitterPolicy::default())?;
    let resid = z - e_f;
    Ok(resid.dot(&chol.solve(&resid)))
}

/// Projected observation-error and discrepancy variances
/// `Var[c(e)] = Psi^{-1} Gq^T W^{-1} sigma_e W^{-1} Gq Psi^{-T}` (and likewise
/// for eta), computed with factorization solves.
pub fn project_error_variances(
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
    basis: &Basis,
    weight: &ErrorSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let projector = WeightedProjector::new(basis, weight)?;
    let sandwich = |sigma: &DMatrix<f64>| -> DMatrix<f64> {
        let inner = projector.w_inv_gamma.transpose() * sigma * &projector.w_inv_gamma;
        let half = projector.psi_solve_mat(&inner);
        let full = projector.psi_solve_mat(&half.transpose());
        // symmetric by construction up to rounding
        (&full + full.transpose()) * 0.5
    };
    Ok((sandwich(sigma_e), sandwich(sigma_eta)))
}

/// One-off quantities for fast per-candidate implausibility. After the single
/// expensive `W` factorization everything per candidate is q-dimensional.
#[derive(Debug, Clone)]
pub struct MatchPrecomp {
    /// Projected (centered) observations `c(z)`.
    pub c_z: DVector<f64>,
    /// `Psi = Gq^T W^{-1} Gq`.
    pub psi: DMatrix<f64>,
    psi_inv: DMatrix<f64>,
    /// Projected observation-error variance.
    pub var_c_e: DMatrix<f64>,
    /// Projected discrepancy variance.
    pub var_c_eta: DMatrix<f64>,
    /// Reconstruction error of the observations in the retained basis.
    pub r_w: f64,
    /// NROY threshold.
    pub threshold_t: f64,
    /// True when the projection weight is exactly `sigma_e + sigma_eta`, the
    /// condition under which the decomposition equals the direct distance.
    decomposition_valid: bool,
}

impl MatchPrecomp {
    pub fn q(&self) -> usize {
        self.c_z.len()
    }

    pub fn decomposition_valid(&self) -> bool {
        self.decomposition_valid
    }
}

/// Build a [`MatchPrecomp`] projecting in the norm of `weight` while the true
/// error variances are `sigma_e` and `sigma_eta`. The decomposition is only
/// marked valid when `weight` was built from exactly those matrices.
pub fn make_precomp_with_weight(
    basis: &Basis,
    z_centered: &DVector<f64>,
    weight: &ErrorSpec,
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
    threshold: f64,
) -> Result<MatchPrecomp> {
    if z_centered.len() != basis.ell() {
        return Err(FieldMatchError::InvalidArgument(format!(
            "observation length {} does not match basis field length {}",
            z_centered.len(),
            basis.ell()
        )));
    }
    if !(threshold > 0.0) {
        return Err(FieldMatchError::InvalidArgument(
            "threshold must be positive".into(),
        ));
    }
    let projector = WeightedProjector::new(basis, weight)?;
    let c_z = projector.project(z_centered);
    let resid = z_centered - basis.gamma_q() * &c_z;
    let r_w = weight.weighted_sq_norm(&resid);
    let (var_c_e, var_c_eta) = project_error_variances(sigma_e, sigma_eta, basis, weight)?;
    let psi_inv = projector.psi_solve_mat(&DMatrix::identity(projector.q(), projector.q()));
    let psi_inv = (&psi_inv + psi_inv.transpose()) * 0.5;
    let decomposition_valid = weight.sigma_e == *sigma_e && weight.sigma_eta == *sigma_eta;
    Ok(MatchPrecomp {
        c_z,
        psi: projector.psi.clone(),
        psi_inv,
        var_c_e,
        var_c_eta,
        r_w: r_w.max(0.0),
        threshold_t: threshold,
        decomposition_valid,
    })
}

/// Build a [`MatchPrecomp`] with `W = sigma_e + sigma_eta`, the configuration
/// for which the decomposition is exact.
pub fn make_precomp(
    basis: &Basis,
    z_centered: &DVector<f64>,
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
    threshold: f64,
) -> Result<MatchPrecomp> {
    let weight = ErrorSpec::combine(sigma_e.clone(), sigma_eta.clone(), &JitterPolicy::default())?;
    make_precomp_with_weight(basis, z_centered, &weight, sigma_e, sigma_eta, threshold)
}

/// Reusable buffers so the per-candidate hot path allocates nothing.
#[derive(Debug, Clone)]
pub struct EvalScratch {
    inner: DMatrix<f64>,
    diff: DVector<f64>,
}

impl EvalScratch {
    pub fn new(q: usize) -> Self {
        EvalScratch {
            inner: DMatrix::zeros(q, q),
            diff: DVector::zeros(q),
        }
    }
}

/// In-place Cholesky of `m` (lower triangle) followed by a forward solve of
/// `L y = d`; returns `d^T m^{-1} d = ||y||^2`. Errors name the failing pivot.
fn spd_quadratic_in_place(m: &mut DMatrix<f64>, d: &mut DVector<f64>) -> Result<f64> {
    let n = m.nrows();
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= m[(j, k)] * m[(j, k)];
        }
        if diag <= 0.0 {
            return Err(FieldMatchError::NotPositiveDefinite {
                pivot: diag,
                max_jitter: 0.0,
            });
        }
        let lj = diag.sqrt();
        m[(j, j)] = lj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= m[(i, k)] * m[(j, k)];
            }
            m[(i, j)] = s / lj;
        }
        // forward substitution interleaved with the factorization
        let mut y = d[j];
        for k in 0..j {
            y -= m[(j, k)] * d[k];
        }
        d[j] = y / lj;
    }
    Ok(d.iter().map(|v| v * v).sum())
}

fn coefficient_quadratic(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
    extra: &DMatrix<f64>,
    scratch: &mut EvalScratch,
) -> Result<f64> {
    let q = precomp.q();
    if e_c.len() != q || var_c.nrows() != q || var_c.ncols() != q {
        return Err(FieldMatchError::InvalidArgument(format!(
            "coefficient inputs must be {q}-dimensional"
        )));
    }
    scratch.inner.copy_from(var_c);
    scratch.inner += extra;
    scratch.diff.copy_from(&precomp.c_z);
    scratch.diff -= e_c;
    spd_quadratic_in_place(&mut scratch.inner, &mut scratch.diff)
}

/// Coefficient implausibility `(c_z - e_c)^T (var_c + Psi^{-1})^{-1}
/// (c_z - e_c)` using the simplification `Var[c(e)] + Var[c(eta)] = Psi^{-1}`
/// that holds when the projection norm is the total error variance.
pub fn coefficient_implausibility_scratch(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
    scratch: &mut EvalScratch,
) -> Result<f64> {
    if !precomp.decomposition_valid {
        return Err(FieldMatchError::NormMismatch);
    }
    coefficient_quadratic(precomp, e_c, var_c, &precomp.psi_inv, scratch)
}

pub fn coefficient_implausibility(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
) -> Result<f64> {
    let mut scratch = EvalScratch::new(precomp.q());
    coefficient_implausibility_scratch(precomp, e_c, var_c, &mut scratch)
}

/// Coefficient implausibility with the explicitly projected error variances
/// `(c_z - e_c)^T (var_c + var_c_e + var_c_eta)^{-1} (c_z - e_c)`. Valid for
/// any projection norm; used for the norm-comparison experiments.
pub fn coefficient_implausibility_general(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
) -> Result<f64> {
    let mut scratch = EvalScratch::new(precomp.q());
    let extra = &precomp.var_c_e + &precomp.var_c_eta;
    coefficient_quadratic(precomp, e_c, var_c, &extra, &mut scratch)
}

/// Result of a decomposed implausibility evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ImplausibilityResult {
    pub value: f64,
    /// `value < threshold_t` (strict).
    pub nroy: bool,
    /// `(r_w, coefficient part)`.
    pub components: (f64, f64),
}

/// Fast-exact field implausibility `r_w + I~_W(x)`; equals the direct path to
/// numerical tolerance. Refuses to run when the precomputation's projection
/// norm is not the total error variance, because the equality fails there.
pub fn fast_field_implausibility_scratch(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
    scratch: &mut EvalScratch,
) -> Result<ImplausibilityResult> {
    let coeff = coefficient_implausibility_scratch(precomp, e_c, var_c, scratch)?;
    let value = precomp.r_w + coeff;
    Ok(ImplausibilityResult {
        value,
        nroy: value < precomp.threshold_t,
        components: (precomp.r_w, coeff),
    })
}

pub fn fast_field_implausibility(
    precomp: &MatchPrecomp,
    e_c: &DVector<f64>,
    var_c: &DMatrix<f64>,
) -> Result<ImplausibilityResult> {
    let mut scratch = EvalScratch::new(precomp.q());
    fast_field_implausibility_scratch(precomp, e_c, var_c, &mut scratch)
}

/// Fold the truncated directions into the discrepancy so the decomposition
/// accounts for discarded basis variance: `W' = sigma_e + sigma_eta +
/// G_rest diag(d_i^2/(n-1)) G_rest^T`.
pub fn augment_w_truncation(
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
    basis: &Basis,
) -> Result<ErrorSpec> {
    if basis.q == basis.rank() {
        return ErrorSpec::combine(
            sigma_e.clone(),
            sigma_eta.clone(),
            &JitterPolicy::default(),
        );
    }
    let n = basis.n_members;
    if n < 2 {
        return Err(FieldMatchError::DegenerateEnsemble);
    }
    let rest = basis.gamma_rest();
    let mut scaled = rest.clone_owned();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let d = basis.singular_values[basis.q + j];
        col *= d * d / (n as f64 - 1.0);
    }
    let extra = &scaled * rest.transpose();
    let extra = (&extra + extra.transpose()) * 0.5;
    ErrorSpec::combine(sigma_e.clone(), sigma_eta + extra, &JitterPolicy::default())
}

/// Apply the Woodbury identity: solve `(A + U C U^T) x = b` using only a
/// factorization of `A` and small-matrix work, as
/// `A^{-1}b - A^{-1}U (C^{-1} + U^T A^{-1} U)^{-1} U^T A^{-1} b`.
pub fn woodbury_solve(
    a: &ErrorSpec,
    u: &DMatrix<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let q = u.ncols();
    if c.nrows() != q || c.ncols() != q || u.nrows() != a.ell() || b.len() != a.ell() {
        return Err(FieldMatchError::InvalidArgument(
            "woodbury operand shapes are inconsistent".into(),
        ));
    }
    let c_inv = c
        .clone()
        .try_inverse()
        .ok_or_else(|| FieldMatchError::InvalidArgument("capacitance core is singular".into()))?;
    let a_inv_u = a.solve_mat(u);
    let a_inv_b = a.solve_vec(b);
    let cap = c_inv + u.transpose() * &a_inv_u;
    let (chol, _, _) = factorize_spd(&((&cap + cap.transpose()) * 0.5), &JitterPolicy::default())?;
    let small = chol.solve(&(u.transpose() * &a_inv_b));
    Ok(a_inv_b - a_inv_u * small)
}

/// Chi-squared quantile: `P(X < bound) = p` for `X ~ chi^2(dof)`, refined by
/// Newton iteration to 1e-10 relative.
pub fn chi_squared_bound(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(FieldMatchError::InvalidArgument(
            "degrees of freedom must be at least 1".into(),
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(FieldMatchError::InvalidArgument(
            "probability must lie in (0, 1)".into(),
        ));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| FieldMatchError::InvalidArgument(e.to_string()))?;
    let mut x = dist.inverse_cdf(p);
    if !x.is_finite() || x <= 0.0 {
        x = dof as f64;
    }
    for _ in 0..100 {
        let f = dist.cdf(x) - p;
        let d = dist.pdf(x);
        if d <= 0.0 {
            break;
        }
        let step = f / d;
        let next = (x - step).max(x * 1e-3);
        if (next - x).abs() <= 1e-12 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Strict NROY classification: kept iff `value < threshold_t`.
pub fn nroy_classify(values: &[f64], threshold_t: f64) -> (Vec<bool>, f64) {
    let mask: Vec<bool> = values.iter().map(|&v| v < threshold_t).collect();
    let fraction = if mask.is_empty() {
        0.0
    } else {
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    };
    (mask, fraction)
}
