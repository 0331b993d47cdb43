//! Ensemble centering, SVD basis construction, weighted projection and
//! reconstruction diagnostics.
//!
//! Projection onto a truncated basis is weighted least squares in the norm
//! induced by `W`: `c = (G^T W^{-1} G)^{-1} G^T W^{-1} f`. All solves go
//! through the stored factorization of `W`; no explicit inverses.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn};

use crate::covariance::ErrorSpec;
use crate::error::{FieldMatchError, Result};

/// Relative singular-value cutoff: centered ensembles have rank at most
/// n-1 and numerical noise must not create spurious directions.
pub const RANK_CUTOFF: f64 = 1e-10;

/// An ensemble of simulator runs with its centered form.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// n x p design inputs in [-1, 1]^p.
    pub design_x: DMatrix<f64>,
    /// ell x n output fields, one run per column.
    pub f: DMatrix<f64>,
    /// Ensemble mean, length ell.
    pub mu: DVector<f64>,
    /// Centered fields: f minus mu from every column.
    pub f_centered: DMatrix<f64>,
}

impl Ensemble {
    pub fn n_members(&self) -> usize {
        self.f.ncols()
    }

    pub fn ell(&self) -> usize {
        self.f.nrows()
    }
}

/// Subtract the ensemble mean from every column of `f`.
pub fn center_ensemble(f: DMatrix<f64>, design_x: DMatrix<f64>) -> Result<Ensemble> {
    let n = f.ncols();
    if n < 2 {
        return Err(FieldMatchError::InvalidArgument(format!(
            "ensemble needs at least 2 members, got {n}"
        )));
    }
    if design_x.nrows() != n {
        return Err(FieldMatchError::InvalidArgument(format!(
            "design has {} rows but ensemble has {n} members",
            design_x.nrows()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) || design_x.iter().any(|v| !v.is_finite()) {
        return Err(FieldMatchError::InvalidArgument(
            "non-finite entries in ensemble or design".into(),
        ));
    }
    let mu = f.column_mean();
    let mut f_centered = f.clone();
    for mut col in f_centered.column_iter_mut() {
        col -= &mu;
    }
    Ok(Ensemble { design_x, f, mu, f_centered })
}

/// Basis for a field: retained vectors are the first `q` columns of `gamma`.
#[derive(Debug, Clone)]
pub struct Basis {
    /// ell x r basis vectors, ordered by descending singular value.
    pub gamma: DMatrix<f64>,
    /// Singular values of the centered ensemble, descending, length r.
    pub singular_values: DVector<f64>,
    /// Centering mean.
    pub mu: DVector<f64>,
    /// Retained vector count, 1 <= q <= r.
    pub q: usize,
    /// Cumulative fraction of ensemble variance explained by the first k vectors.
    pub variance_explained: Vec<f64>,
    /// Ensemble size the basis was computed from.
    pub n_members: usize,
}

impl Basis {
    pub fn rank(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn ell(&self) -> usize {
        self.gamma.nrows()
    }

    /// The retained basis vectors.
    pub fn gamma_q(&self) -> DMatrixView<'_, f64> {
        self.gamma.columns(0, self.q)
    }

    /// The discarded basis vectors.
    pub fn gamma_rest(&self) -> DMatrixView<'_, f64> {
        self.gamma.columns(self.q, self.rank() - self.q)
    }

    /// Copy with a different retained count.
    pub fn with_q(&self, q: usize) -> Result<Basis> {
        if q == 0 || q > self.rank() {
            return Err(FieldMatchError::InvalidArgument(format!(
                "q = {q} outside [1, {}]",
                self.rank()
            )));
        }
        let mut b = self.clone();
        b.q = q;
        Ok(b)
    }
}

/// Fix each column's sign so its entry of largest magnitude is positive.
pub(crate) fn canonical_signs(gamma: &mut DMatrix<f64>) {
    for mut col in gamma.column_iter_mut() {
        let mut idx = 0;
        let mut best = 0.0f64;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Cumulative variance fractions from singular values.
pub(crate) fn cumulative_variance(singular_values: &DVector<f64>) -> Vec<f64> {
    let total: f64 = singular_values.iter().map(|d| d * d).sum();
    let mut acc = 0.0;
    singular_values
        .iter()
        .map(|d| {
            acc += d * d;
            acc / total
        })
        .collect()
}

/// Right singular vectors of the transposed centered ensemble
/// (`F_mu^T = U D Gamma^T`), with rank decided by `RANK_CUTOFF`.
pub fn svd_basis(ensemble: &Ensemble) -> Result<Basis> {
    let scale = ensemble.f_centered.amax();
    if scale == 0.0 {
        return Err(FieldMatchError::DegenerateEnsemble);
    }
    let svd = ensemble.f_centered.transpose().svd(false, true);
    let v_t = svd.v_t.expect("svd with v requested");
    let sv = &svd.singular_values;
    let max_sv = sv.max();
    let r = sv.iter().filter(|&&d| d > RANK_CUTOFF * max_sv).count();
    if r == 0 {
        return Err(FieldMatchError::DegenerateEnsemble);
    }
    let mut gamma = v_t.rows(0, r).transpose();
    canonical_signs(&mut gamma);
    let singular_values = DVector::from_iterator(r, sv.iter().take(r).copied());
    let variance_explained = cumulative_variance(&singular_values);
    Ok(Basis {
        gamma,
        singular_values,
        mu: ensemble.mu.clone(),
        q: r,
        variance_explained,
        n_members: ensemble.n_members(),
    })
}

/// Truncate at the smallest k whose cumulative variance meets `threshold`.
pub fn truncate_basis(basis: &Basis, threshold: f64) -> Result<Basis> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FieldMatchError::InvalidArgument(format!(
            "truncation threshold {threshold} outside (0, 1]"
        )));
    }
    let q = basis
        .variance_explained
        .iter()
        .position(|&v| v >= threshold)
        .map(|k| k + 1)
        .unwrap_or(basis.rank());
    basis.with_q(q)
}

/// Cached weighted-projection operator for one (basis, weight) pair.
///
/// Holds `A = W^{-1} G_q` and the factorization of `Psi = G_q^T W^{-1} G_q`
/// so repeated projections cost only matrix-vector work.
pub struct WeightedProjector {
    pub w_inv_gamma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    psi_chol: Cholesky<f64, Dyn>,
}

impl WeightedProjector {
    pub fn new(basis: &Basis, weight: &ErrorSpec) -> Result<Self> {
        Self::for_columns(&basis.gamma_q().into_owned(), weight)
    }

    /// Projector for an arbitrary set of basis columns.
    pub fn for_columns(gamma_q: &DMatrix<f64>, weight: &ErrorSpec) -> Result<Self> {
        if gamma_q.nrows() != weight.ell() {
            return Err(FieldMatchError::InvalidArgument(format!(
                "basis has {} rows but weight is {}x{}",
                gamma_q.nrows(),
                weight.ell(),
                weight.ell()
            )));
        }
        let w_inv_gamma = weight.solve_mat(gamma_q);
        let psi = gamma_q.transpose() * &w_inv_gamma;
        // symmetrize before factorizing: psi is SPD up to rounding
        let psi = (&psi + psi.transpose()) * 0.5;
        let psi_chol = Cholesky::new(psi.clone()).ok_or_else(|| {
            let eig = nalgebra::SymmetricEigen::new(psi.clone());
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            FieldMatchError::IllConditionedProjection {
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            }
        })?;
        Ok(WeightedProjector { w_inv_gamma, psi, psi_chol })
    }

    pub fn q(&self) -> usize {
        self.psi.nrows()
    }

    /// Weighted least-squares coefficients of a centered field.
    pub fn project(&self, centered_field: &DVector<f64>) -> DVector<f64> {
        let rhs = self.w_inv_gamma.transpose() * centered_field;
        self.psi_chol.solve(&rhs)
    }

    /// Solve `Psi x = b`.
    pub fn psi_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.psi_chol.solve(b)
    }

    pub fn psi_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.psi_chol.solve(b)
    }
}

fn centered(field: &DVector<f64>, mu: &DVector<f64>, center: bool) -> DVector<f64> {
    if center { field - mu } else { field.clone() }
}

/// Project a field onto the retained basis vectors in the weight norm.
///
/// `center` subtracts the ensemble mean first (on by default throughout the
/// pipeline: all basis work is in anomalies from mu).
pub fn project(
    field: &DVector<f64>,
    basis: &Basis,
    weight: &ErrorSpec,
    center: bool,
) -> Result<DVector<f64>> {
    let projector = WeightedProjector::new(basis, weight)?;
    Ok(projector.project(&centered(field, &basis.mu, center)))
}

/// Map coefficients back to the field: `G_q c`, plus mu when requested.
pub fn reconstruct(c: &DVector<f64>, basis: &Basis, add_mean: bool) -> Result<DVector<f64>> {
    if c.len() != basis.q {
        return Err(FieldMatchError::InvalidArgument(format!(
            "coefficient length {} does not match q = {}",
            c.len(),
            basis.q
        )));
    }
    let mut f = basis.gamma_q() * c;
    if add_mean {
        f += &basis.mu;
    }
    Ok(f)
}

/// Squared weighted norm of the part of `z` the retained basis cannot
/// represent: `r^T W^{-1} r` with `r = z - G_q c(z)`.
pub fn reconstruction_error(
    basis: &Basis,
    z: &DVector<f64>,
    weight: &ErrorSpec,
    center: bool,
) -> Result<f64> {
    let zc = centered(z, &basis.mu, center);
    let projector = WeightedProjector::new(basis, weight)?;
    Ok(reconstruction_error_with(&projector, &basis.gamma_q().into_owned(), &zc, weight))
}

/// Reconstruction error using a prebuilt projector; `zc` already centered.
pub fn reconstruction_error_with(
    projector: &WeightedProjector,
    gamma_q: &DMatrix<f64>,
    zc: &DVector<f64>,
    weight: &ErrorSpec,
) -> f64 {
    let c = projector.project(zc);
    let residual = zc - gamma_q * c;
    weight.weighted_sq_norm(&residual)
}

/// One row of the VarMSE diagnostic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VarMseEntry {
    pub k: usize,
    pub variance_explained: f64,
    pub reconstruction_error: f64,
}

/// Reconstruction error and variance explained for every truncation size.
pub fn varmse_curve(
    basis: &Basis,
    z: &DVector<f64>,
    weight: &ErrorSpec,
    center: bool,
) -> Result<Vec<VarMseEntry>> {
    let zc = centered(z, &basis.mu, center);
    let mut out = Vec::with_capacity(basis.rank());
    for k in 1..=basis.rank() {
        let bk = basis.with_q(k)?;
        let r = reconstruction_error(&bk, &zc, weight, false)?;
        out.push(VarMseEntry {
            k,
            variance_explained: basis.variance_explained[k - 1],
            reconstruction_error: r,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{ErrorSpec, JitterPolicy};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(ell: usize, n: usize, p: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(ell, n, |_, _| rng.random_range(-2.0..2.0));
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        center_ensemble(f, x).unwrap()
    }

    fn random_spd(ell: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(ell, ell, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::from_diagonal_element(ell, ell, 0.5 + ell as f64 * 0.1);
        (&m + m.transpose()) * 0.5
    }

    fn spd_weight(ell: usize, rng: &mut ChaCha8Rng) -> ErrorSpec {
        ErrorSpec::combine(random_spd(ell, rng), DMatrix::zeros(ell, ell), &JitterPolicy::default())
            .unwrap()
    }

    #[test]
    fn center_identical_columns() {
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let f = DMatrix::from_columns(&[v.clone(), v.clone()]);
        let e = center_ensemble(f, DMatrix::zeros(2, 1)).unwrap();
        assert_relative_eq!(e.mu, v);
        assert_eq!(e.f_centered.amax(), 0.0);
    }

    #[test]
    fn center_scalar_field() {
        let f = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let e = center_ensemble(f, DMatrix::zeros(2, 1)).unwrap();
        assert_relative_eq!(e.mu[0], 2.0);
        assert_relative_eq!(e.f_centered[(0, 0)], -1.0);
        assert_relative_eq!(e.f_centered[(0, 1)], 1.0);
    }

    #[test]
    fn center_large_ensemble_column_sums() {
        let e = random_ensemble(50, 62, 3, 11);
        let scale = e.f.amax();
        for i in 0..e.ell() {
            let row_sum: f64 = e.f_centered.row(i).iter().sum();
            assert!(row_sum.abs() < 1e-10 * scale * e.n_members() as f64);
        }
    }

    #[test]
    fn center_rejects_bad_input() {
        assert!(center_ensemble(DMatrix::zeros(3, 1), DMatrix::zeros(1, 1)).is_err());
        let mut f = DMatrix::zeros(2, 3);
        f[(0, 0)] = f64::NAN;
        assert!(center_ensemble(f, DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn svd_forced_span() {
        // centered columns span only the first axis
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 3.0, 2.0, 5.0, 5.0, 5.0]);
        let e = center_ensemble(f, DMatrix::zeros(3, 1)).unwrap();
        let b = svd_basis(&e).unwrap();
        assert_eq!(b.rank(), 1);
        assert_relative_eq!(b.gamma[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        assert!(b.gamma[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn svd_full_rank_reconstructs_members() {
        let e = random_ensemble(12, 6, 2, 3);
        let b = svd_basis(&e).unwrap();
        let w = ErrorSpec::identity(12).unwrap();
        for j in 0..e.n_members() {
            let member = e.f.column(j).into_owned();
            let c = project(&member, &b, &w, true).unwrap();
            let back = reconstruct(&c, &b, true).unwrap();
            let rel = (&back - &member).norm() / member.norm().max(1.0);
            assert!(rel < 1e-8, "member {j} relative error {rel}");
        }
    }

    #[test]
    fn svd_orthonormal_columns() {
        let e = random_ensemble(6, 5, 2, 4);
        let b = svd_basis(&e).unwrap();
        let gram = b.gamma.transpose() * &b.gamma;
        let eye = DMatrix::identity(b.rank(), b.rank());
        assert!((gram - eye).amax() < 1e-10);
    }

    #[test]
    fn svd_degenerate_rejected() {
        let f = DMatrix::from_element(4, 3, 2.5);
        let e = center_ensemble(f, DMatrix::zeros(3, 1)).unwrap();
        assert!(matches!(svd_basis(&e), Err(FieldMatchError::DegenerateEnsemble)));
    }

    #[test]
    fn truncate_meets_threshold() {
        let e = random_ensemble(8, 5, 2, 9);
        let mut b = svd_basis(&e).unwrap();
        // force known variance fractions: d^2 proportional to (9, 0.5, 0.5)
        b.singular_values = DVector::from_vec(vec![3.0, 0.5f64.sqrt(), 0.5f64.sqrt()]);
        b.variance_explained = cumulative_variance(&b.singular_values);
        let g = b.gamma.columns(0, 3).into_owned();
        b.gamma = g;
        b.q = 3;
        let t = truncate_basis(&b, 0.9).unwrap();
        assert_eq!(t.q, 1);
        let full = truncate_basis(&b, 1.0).unwrap();
        assert_eq!(full.q, 3);
        assert!(truncate_basis(&b, 0.0).is_err());
        assert!(truncate_basis(&b, 1.5).is_err());
    }

    #[test]
    fn project_orthonormal_identity_weight() {
        let e = random_ensemble(10, 6, 2, 5);
        let b = svd_basis(&e).unwrap();
        let w = ErrorSpec::identity(10).unwrap();
        let field = b.gamma.column(0).into_owned();
        let c = project(&field, &b, &w, false).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-10);
        for i in 1..c.len() {
            assert!(c[i].abs() < 1e-10);
        }
    }

    #[test]
    fn project_matches_dense_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let e = random_ensemble(4, 5, 2, rng.random());
            let b = truncate_basis(&svd_basis(&e).unwrap(), 0.8).unwrap();
            let b = b.with_q(2.min(b.rank())).unwrap();
            let w = spd_weight(4, &mut rng);
            let f = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let c = project(&f, &b, &w, false).unwrap();
            // oracle: explicit inverses
            let w_inv = w.w().clone().try_inverse().unwrap();
            let g = b.gamma_q().into_owned();
            let psi = g.transpose() * &w_inv * &g;
            let oracle = psi.try_inverse().unwrap() * g.transpose() * &w_inv * &f;
            assert!((c - oracle).amax() < 1e-9);
        }
    }

    #[test]
    fn reconstruct_shapes_and_mean() {
        let e = random_ensemble(7, 4, 2, 6);
        let b = svd_basis(&e).unwrap();
        let zero = DVector::zeros(b.q);
        assert_relative_eq!(reconstruct(&zero, &b, true).unwrap(), b.mu);
        let mut unit = DVector::zeros(b.q);
        unit[1] = 1.0;
        let v = reconstruct(&unit, &b, false).unwrap();
        assert_relative_eq!(v, b.gamma.column(1).into_owned());
        assert!(reconstruct(&DVector::zeros(b.q + 1), &b, false).is_err());
    }

    #[test]
    fn reconstruction_error_spanned_field_zero() {
        let e = random_ensemble(9, 5, 2, 8);
        let b = svd_basis(&e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = spd_weight(9, &mut rng);
        let c = DVector::from_fn(b.q, |_, _| rng.random_range(-1.0..1.0));
        let z = reconstruct(&c, &b, false).unwrap();
        let r = reconstruction_error(&b, &z, &w, false).unwrap();
        assert!(r.abs() < 1e-10 * z.norm());
    }

    #[test]
    fn reconstruction_error_pythagoras() {
        // W = I, orthonormal basis, z orthogonal to the span
        let e = random_ensemble(6, 4, 2, 13);
        let b = svd_basis(&e).unwrap().with_q(2).unwrap();
        let w = ErrorSpec::identity(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        // remove span component against all basis columns (orthonormal in L2)
        let g = b.gamma_q().into_owned();
        z -= &g * (g.transpose() * &z);
        let r = reconstruction_error(&b, &z, &w, false).unwrap();
        assert_relative_eq!(r, z.dot(&z), epsilon = 1e-10);
    }

    #[test]
    fn reconstruction_error_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let e = random_ensemble(4, 5, 2, rng.random());
            let b = svd_basis(&e).unwrap().with_q(1).unwrap();
            let w = spd_weight(4, &mut rng);
            let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let r = reconstruction_error(&b, &z, &w, false).unwrap();
            let w_inv = w.w().clone().try_inverse().unwrap();
            let g = b.gamma_q().into_owned();
            let psi = g.transpose() * &w_inv * &g;
            let c = psi.try_inverse().unwrap() * g.transpose() * &w_inv * &z;
            let resid = &z - &g * c;
            let oracle = (resid.transpose() * &w_inv * &resid)[(0, 0)];
            assert_relative_eq!(r, oracle, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn varmse_monotone_and_matches_per_k_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let e = random_ensemble(10, 6, 2, 17);
        let b = svd_basis(&e).unwrap();
        let w = spd_weight(10, &mut rng);
        let z = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let curve = varmse_curve(&b, &z, &w, false).unwrap();
        assert_eq!(curve.len(), b.rank());
        for pair in curve.windows(2) {
            assert!(pair[1].reconstruction_error <= pair[0].reconstruction_error + 1e-10);
            assert!(pair[1].variance_explained >= pair[0].variance_explained);
        }
        // loop-of-single-calls oracle
        for entry in &curve {
            let bk = b.with_q(entry.k).unwrap();
            let r = reconstruction_error(&bk, &z, &w, false).unwrap();
            assert_relative_eq!(entry.reconstruction_error, r, max_relative = 1e-10);
        }
        assert_relative_eq!(curve.last().unwrap().variance_explained, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn varmse_full_rank_spanned_z_ends_at_zero() {
        let e = random_ensemble(8, 6, 2, 19);
        let b = svd_basis(&e).unwrap();
        let w = ErrorSpec::identity(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = DVector::from_fn(b.rank(), |_, _| rng.random_range(-1.0..1.0));
        let z = &b.gamma * &c;
        let curve = varmse_curve(&b, &z, &w, false).unwrap();
        assert!(curve.last().unwrap().reconstruction_error < 1e-9 * z.norm());
    }

    #[test]
    fn projection_scale_invariant_in_w() {
        // W = c I gives the same coefficients as W = I
        let e = random_ensemble(7, 5, 2, 23);
        let b = svd_basis(&e).unwrap().with_q(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let c1 = project(&z, &b, &ErrorSpec::identity(7).unwrap(), false).unwrap();
        let c2 = project(&z, &b, &ErrorSpec::scaled_identity(7, 3.7).unwrap(), false).unwrap();
        assert!((c1 - c2).amax() < 1e-10);
    }

    #[test]
    fn projection_minimizes_weighted_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..5 {
            let e = random_ensemble(6, 5, 2, rng.random());
            let b = svd_basis(&e).unwrap().with_q(2).unwrap();
            let w = spd_weight(6, &mut rng);
            let z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let c = project(&z, &b, &w, false).unwrap();
            let g = b.gamma_q().into_owned();
            let best = w.weighted_sq_norm(&(&z - &g * &c));
            for _ in 0..100 {
                let delta = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
                let perturbed = w.weighted_sq_norm(&(&z - &g * (&c + delta)));
                assert!(perturbed + 1e-12 >= best);
            }
        }
    }

    #[test]
    fn reconstruction_error_span_invariant() {
        // replacing G_q by G_q M for invertible M leaves R_W unchanged
        let e = random_ensemble(8, 5, 2, 61);
        let b = svd_basis(&e).unwrap().with_q(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = spd_weight(8, &mut rng);
        let z = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let r1 = reconstruction_error(&b, &z, &w, false).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.2, 0.9]);
        let mut b2 = b.clone();
        let mixed = b.gamma_q() * &m;
        b2.gamma.columns_mut(0, 2).copy_from(&mixed);
        let r2 = reconstruction_error(&b2, &z, &w, false).unwrap();
        assert_relative_eq!(r1, r2, max_relative = 1e-8);
    }
}
