//! Gaussian-process emulators for scalar outputs.
//!
//! One emulator per basis coefficient (basis approaches) or per grid box
//! (univariate approach). Correlation is squared exponential with a
//! per-dimension lengthscale; hyperparameters maximize the profile log
//! marginal likelihood (process variance and trend profiled analytically)
//! over a multi-start Nelder-Mead search on bounded log-lengthscales.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::basis::{Basis, Ensemble, WeightedProjector};
use crate::covariance::ErrorSpec;
use crate::error::{FieldMatchError, Result};

/// Trend in the GP mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Constant,
    Linear,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpConfig {
    pub mean_kind: MeanKind,
    /// Relative nugget added to the unit diagonal of the correlation matrix.
    pub nugget: f64,
    /// Per-dimension lengthscale interval; a single entry is broadcast.
    pub lengthscale_bounds: Vec<(f64, f64)>,
    /// Multi-start count for the likelihood optimization.
    pub restarts: usize,
    pub seed: u64,
    /// Fix the process variance instead of profiling it.
    pub process_variance: Option<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            mean_kind: MeanKind::Constant,
            nugget: 1e-8,
            lengthscale_bounds: vec![(0.1, 20.0)],
            restarts: 5,
            seed: 0,
            process_variance: None,
        }
    }
}

impl GpConfig {
    fn bounds_for(&self, p: usize) -> Result<Vec<(f64, f64)>> {
        let bounds = if self.lengthscale_bounds.len() == 1 {
            vec![self.lengthscale_bounds[0]; p]
        } else if self.lengthscale_bounds.len() == p {
            self.lengthscale_bounds.clone()
        } else {
            return Err(FieldMatchError::InvalidArgument(format!(
                "{} lengthscale bounds for {p} input dimensions",
                self.lengthscale_bounds.len()
            )));
        };
        for &(lo, hi) in &bounds {
            if !(lo > 0.0) || hi < lo {
                return Err(FieldMatchError::InvalidArgument(
                    "lengthscale bounds must be positive with hi >= lo".into(),
                ));
            }
        }
        if self.restarts == 0 {
            return Err(FieldMatchError::InvalidArgument("restarts must be >= 1".into()));
        }
        Ok(bounds)
    }
}

/// A fitted Gaussian-process emulator for one scalar output.
#[derive(Debug)]
pub struct GpEmulator {
    pub design: DMatrix<f64>,
    pub observations: DVector<f64>,
    pub mean_kind: MeanKind,
    pub mean_coefficients: DVector<f64>,
    pub lengthscales: DVector<f64>,
    pub process_variance: f64,
    pub nugget: f64,
    corr_chol: Option<Cholesky<f64, Dyn>>,
    /// R^{-1}(y - H beta), cached for prediction.
    weights: DVector<f64>,
    /// Pure fallback: prediction is the trend with full process variance.
    fallback: bool,
    clamp_count: AtomicU64,
}

impl Clone for GpEmulator {
    fn clone(&self) -> Self {
        GpEmulator {
            design: self.design.clone(),
            observations: self.observations.clone(),
            mean_kind: self.mean_kind,
            mean_coefficients: self.mean_coefficients.clone(),
            lengthscales: self.lengthscales.clone(),
            process_variance: self.process_variance,
            nugget: self.nugget,
            corr_chol: self.corr_chol.clone(),
            weights: self.weights.clone(),
            fallback: self.fallback,
            clamp_count: AtomicU64::new(self.clamp_count.load(Ordering::Relaxed)),
        }
    }
}

fn squared_exp(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>, theta: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..theta.len() {
        let d = (a[k] - b[k]) / theta[k];
        s += d * d;
    }
    (-s).exp()
}

fn trend_matrix(design: &DMatrix<f64>, kind: MeanKind) -> DMatrix<f64> {
    let n = design.nrows();
    match kind {
        MeanKind::Constant => DMatrix::from_element(n, 1, 1.0),
        MeanKind::Linear => {
            let p = design.ncols();
            let mut h = DMatrix::zeros(n, p + 1);
            h.column_mut(0).fill(1.0);
            h.columns_mut(1, p).copy_from(design);
            h
        }
    }
}

fn trend_row(x: &DVector<f64>, kind: MeanKind) -> DVector<f64> {
    match kind {
        MeanKind::Constant => DVector::from_element(1, 1.0),
        MeanKind::Linear => {
            let mut h = DVector::zeros(x.len() + 1);
            h[0] = 1.0;
            h.rows_mut(1, x.len()).copy_from(x);
            h
        }
    }
}

fn correlation_matrix(design: &DMatrix<f64>, theta: &DVector<f64>, nugget: f64) -> DMatrix<f64> {
    let n = design.nrows();
    let mut r = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = squared_exp(design.row(i).transpose().as_view(), design.row(j).transpose().as_view(), theta);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
        r[(j, j)] += nugget;
    }
    r
}

struct ProfileFit {
    log_likelihood: f64,
    beta: DVector<f64>,
    sigma2: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

/// Profile log marginal likelihood at fixed lengthscales: the GLS trend and
/// (unless fixed) the process variance drop out analytically.
fn profile_fit(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    theta: &DVector<f64>,
    nugget: f64,
    fixed_sigma2: Option<f64>,
) -> Option<ProfileFit> {
    let n = design.nrows() as f64;
    let r = correlation_matrix(design, theta, nugget);
    let chol = Cholesky::new(r)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let rinv_h = chol.solve(h);
    let hh = h.transpose() * &rinv_h;
    let hh_chol = Cholesky::new(hh)?;
    let rinv_y = chol.solve(y);
    let beta = hh_chol.solve(&(h.transpose() * &rinv_y));
    let resid = y - h * &beta;
    let rinv_resid = chol.solve(&resid);
    let quad = resid.dot(&rinv_resid);
    let (sigma2, ll) = match fixed_sigma2 {
        Some(s2) => {
            let ll = -0.5 * (quad / s2 + n * s2.ln() + log_det);
            (s2, ll)
        }
        None => {
            let s2 = (quad / n).max(1e-300);
            let ll = -0.5 * (n * s2.ln() + log_det + n);
            (s2, ll)
        }
    };
    if !ll.is_finite() {
        return None;
    }
    Some(ProfileFit { log_likelihood: ll, beta, sigma2, chol, weights: rinv_resid })
}

/// Nelder-Mead minimization; returns the best vertex. Never worse than the
/// starting point.
fn nelder_mead<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    start: &DVector<f64>,
    step: f64,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let dim = start.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.clone(), f(start)));
    for k in 0..dim {
        let mut v = start.clone();
        v[k] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() < 1e-10 {
            break;
        }
        let centroid: DVector<f64> = simplex[..dim]
            .iter()
            .fold(DVector::zeros(dim), |acc, (v, _)| acc + v)
            / dim as f64;
        let worst = simplex[dim].clone();
        let reflected = &centroid + (&centroid - &worst.0) * alpha;
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = &centroid + (&reflected - &centroid) * gamma;
            let fe = f(&expanded);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted = &centroid + (&worst.0 - &centroid) * rho;
            let fc = f(&contracted);
            if fc < worst.1 {
                simplex[dim] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    item.0 = &best + (&item.0 - &best) * sigma;
                    item.1 = f(&item.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Map the unconstrained optimizer variable to lengthscales inside bounds
/// (geometric interpolation between the endpoints).
fn theta_from_u(u: &DVector<f64>, bounds: &[(f64, f64)]) -> DVector<f64> {
    DVector::from_fn(u.len(), |k, _| {
        let (lo, hi) = bounds[k];
        if hi <= lo {
            lo
        } else {
            (lo.ln() + (hi.ln() - lo.ln()) * sigmoid(u[k])).exp()
        }
    })
}

/// Fit a Gaussian-process emulator by profile maximum likelihood.
pub fn fit_gp(design: &DMatrix<f64>, y: &DVector<f64>, config: &GpConfig) -> Result<GpEmulator> {
    let n = design.nrows();
    let p = design.ncols();
    if y.len() != n {
        return Err(FieldMatchError::InvalidArgument(format!(
            "{n} design rows but {} observations",
            y.len()
        )));
    }
    let min_n = match config.mean_kind {
        MeanKind::Constant => 2,
        MeanKind::Linear => p + 2,
    };
    if n < min_n {
        return Err(FieldMatchError::InvalidArgument(format!(
            "need at least {min_n} runs for this mean function, got {n}"
        )));
    }
    let bounds = config.bounds_for(p)?;
    let h = trend_matrix(design, config.mean_kind);

    // degenerate signal: residual variance after the trend is numerically
    // zero, so the process variance collapses
    let ols = h.clone().svd(true, true).solve(y, 1e-12).map_err(|e| {
        FieldMatchError::FitFailure(format!("trend least squares failed: {e}"))
    })?;
    let trend_resid = y - &h * &ols;
    let y_scale = y.amax().max(1.0);
    if trend_resid.amax() < 1e-12 * y_scale {
        let mid = DVector::from_fn(p, |k, _| (bounds[k].0 * bounds[k].1).sqrt());
        return Ok(GpEmulator {
            design: design.clone(),
            observations: y.clone(),
            mean_kind: config.mean_kind,
            mean_coefficients: ols,
            lengthscales: mid,
            process_variance: config.process_variance.unwrap_or(0.0),
            nugget: config.nugget,
            corr_chol: None,
            weights: DVector::zeros(n),
            fallback: true,
            clamp_count: AtomicU64::new(0),
        });
    }

    let fixed = bounds.iter().all(|&(lo, hi)| hi <= lo * (1.0 + 1e-12));
    let objective = |u: &DVector<f64>| -> f64 {
        let theta = theta_from_u(u, &bounds);
        match profile_fit(design, y, &h, &theta, config.nugget, config.process_variance) {
            Some(fit) => -fit.log_likelihood,
            None => f64::INFINITY,
        }
    };

    let best_u = if fixed {
        DVector::zeros(p)
    } else {
        // multi-start: Latin hypercube over the (logit-transformed) bounds
        let starts = crate::sampling::lhs_sample(p, config.restarts, config.seed)
            .expect("restart count and dimension already validated");
        let mut candidates: Vec<DVector<f64>> = (0..config.restarts)
            .map(|i| {
                DVector::from_fn(p, |k, _| logit((starts[(i, k)] + 1.0) / 2.0))
            })
            .collect();
        candidates.push(DVector::zeros(p));
        let mut best: Option<(DVector<f64>, f64)> = None;
        for start in &candidates {
            let mut obj = objective;
            let f0 = obj(start);
            if !f0.is_finite() {
                continue;
            }
            let (u, fu) = nelder_mead(&mut obj, start, 0.5, 200 * p.max(1));
            if best.as_ref().map_or(true, |(_, b)| fu < *b) {
                best = Some((u, fu));
            }
        }
        best.ok_or(FieldMatchError::SingularCorrelation { index: None })?.0
    };

    let theta = theta_from_u(&best_u, &bounds);
    let fit = profile_fit(design, y, &h, &theta, config.nugget, config.process_variance)
        .ok_or(FieldMatchError::SingularCorrelation { index: None })?;
    if !fit.log_likelihood.is_finite() || !fit.sigma2.is_finite() {
        return Err(FieldMatchError::FitFailure(format!(
            "non-finite objective at lengthscales {:?}",
            theta.as_slice()
        )));
    }
    Ok(GpEmulator {
        design: design.clone(),
        observations: y.clone(),
        mean_kind: config.mean_kind,
        mean_coefficients: fit.beta,
        lengthscales: theta,
        process_variance: fit.sigma2,
        nugget: config.nugget,
        corr_chol: Some(fit.chol),
        weights: fit.weights,
        fallback: false,
        clamp_count: AtomicU64::new(0),
    })
}

impl GpEmulator {
    /// Predictive mean and variance at `x`. Negative variances arising from
    /// rounding are clamped to zero and counted.
    pub fn predict(&self, x: &DVector<f64>) -> (f64, f64) {
        let h = trend_row(x, self.mean_kind);
        let trend = h.dot(&self.mean_coefficients);
        if self.fallback {
            return (trend, self.process_variance);
        }
        let n = self.design.nrows();
        let r = DVector::from_fn(n, |i, _| {
            squared_exp(
                self.design.row(i).transpose().as_view(),
                x.as_view(),
                &self.lengthscales,
            )
        });
        let mean = trend + r.dot(&self.weights);
        let chol = self.corr_chol.as_ref().expect("non-fallback emulator has a factor");
        let rinv_r = chol.solve(&r);
        let mut var = self.process_variance * (1.0 - r.dot(&rinv_r));
        if var < 0.0 {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
            var = 0.0;
        }
        (mean, var)
    }

    /// Profile log likelihood at the fitted hyperparameters (for diagnostics).
    pub fn log_likelihood(&self) -> Option<f64> {
        let h = trend_matrix(&self.design, self.mean_kind);
        profile_fit(
            &self.design,
            &self.observations,
            &h,
            &self.lengthscales,
            self.nugget,
            None,
        )
        .map(|f| f.log_likelihood)
    }

    pub fn variance_clamps(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    /// Constant-mean, full-variance emulator used when a fit fails.
    fn fallback_for(design: &DMatrix<f64>, y: &DVector<f64>) -> GpEmulator {
        let n = y.len();
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        GpEmulator {
            design: design.clone(),
            observations: y.clone(),
            mean_kind: MeanKind::Constant,
            mean_coefficients: DVector::from_element(1, mean),
            lengthscales: DVector::from_element(design.ncols(), 1.0),
            process_variance: var,
            nugget: 1.0,
            corr_chol: None,
            weights: DVector::zeros(n),
            fallback: true,
            clamp_count: AtomicU64::new(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Coefficient,
    GridBox,
}

/// An ordered collection of emulators sharing one design.
pub struct EmulatorBank {
    pub emulators: Vec<GpEmulator>,
    pub kind: BankKind,
    /// Indices that fell back to the constant-mean emulator.
    pub failed_indices: Vec<usize>,
}

impl EmulatorBank {
    pub fn len(&self) -> usize {
        self.emulators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emulators.is_empty()
    }
}

/// Fit one emulator per retained basis coefficient.
pub fn fit_coefficient_emulators(
    ensemble: &Ensemble,
    basis: &Basis,
    weight: &ErrorSpec,
    config: &GpConfig,
) -> Result<EmulatorBank> {
    let projector = WeightedProjector::new(basis, weight)?;
    let n = ensemble.n_members();
    let q = basis.q;
    // coefficient series: one row per basis vector
    let mut coeffs = DMatrix::zeros(q, n);
    for j in 0..n {
        let cj = projector.project(&ensemble.f_centered.column(j).into_owned());
        coeffs.set_column(j, &cj);
    }
    let results: Vec<Result<GpEmulator>> = (0..q)
        .into_par_iter()
        .map(|i| {
            let y = coeffs.row(i).transpose();
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(i as u64);
            fit_gp(&ensemble.design_x, &y, &cfg).map_err(|e| match e {
                FieldMatchError::SingularCorrelation { .. } => {
                    FieldMatchError::SingularCorrelation { index: Some(i) }
                }
                FieldMatchError::FitFailure(msg) => {
                    FieldMatchError::FitFailure(format!("coefficient {i}: {msg}"))
                }
                other => other,
            })
        })
        .collect();
    let mut emulators = Vec::with_capacity(q);
    for r in results {
        emulators.push(r?);
    }
    Ok(EmulatorBank { emulators, kind: BankKind::Coefficient, failed_indices: vec![] })
}

/// Fit one emulator per grid box; failures fall back rather than abort.
pub fn fit_univariate_emulators(ensemble: &Ensemble, config: &GpConfig) -> Result<EmulatorBank> {
    let ell = ensemble.ell();
    let fitted: Vec<GpEmulator> = (0..ell)
        .into_par_iter()
        .map(|i| {
            let y = ensemble.f.row(i).transpose();
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(i as u64);
            fit_gp(&ensemble.design_x, &y, &cfg)
                .unwrap_or_else(|_| GpEmulator::fallback_for(&ensemble.design_x, &y))
        })
        .collect();
    let failed_indices = fitted
        .iter()
        .enumerate()
        .filter(|(_, em)| em.is_fallback() && em.nugget == 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok(EmulatorBank { emulators: fitted, kind: BankKind::GridBox, failed_indices })
}

/// Stacked independent predictions: diagonal coefficient variance.
pub fn predict_coefficients(bank: &EmulatorBank, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if bank.kind != BankKind::Coefficient {
        return Err(FieldMatchError::InvalidArgument(
            "predict_coefficients needs a coefficient bank".into(),
        ));
    }
    let q = bank.len();
    let mut mean = DVector::zeros(q);
    let mut var = DVector::zeros(q);
    for (i, em) in bank.emulators.iter().enumerate() {
        let (m, v) = em.predict(x);
        mean[i] = m;
        var[i] = v;
    }
    Ok((mean, var))
}

/// Low-rank field variance `G_q diag(var_c) G_q^T`, kept factored.
pub struct FieldVariance {
    pub gamma_q: DMatrix<f64>,
    pub var_c: DVector<f64>,
}

impl FieldVariance {
    /// Dense form; refused above 512 rows where the factored representation
    /// is the contract.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        let ell = self.gamma_q.nrows();
        if ell > 512 {
            return Err(FieldMatchError::InvalidArgument(format!(
                "refusing to densify a {ell}x{ell} field variance"
            )));
        }
        let scaled = &self.gamma_q * DMatrix::from_diagonal(&self.var_c);
        Ok(scaled * self.gamma_q.transpose())
    }
}

/// Field-level predictive moments from coefficient predictions.
pub fn field_moments(
    e_c: &DVector<f64>,
    var_c: &DVector<f64>,
    basis: &Basis,
    add_mean: bool,
) -> Result<(DVector<f64>, FieldVariance)> {
    if e_c.len() != basis.q || var_c.len() != basis.q {
        return Err(FieldMatchError::InvalidArgument(format!(
            "prediction length {} does not match q = {}",
            e_c.len(),
            basis.q
        )));
    }
    let mut e_f = basis.gamma_q() * e_c;
    if add_mean {
        e_f += &basis.mu;
    }
    let var = FieldVariance { gamma_q: basis.gamma_q().into_owned(), var_c: var_c.clone() };
    Ok((e_f, var))
}

/// Emulator comparison statistics over design and validation runs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    /// Median of `||f - E[f]||_W / ell` over the design runs.
    pub design_median_error: f64,
    /// Median over the held-out validation runs.
    pub validation_median_error: f64,
    /// Per-emulator fraction of standardized validation residuals within
    /// the 2-sigma band.
    pub coverage: Vec<f64>,
    pub n_design: usize,
    pub n_validation: usize,
    pub failed_fits: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn predicted_field(
    bank: &EmulatorBank,
    basis: Option<&Basis>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    match bank.kind {
        BankKind::Coefficient => {
            let basis = basis.ok_or_else(|| {
                FieldMatchError::InvalidArgument("coefficient bank needs a basis".into())
            })?;
            let (e_c, var_c) = predict_coefficients(bank, x)?;
            let (e_f, _) = field_moments(&e_c, &var_c, basis, true)?;
            Ok(e_f)
        }
        BankKind::GridBox => {
            let mut f = DVector::zeros(bank.len());
            for (i, em) in bank.emulators.iter().enumerate() {
                f[i] = em.predict(x).0;
            }
            Ok(f)
        }
    }
}

/// Weighted prediction errors and residual coverage over design and
/// validation sets.
pub fn validate_emulators(
    bank: &EmulatorBank,
    basis: Option<&Basis>,
    ensemble: &Ensemble,
    validation_x: &DMatrix<f64>,
    validation_f: &DMatrix<f64>,
    weight: &ErrorSpec,
) -> Result<ValidationReport> {
    let ell = ensemble.ell();
    if validation_f.nrows() != ell || validation_f.ncols() != validation_x.nrows() {
        return Err(FieldMatchError::InvalidArgument(format!(
            "validation shapes {}x{} and {} runs do not match field size {ell}",
            validation_f.nrows(),
            validation_f.ncols(),
            validation_x.nrows()
        )));
    }
    let norm_err = |truth: &DVector<f64>, pred: &DVector<f64>| -> f64 {
        weight.weighted_sq_norm(&(truth - pred)) / ell as f64
    };
    let design_errors: Vec<f64> = (0..ensemble.n_members())
        .map(|j| {
            let x = ensemble.design_x.row(j).transpose();
            let pred = predicted_field(bank, basis, &x)?;
            Ok(norm_err(&ensemble.f.column(j).into_owned(), &pred))
        })
        .collect::<Result<_>>()?;
    let validation_errors: Vec<f64> = (0..validation_x.nrows())
        .map(|j| {
            let x = validation_x.row(j).transpose();
            let pred = predicted_field(bank, basis, &x)?;
            Ok(norm_err(&validation_f.column(j).into_owned(), &pred))
        })
        .collect::<Result<_>>()?;

    // standardized residual coverage at the 2-sigma band, per emulator
    let m = validation_x.nrows();
    let coverage = match bank.kind {
        BankKind::Coefficient => {
            let basis = basis.expect("checked above for coefficient banks");
            let projector = WeightedProjector::new(basis, weight)?;
            let mut hits = vec![0usize; bank.len()];
            for j in 0..m {
                let x = validation_x.row(j).transpose();
                let truth_c = projector.project(&(validation_f.column(j) - &basis.mu));
                let (e_c, var_c) = predict_coefficients(bank, &x)?;
                for i in 0..bank.len() {
                    let sd = (var_c[i].max(0.0)).sqrt().max(1e-12);
                    if ((truth_c[i] - e_c[i]) / sd).abs() <= 2.0 {
                        hits[i] += 1;
                    }
                }
            }
            hits.iter().map(|&h| h as f64 / m.max(1) as f64).collect()
        }
        BankKind::GridBox => {
            let mut hits = vec![0usize; bank.len()];
            for j in 0..m {
                let x = validation_x.row(j).transpose();
                for (i, em) in bank.emulators.iter().enumerate() {
                    let (mean, var) = em.predict(&x);
                    let sd = var.max(0.0).sqrt().max(1e-12);
                    if ((validation_f[(i, j)] - mean) / sd).abs() <= 2.0 {
                        hits[i] += 1;
                    }
                }
            }
            hits.iter().map(|&h| h as f64 / m.max(1) as f64).collect()
        }
    };

    Ok(ValidationReport {
        design_median_error: median(design_errors),
        validation_median_error: median(validation_errors),
        coverage,
        n_design: ensemble.n_members(),
        n_validation: m,
        failed_fits: bank.failed_indices.len(),
    })
}
