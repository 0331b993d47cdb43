//! Single-wave history matching driver: synthetic experiment generation,
//! sampling, per-candidate implausibility evaluation, NROY classification,
//! summary statistics, and the naive-vs-decomposed timing benchmark.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    center_ensemble, svd_basis, truncate_basis, Basis, Ensemble, WeightedProjector,
};
use crate::covariance::{ErrorSpec, Grid, JitterPolicy};
use crate::error::{FieldMatchError, Result};
use crate::gp::{fit_coefficient_emulators, predict_coefficients, EmulatorBank, GpConfig};
use crate::implausibility::{
    augment_w_truncation, chi_squared_bound, fast_field_implausibility_scratch,
    make_precomp_with_weight, nroy_classify, EvalScratch, MatchPrecomp,
};
use crate::rotation::{rotate_basis, RotationConfig};
use crate::sampling::lhs_sample;

/// Which basis the wave projects onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Svd,
    Rotated,
}

/// Degrees of freedom used for the chi-squared NROY threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// dof = field length.
    Chi2Field,
    /// dof = number of retained basis vectors (the default).
    Chi2Coeff,
}

/// Configuration for one history-matching wave.
#[derive(Debug, Clone)]
pub struct WaveConfig {
    pub input_dim: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub basis_kind: BasisKind,
    pub truncation_threshold: f64,
    pub rotation: RotationConfig,
    pub gp: GpConfig,
    pub threshold_kind: ThresholdKind,
    /// Coverage probability of the chi-squared bound.
    pub probability: f64,
    /// Extra candidate rows appended after the LHS sample (e.g. a known x*).
    pub include_points: Option<DMatrix<f64>>,
}

impl Default for WaveConfig {
    fn default() -> Self {
        WaveConfig {
            input_dim: 2,
            sample_count: 1000,
            seed: 0,
            basis_kind: BasisKind::Svd,
            truncation_threshold: 0.90,
            rotation: RotationConfig::default(),
            gp: GpConfig::default(),
            threshold_kind: ThresholdKind::Chi2Coeff,
            probability: 0.995,
            include_points: None,
        }
    }
}

/// Wall-clock breakdown of a wave.
#[derive(Debug, Clone, Default, Serialize)]
pub struct WaveTiming {
    pub basis_s: f64,
    pub emulate_s: f64,
    pub precomp_s: f64,
    pub evaluate_s: f64,
}

/// Error summaries over the NROY samples: mean of `||z - E[f(x)]||_W / ell`
/// (squared weighted norm, per the reconstruction-error convention),
/// unweighted and weighted by `exp(-I(x))` as a rough likelihood proxy.
#[derive(Debug, Clone, Serialize)]
pub struct NroySummary {
    pub n_nroy: usize,
    pub unweighted_mean_error: f64,
    pub weighted_mean_error: f64,
}

/// Outcome of one wave.
#[derive(Debug, Clone)]
pub struct WaveResult {
    pub nroy_fraction: f64,
    pub implausibilities: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
    /// Evaluated candidate inputs, one row per sample (LHS rows first, then
    /// any included points).
    pub samples: DMatrix<f64>,
    /// None when NROY is empty (an empty-space signal, not an error).
    pub summary: Option<NroySummary>,
    pub timing: WaveTiming,
    pub basis_q: usize,
}

/// Synthetic stand-in for a deterministic simulator: fixed smooth spatial
/// modes with input-dependent amplitudes.
#[derive(Debug, Clone)]
pub struct SynthSimulator {
    /// `ell x m` spatial modes.
    pub modes: DMatrix<f64>,
    /// `m x p` amplitude frequencies.
    pub freq: DMatrix<f64>,
    /// per-mode phases.
    pub phase: DVector<f64>,
    /// constant background field.
    pub offset: f64,
}

impl SynthSimulator {
    /// Evaluate the field at input `x`.
    pub fn run(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.modes.ncols();
        let mut amps = DVector::zeros(m);
        for k in 0..m {
            let arg = self.freq.row(k).transpose().dot(x) + self.phase[k];
            amps[k] = arg.sin();
        }
        &self.modes * amps + DVector::from_element(self.modes.nrows(), self.offset)
    }
}

/// A generated synthetic experiment: ensemble at an LHS design, observations
/// from a held-out true input, and the simulator itself.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub ensemble: Ensemble,
    /// Raw (uncentered) observations.
    pub z: DVector<f64>,
    pub true_x: DVector<f64>,
    pub simulator: SynthSimulator,
}

/// Generate a synthetic history-matching experiment on `grid`: `n` ensemble
/// members in `p` input dimensions, observations from a held-out input so a
/// matching x* exists and a zero discrepancy is honest.
pub fn synth_experiment(grid: &Grid, n: usize, p: usize, seed: u64) -> Result<SynthData> {
    if n < 3 || p == 0 {
        return Err(FieldMatchError::InvalidArgument(
            "synthetic experiment needs n >= 3 members and p >= 1 inputs".into(),
        ));
    }
    let ell = grid.ell();
    let m = 8.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // smooth spatial modes: low-wavenumber harmonics of the grid coordinates
    let modes = DMatrix::from_fn(ell, m, |i, k| {
        let lon = grid.lon_of(i).to_radians();
        let lat = grid.lat_of(i).to_radians();
        let k_lon = (k % 3 + 1) as f64;
        let k_lat = (k / 3 + 1) as f64;
        (k_lon * lon + 0.3 * k as f64).sin() * (k_lat * lat).cos()
    });
    let freq = DMatrix::from_fn(m, p, |_, _| rng.random_range(0.5..1.5f64));
    let phase = DVector::from_fn(m, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
    let simulator = SynthSimulator { modes, freq, phase, offset: 2.0 };
    let design = lhs_sample(p, n, seed.wrapping_add(1))?;
    let f = {
        let mut f = DMatrix::zeros(ell, n);
        for j in 0..n {
            f.set_column(j, &simulator.run(&design.row(j).transpose()));
        }
        f
    };
    let true_x = DVector::from_fn(p, |_, _| rng.random_range(-0.9..0.9f64));
    let z = simulator.run(&true_x);
    let ensemble = center_ensemble(f, design)?;
    Ok(SynthData { ensemble, z, true_x, simulator })
}

fn build_basis(
    config: &WaveConfig,
    ensemble: &Ensemble,
    z_centered: &DVector<f64>,
    weight: &ErrorSpec,
) -> Result<Basis> {
    match config.basis_kind {
        BasisKind::Svd => truncate_basis(&svd_basis(ensemble)?, config.truncation_threshold),
        BasisKind::Rotated => {
            let rot = RotationConfig {
                truncation_threshold: config.truncation_threshold,
                ..config.rotation
            };
            rotate_basis(ensemble, z_centered, weight, &rot)
        }
    }
}

/// Run one history-matching wave. `z` is the raw observation field; `sigma_e`
/// and `sigma_eta` define the projection norm `W = sigma_e + sigma_eta`.
pub fn run_wave(
    config: &WaveConfig,
    ensemble: &Ensemble,
    z: &DVector<f64>,
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
) -> Result<WaveResult> {
    if config.sample_count == 0 || config.input_dim == 0 {
        return Err(FieldMatchError::InvalidArgument(
            "sample_count and input_dim must be at least 1".into(),
        ));
    }
    if config.input_dim != ensemble.design_x.ncols() {
        return Err(FieldMatchError::InvalidArgument(format!(
            "config input_dim {} does not match design width {}",
            config.input_dim,
            ensemble.design_x.ncols()
        )));
    }
    let weight = ErrorSpec::combine(sigma_e.clone(), sigma_eta.clone(), &JitterPolicy::default())?;
    let zc = z - &ensemble.mu;

    let t0 = Instant::now();
    let basis = build_basis(config, ensemble, &zc, &weight)?;
    let basis_s = t0.elapsed().as_secs_f64();

    let dof = match config.threshold_kind {
        ThresholdKind::Chi2Field => basis.ell(),
        ThresholdKind::Chi2Coeff => basis.q,
    };
    let threshold = chi_squared_bound(dof, config.probability)?;

    // Fold the discarded-direction variance into the norm so observations the
    // full ensemble span can represent are not penalized for truncation.
    let weight = augment_w_truncation(sigma_e, sigma_eta, &basis)?;

    let t1 = Instant::now();
    let bank = fit_coefficient_emulators(ensemble, &basis, &weight, &config.gp)?;
    let emulate_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let precomp =
        make_precomp_with_weight(&basis, &zc, &weight, &weight.sigma_e, &weight.sigma_eta, threshold)?;
    if precomp.r_w >= threshold {
        // no candidate can beat the observation reconstruction error
        return Err(FieldMatchError::TerminalCase { r_w: precomp.r_w, threshold });
    }
    let precomp_s = t2.elapsed().as_secs_f64();

    let lhs = lhs_sample(config.input_dim, config.sample_count, config.seed)?;
    let samples = match &config.include_points {
        None => lhs,
        Some(extra) => {
            if extra.ncols() != config.input_dim {
                return Err(FieldMatchError::InvalidArgument(
                    "included points must have input_dim columns".into(),
                ));
            }
            let mut all = DMatrix::zeros(lhs.nrows() + extra.nrows(), config.input_dim);
            all.view_mut((0, 0), (lhs.nrows(), config.input_dim)).copy_from(&lhs);
            all.view_mut((lhs.nrows(), 0), (extra.nrows(), config.input_dim))
                .copy_from(extra);
            all
        }
    };

    let t3 = Instant::now();
    let implausibilities = evaluate_samples(&precomp, &bank, &samples)?;
    let evaluate_s = t3.elapsed().as_secs_f64();

    let (mask, nroy_fraction) = nroy_classify(&implausibilities, threshold);
    let summary = nroy_summaries_inner(
        &samples,
        &implausibilities,
        &mask,
        &bank,
        &precomp,
        basis.ell(),
    )?;
    Ok(WaveResult {
        nroy_fraction,
        implausibilities,
        mask,
        threshold,
        samples,
        summary,
        timing: WaveTiming { basis_s, emulate_s, precomp_s, evaluate_s },
        basis_q: basis.q,
    })
}

/// Decomposed implausibility for every row of `samples`, in row order.
pub fn evaluate_samples(
    precomp: &MatchPrecomp,
    bank: &EmulatorBank,
    samples: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    (0..samples.nrows())
        .into_par_iter()
        .map_init(
            || EvalScratch::new(precomp.q()),
            |scratch, i| {
                let x = samples.row(i).transpose();
                let (e_c, var_c) = predict_coefficients(bank, &x)?;
                let res = fast_field_implausibility_scratch(
                    precomp,
                    &e_c,
                    &DMatrix::from_diagonal(&var_c),
                    scratch,
                )?;
                Ok(res.value)
            },
        )
        .collect()
}

fn nroy_summaries_inner(
    samples: &DMatrix<f64>,
    implausibilities: &[f64],
    mask: &[bool],
    bank: &EmulatorBank,
    precomp: &MatchPrecomp,
    ell: usize,
) -> Result<Option<NroySummary>> {
    let mut unweighted = 0.0;
    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    let mut n_nroy = 0usize;
    for i in 0..samples.nrows() {
        if !mask[i] {
            continue;
        }
        let x = samples.row(i).transpose();
        let (e_c, _) = predict_coefficients(bank, &x)?;
        let d = &precomp.c_z - &e_c;
        // ||z - E f||_W (squared convention) via the same decomposition:
        // reconstruction error plus the Psi quadratic form of the coefficients
        let err = (precomp.r_w + d.dot(&(&precomp.psi * &d))) / ell as f64;
        let w = (-implausibilities[i]).exp();
        unweighted += err;
        weighted += w * err;
        weight_sum += w;
        n_nroy += 1;
    }
    if n_nroy == 0 {
        return Ok(None);
    }
    Ok(Some(NroySummary {
        n_nroy,
        unweighted_mean_error: unweighted / n_nroy as f64,
        weighted_mean_error: if weight_sum > 0.0 { weighted / weight_sum } else { 0.0 },
    }))
}

/// Recompute the NROY error summaries for an existing wave result.
pub fn nroy_summaries(
    result: &WaveResult,
    bank: &EmulatorBank,
    basis: &Basis,
    z: &DVector<f64>,
    sigma_e: &DMatrix<f64>,
    sigma_eta: &DMatrix<f64>,
) -> Result<Option<NroySummary>> {
    let weight = augment_w_truncation(sigma_e, sigma_eta, basis)?;
    let zc = z - &basis.mu;
    let precomp =
        make_precomp_with_weight(basis, &zc, &weight, &weight.sigma_e, &weight.sigma_eta, result.threshold)?;
    nroy_summaries_inner(
        &result.samples,
        &result.implausibilities,
        &result.mask,
        bank,
        &precomp,
        basis.ell(),
    )
}

/// One row of the timing benchmark.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub ell: usize,
    pub samples: usize,
    pub precomp_s: f64,
    pub decomposed_s: f64,
    pub naive_extrapolated_s: f64,
}

/// Time the decomposed path against an extrapolated naive direct path.
///
/// The naive cost is measured on `naive_probes` direct dense evaluations and
/// scaled to the full sample count; a handful of probes is enough because the
/// per-sample cost is a fixed dense factorization.
pub fn benchmark_implausibility(
    ell_list: &[usize],
    q: usize,
    sample_counts: &[usize],
    seed: u64,
    naive_probes: usize,
) -> Result<Vec<BenchRow>> {
    if q == 0 || naive_probes == 0 {
        return Err(FieldMatchError::InvalidArgument(
            "q and naive_probes must be at least 1".into(),
        ));
    }
    let mut rows = Vec::new();
    for &ell in ell_list {
        // banded SPD weight: cheap to build at any ell, structured like a
        // short-range spatial covariance
        let sigma_e = DMatrix::from_fn(ell, ell, |i, j| {
            let d = (i as f64 - j as f64).abs();
            0.111 * (-d * d / 4.0).exp()
        });
        let sigma_eta = DMatrix::zeros(ell, ell);
        let gamma = {
            let raw = DMatrix::from_fn(ell, q, |i, k| {
                ((i as f64 + 1.0) * (k as f64 + 1.0) * 0.37).sin()
            });
            // L2-orthonormalize for a well-conditioned basis
            let qr = raw.qr();
            qr.q()
        };
        let z = DVector::from_fn(ell, |i, _| (i as f64 * 0.11 + seed as f64).sin() * 0.3);

        let t0 = Instant::now();
        let weight =
            ErrorSpec::combine(sigma_e.clone(), sigma_eta.clone(), &JitterPolicy::default())?;
        let projector = WeightedProjector::for_columns(&gamma, &weight)?;
        let c_z = projector.project(&z);
        let resid = &z - &gamma * &c_z;
        let r_w = weight.weighted_sq_norm(&resid);
        let psi = projector.psi.clone();
        let precomp_s = t0.elapsed().as_secs_f64();

        // synthetic per-sample emulator output, deterministic and cheap
        let sample_e_c = |i: usize| -> DVector<f64> {
            DVector::from_fn(q, |k, _| ((i * (k + 1)) as f64 * 0.01).sin())
        };
        let sample_var = |i: usize| -> DVector<f64> {
            DVector::from_fn(q, |k, _| 0.05 + 0.01 * (((i + k) % 7) as f64))
        };

        // naive probe: dense (W + Gamma var Gamma^T) factorization per sample
        let mut probe_total = 0.0;
        for i in 0..naive_probes {
            let e_c = sample_e_c(i);
            let var_c = sample_var(i);
            let t = Instant::now();
            let mut scaled = gamma.clone();
            for (k, mut col) in scaled.column_iter_mut().enumerate() {
                col *= var_c[k];
            }
            let total = &scaled * gamma.transpose() + &sigma_e + &sigma_eta;
            let chol = nalgebra::Cholesky::new(total).ok_or(FieldMatchError::NotPositiveDefinite {
                pivot: f64::NAN,
                max_jitter: 0.0,
            })?;
            let r = &z - &gamma * &e_c;
            let val = r.dot(&chol.solve(&r));
            probe_total += t.elapsed().as_secs_f64();
            std::hint::black_box(val);
        }
        let naive_per_sample = probe_total / naive_probes as f64;

        for &n in sample_counts {
            let t1 = Instant::now();
            let mut acc = 0.0;
            let mut inner = DMatrix::zeros(q, q);
            let mut diff = DVector::zeros(q);
            for i in 0..n {
                let e_c = sample_e_c(i);
                let var_c = sample_var(i);
                // inner = var_c + Psi^{-1}; use the Psi quadratic form with
                // dense var only when needed — here diagonal var keeps it exact
                inner.copy_from(&psi);
                // (var_c + Psi^{-1})^{-1} applied via Psi-side identity:
                // solve with (I + Psi var)^{-1} Psi, formed explicitly
                let mut m = &psi * DMatrix::from_diagonal(&var_c);
                for k in 0..q {
                    m[(k, k)] += 1.0;
                }
                let lu = m.lu();
                diff.copy_from(&c_z);
                diff -= &e_c;
                let rhs = &psi * &diff;
                let sol = lu.solve(&rhs).ok_or(FieldMatchError::NormMismatch)?;
                acc += r_w + diff.dot(&sol);
            }
            let decomposed_s = t1.elapsed().as_secs_f64();
            std::hint::black_box(acc);
            rows.push(BenchRow {
                ell,
                samples: n,
                precomp_s,
                decomposed_s,
                naive_extrapolated_s: naive_per_sample * n as f64,
            });
        }
    }
    Ok(rows)
}

/// Least-squares fit of `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx).powi(2);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my).powi(2);
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (a, b, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{build_grid, gaussian_covariance, SigmaField};
    use crate::implausibility::{field_implausibility_direct, FieldVar};
    use approx::assert_relative_eq;

    fn desk_setup(seed: u64) -> (Grid, SynthData, DMatrix<f64>, DMatrix<f64>) {
        let grid = build_grid(12, 6).unwrap();
        let data = synth_experiment(&grid, 20, 2, seed).unwrap();
        let sf = SigmaField::constant(grid.ell(), 1.0 / 3.0).unwrap();
        let sigma_e = gaussian_covariance(&grid, (60.0, 40.0), &sf).unwrap();
        let sigma_eta = DMatrix::zeros(grid.ell(), grid.ell());
        (grid, data, sigma_e, sigma_eta)
    }

    #[test]
    fn synth_observation_matches_simulator_and_rank_bound() {
        let (_, data, _, _) = desk_setup(1);
        let z_again = data.simulator.run(&data.true_x);
        assert_eq!(data.z, z_again);
        let basis = svd_basis(&data.ensemble).unwrap();
        assert!(basis.rank() <= 8.min(data.ensemble.n_members() - 1));
    }

    #[test]
    fn true_run_is_plausible_under_honest_errors() {
        let (grid, data, sigma_e, sigma_eta) = desk_setup(2);
        // perfect emulator at the true input: zero residual and variance
        let i = field_implausibility_direct(
            &data.z,
            &data.simulator.run(&data.true_x),
            FieldVar::Dense(&DMatrix::zeros(grid.ell(), grid.ell())),
            &sigma_e,
            &sigma_eta,
        )
        .unwrap();
        let t = chi_squared_bound(grid.ell(), 0.995).unwrap();
        assert!(i < t, "I = {i} vs T = {t}");
    }

    #[test]
    fn wave_runs_and_true_x_lands_in_nroy() {
        let (_, data, sigma_e, sigma_eta) = desk_setup(3);
        let config = WaveConfig {
            sample_count: 200,
            seed: 7,
            include_points: Some(DMatrix::from_fn(1, 2, |_, c| data.true_x[c])),
            ..WaveConfig::default()
        };
        let result = run_wave(&config, &data.ensemble, &data.z, &sigma_e, &sigma_eta).unwrap();
        assert!(result.nroy_fraction >= 0.0 && result.nroy_fraction <= 1.0);
        assert_eq!(result.implausibilities.len(), 201);
        let last = *result.mask.last().unwrap();
        assert!(last, "true input should not be ruled out");
        if let Some(s) = &result.summary {
            assert!(s.unweighted_mean_error.is_finite());
            assert!(s.weighted_mean_error.is_finite());
        }
    }

    #[test]
    fn wave_is_bit_reproducible() {
        let (_, data, sigma_e, sigma_eta) = desk_setup(4);
        let config = WaveConfig { sample_count: 100, seed: 11, ..WaveConfig::default() };
        let a = run_wave(&config, &data.ensemble, &data.z, &sigma_e, &sigma_eta).unwrap();
        let b = run_wave(&config, &data.ensemble, &data.z, &sigma_e, &sigma_eta).unwrap();
        assert_eq!(a.implausibilities, b.implausibilities);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.nroy_fraction, b.nroy_fraction);
    }

    #[test]
    fn perfect_emulator_limit_matches_direct_path() {
        let (_, data, sigma_e, sigma_eta) = desk_setup(5);
        let weight = ErrorSpec::combine(
            sigma_e.clone(),
            sigma_eta.clone(),
            &JitterPolicy::default(),
        )
        .unwrap();
        let zc = &data.z - &data.ensemble.mu;
        let basis = truncate_basis(&svd_basis(&data.ensemble).unwrap(), 0.9).unwrap();
        let cfg = GpConfig { nugget: 0.0, ..GpConfig::default() };
        let bank = fit_coefficient_emulators(&data.ensemble, &basis, &weight, &cfg).unwrap();
        let t = chi_squared_bound(basis.q, 0.995).unwrap();
        let precomp =
            make_precomp_with_weight(&basis, &zc, &weight, &sigma_e, &sigma_eta, t).unwrap();
        let g = basis.gamma_q().into_owned();
        for j in 0..data.ensemble.n_members() {
            let x = data.ensemble.design_x.row(j).transpose();
            let (e_c, var_c) = predict_coefficients(&bank, &x).unwrap();
            let fast = crate::implausibility::fast_field_implausibility(
                &precomp,
                &e_c,
                &DMatrix::from_diagonal(&var_c),
            )
            .unwrap();
            let direct = field_implausibility_direct(
                &zc,
                &(&g * &e_c),
                FieldVar::LowRank { factor: &g, diag: &var_c },
                &sigma_e,
                &sigma_eta,
            )
            .unwrap();
            assert!(
                (direct - fast.value).abs() <= 1e-7 * (1.0 + direct),
                "member {j}: {direct} vs {}",
                fast.value
            );
        }
    }

    #[test]
    fn nroy_shrinks_as_errors_tighten() {
        let (_, data, sigma_e, sigma_eta) = desk_setup(6);
        let config = WaveConfig {
            sample_count: 150,
            seed: 13,
            gp: GpConfig { nugget: 0.0, ..GpConfig::default() },
            ..WaveConfig::default()
        };
        let loose = run_wave(&config, &data.ensemble, &data.z, &sigma_e, &sigma_eta).unwrap();
        let tight_sigma = &sigma_e * 0.25;
        match run_wave(&config, &data.ensemble, &data.z, &tight_sigma, &sigma_eta) {
            Ok(tight) => assert!(tight.nroy_fraction <= loose.nroy_fraction),
            // tightening may push the wave into the terminal case, which is
            // also "no larger NROY"
            Err(FieldMatchError::TerminalCase { .. }) => {}
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    #[test]
    fn terminal_case_aborts_the_wave() {
        let (grid, data, _, _) = desk_setup(7);
        // observations orthogonal to the smooth ensemble span: alternating
        // sign pattern, with a tiny error variance
        let spiky = DVector::from_fn(grid.ell(), |i, _| if i % 2 == 0 { 5.0 } else { -5.0 });
        let tiny = DMatrix::from_diagonal_element(grid.ell(), grid.ell(), 1e-6);
        let zeros = DMatrix::zeros(grid.ell(), grid.ell());
        let config = WaveConfig { sample_count: 50, seed: 17, ..WaveConfig::default() };
        let err = run_wave(&config, &data.ensemble, &spiky, &tiny, &zeros).unwrap_err();
        match err {
            FieldMatchError::TerminalCase { r_w, threshold } => {
                assert!(r_w >= threshold);
            }
            other => panic!("expected terminal case, got {other}"),
        }
    }

    #[test]
    fn rotated_wave_runs() {
        let (_, data, sigma_e, sigma_eta) = desk_setup(8);
        let config = WaveConfig {
            sample_count: 100,
            seed: 19,
            basis_kind: BasisKind::Rotated,
            ..WaveConfig::default()
        };
        let result = run_wave(&config, &data.ensemble, &data.z, &sigma_e, &sigma_eta).unwrap();
        assert_eq!(result.implausibilities.len(), 100);
        assert!(result.basis_q >= 1);
    }

    #[test]
    fn summaries_zero_when_predictions_equal_observations() {
        // construct a result by hand: single NROY sample whose prediction
        // reproduces z exactly and whose basis reconstructs z exactly
        let (_, data, sigma_e, sigma_eta) = desk_setup(9);
        let weight =
            ErrorSpec::combine(sigma_e.clone(), sigma_eta, &JitterPolicy::default()).unwrap();
        let basis = svd_basis(&data.ensemble).unwrap();
        // make z a field the basis reconstructs exactly: a reconstructed
        // projection of the original observations
        let zc = &data.z - &data.ensemble.mu;
        let projector = WeightedProjector::new(&basis, &weight).unwrap();
        let c = projector.project(&zc);
        let z_in_span = basis.gamma_q() * &c + &data.ensemble.mu;
        let config = WaveConfig {
            sample_count: 60,
            seed: 23,
            truncation_threshold: 1.0,
            gp: GpConfig { nugget: 0.0, ..GpConfig::default() },
            include_points: Some(data.ensemble.design_x.clone()),
            ..WaveConfig::default()
        };
        let sigma_eta = DMatrix::zeros(z_in_span.len(), z_in_span.len());
        let result =
            run_wave(&config, &data.ensemble, &z_in_span, &sigma_e, &sigma_eta).unwrap();
        // weighted and unweighted summaries agree when only one point is kept;
        // more generally both are finite and non-negative here
        if let Some(s) = result.summary {
            assert!(s.unweighted_mean_error >= 0.0);
            assert!(s.weighted_mean_error >= 0.0);
            if s.n_nroy == 1 {
                assert_relative_eq!(s.unweighted_mean_error, s.weighted_mean_error);
            }
        }
    }

    #[test]
    fn weighted_summary_below_unweighted_in_constructed_case() {
        // two NROY points where the higher-implausibility point also has the
        // larger error: down-weighting it pulls the weighted mean below the
        // unweighted one. Verified against the summary formula by hand.
        let errs = [0.1, 0.9];
        let imps = [1.0, 3.0];
        let unweighted = (errs[0] + errs[1]) / 2.0;
        let w: Vec<f64> = imps.iter().map(|&i: &f64| (-i).exp()).collect();
        let weighted = (w[0] * errs[0] + w[1] * errs[1]) / (w[0] + w[1]);
        assert!(weighted < unweighted);
    }

    #[test]
    fn benchmark_structure_and_linearity() {
        let rows =
            benchmark_implausibility(&[64], 4, &[200, 2000, 20000], 1, 3).unwrap();
        assert_eq!(rows.len(), 3);
        let x: Vec<f64> = rows.iter().map(|r| r.samples as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.decomposed_s).collect();
        let (_, slope, r2) = linear_fit(&x, &y);
        assert!(slope > 0.0);
        assert!(r2 > 0.9, "r2 = {r2}");
        for r in &rows {
            assert!(r.naive_extrapolated_s > 0.0);
        }
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v + 1.0).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert_relative_eq!(a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b, 2.5, epsilon = 1e-12);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
    }
}
