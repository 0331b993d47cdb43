//! Command-line surface: `synth`, `basis`, `emulate`, `match`, `bench`.
//!
//! Exit codes: 0 ok, 2 invalid input, 3 terminal case, 4 numerical failure.
//! Errors are emitted as a JSON record on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{svd_basis, truncate_basis, varmse_curve};
use crate::covariance::{ErrorSpec, JitterPolicy};
use crate::error::{FieldMatchError, Result};
use crate::gp::{
    fit_coefficient_emulators, fit_univariate_emulators, validate_emulators, EmulatorBank,
};
use crate::implausibility::chi_squared_bound;
use crate::io::{read_matrix, read_vector, write_matrix, write_vector, RunConfig};
use crate::rotation::{rotate_basis, terminal_case_check, RotationConfig};
use crate::wave::{benchmark_implausibility, run_wave, synth_experiment};

#[derive(Parser)]
#[command(
    name = "fieldmatch",
    about = "History matching for high-dimensional simulator output fields",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment: ensemble, design, observations.
    Synth(SynthArgs),
    /// Compute a (possibly rotated) basis with diagnostics.
    Basis(BasisArgs),
    /// Fit emulators and write a validation report.
    Emulate(EmulateArgs),
    /// Run one history-matching wave.
    Match(MatchArgs),
    /// Time decomposed vs naive implausibility evaluation.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Grid as NLONxNLAT, e.g. 32x16.
    #[arg(long)]
    grid: String,
    /// Ensemble size.
    #[arg(long)]
    n: usize,
    /// Input dimension.
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BasisArgs {
    /// Ensemble field matrix (ell x n, raw fields).
    #[arg(long)]
    ensemble: PathBuf,
    /// Design matrix (n x p); identity-like placeholder used when omitted.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    /// Rotate the basis toward the observations (requires --obs).
    #[arg(long)]
    rotate: bool,
    /// Raw observation field (ell x 1).
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Weight matrix W (ell x ell) used as the projection norm.
    #[arg(long)]
    weight: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmulateArgs {
    /// coeff (basis coefficients) or uv (one emulator per grid box).
    #[arg(long)]
    mode: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    ell: usize,
    #[arg(long, default_value_t = 14)]
    q: usize,
    /// Comma-separated sample counts; scientific notation accepted.
    #[arg(long, default_value = "1e3,1e4,1e5")]
    samples: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Direct dense evaluations used to extrapolate the naive cost.
    #[arg(long, default_value_t = 3)]
    probes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn error_kind(e: &FieldMatchError) -> (&'static str, i32) {
    use FieldMatchError::*;
    match e {
        InvalidArgument(_) | Io { .. } | Parse { .. } | Config(_) => ("invalid_input", 2),
        TerminalCase { .. } => ("terminal_case", 3),
        NotPositiveDefinite { .. }
        | DegenerateEnsemble
        | IllConditionedProjection { .. }
        | SingularCorrelation { .. }
        | FitFailure(_)
        | ConstraintInfeasible { .. }
        | NormMismatch => ("numerical_failure", 4),
    }
}

/// Run the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version by "erroring" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let record = ErrorRecord { error: kind, message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&record).unwrap());
            code
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Basis(args) => cmd_basis(args),
        Command::Emulate(args) => cmd_emulate(args),
        Command::Match(args) => cmd_match(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FieldMatchError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FieldMatchError::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| FieldMatchError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(FieldMatchError::InvalidArgument(format!(
            "grid must be NLONxNLAT, got `{spec}`"
        )));
    }
    let n_lon = parts[0].parse().map_err(|_| {
        FieldMatchError::InvalidArgument(format!("bad grid dimension `{}`", parts[0]))
    })?;
    let n_lat = parts[1].parse().map_err(|_| {
        FieldMatchError::InvalidArgument(format!("bad grid dimension `{}`", parts[1]))
    })?;
    Ok((n_lon, n_lat))
}

fn parse_counts(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|tok| {
            let v: f64 = tok.trim().parse().map_err(|_| {
                FieldMatchError::InvalidArgument(format!("bad sample count `{tok}`"))
            })?;
            if !(v >= 1.0 && v.fract() == 0.0 || v >= 1.0 && (v - v.round()).abs() < 1e-9) {
                return Err(FieldMatchError::InvalidArgument(format!(
                    "sample count must be a positive integer, got `{tok}`"
                )));
            }
            Ok(v.round() as usize)
        })
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (n_lon, n_lat) = parse_grid(&args.grid)?;
    let grid = crate::covariance::build_grid(n_lon, n_lat)?;
    let data = synth_experiment(&grid, args.n, args.p, args.seed)?;
    ensure_dir(&args.out)?;
    write_matrix(&args.out.join("ensemble.txt"), &data.ensemble.f)?;
    write_matrix(&args.out.join("design.txt"), &data.ensemble.design_x)?;
    write_vector(&args.out.join("z.txt"), &data.z)?;
    write_vector(&args.out.join("true_x.txt"), &data.true_x)?;
    Ok(())
}

fn load_ensemble(
    ensemble_path: &Path,
    design_path: Option<&Path>,
) -> Result<crate::basis::Ensemble> {
    let f = read_matrix(ensemble_path)?;
    let n = f.ncols();
    let design = match design_path {
        Some(p) => read_matrix(p)?,
        // placeholder design when only basis work is requested
        None => DMatrix::from_fn(n, 1, |i, _| i as f64 / (n.max(2) - 1) as f64),
    };
    crate::basis::center_ensemble(f, design)
}

#[derive(Serialize)]
struct BasisReport {
    q: usize,
    rank: usize,
    variance_explained: Vec<f64>,
    terminal: Option<crate::rotation::TerminalCheck>,
}

fn cmd_basis(args: BasisArgs) -> Result<()> {
    let ensemble = load_ensemble(&args.ensemble, args.design.as_deref())?;
    let w = read_matrix(&args.weight)?;
    let weight =
        ErrorSpec::combine(w, DMatrix::zeros(ensemble.ell(), ensemble.ell()), &JitterPolicy::default())?;
    let zc = match &args.obs {
        Some(p) => Some(read_vector(p)? - &ensemble.mu),
        None => None,
    };
    let basis = if args.rotate {
        let zc = zc.as_ref().ok_or_else(|| {
            FieldMatchError::InvalidArgument("--rotate requires --obs".into())
        })?;
        rotate_basis(
            &ensemble,
            zc,
            &weight,
            &RotationConfig { truncation_threshold: args.threshold, ..RotationConfig::default() },
        )?
    } else {
        truncate_basis(&svd_basis(&ensemble)?, args.threshold)?
    };
    ensure_dir(&args.out)?;
    write_matrix(&args.out.join("basis.txt"), &basis.gamma_q().into_owned())?;
    write_vector(&args.out.join("mean.txt"), &basis.mu)?;

    let full = svd_basis(&ensemble)?;
    let curve = varmse_curve(&full, &zc.clone().unwrap_or_else(|| DVector::zeros(ensemble.ell())), &weight, false)?;
    write_json(&args.out.join("varmse.json"), &curve)?;

    let terminal = match &zc {
        Some(zc) => {
            let t = chi_squared_bound(ensemble.ell(), 0.995)?;
            let check = terminal_case_check(&full, zc, &weight, t)?;
            write_json(&args.out.join("terminal.json"), &check)?;
            Some(check)
        }
        None => None,
    };
    let report = BasisReport {
        q: basis.q,
        rank: basis.rank(),
        variance_explained: basis.variance_explained.clone(),
        terminal,
    };
    write_json(&args.out.join("basis_report.json"), &report)?;
    if let Some(check) = terminal {
        if check.terminal {
            return Err(FieldMatchError::TerminalCase {
                r_w: check.r_w,
                threshold: check.threshold,
            });
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EmulatorRecord {
    lengthscales: Vec<f64>,
    process_variance: f64,
    mean_coefficients: Vec<f64>,
    nugget: f64,
    fallback: bool,
}

#[derive(Serialize)]
struct BankReport {
    mode: String,
    emulators: Vec<EmulatorRecord>,
    failed_indices: Vec<usize>,
}

fn bank_report(mode: &str, bank: &EmulatorBank) -> BankReport {
    BankReport {
        mode: mode.to_string(),
        emulators: bank
            .emulators
            .iter()
            .map(|em| EmulatorRecord {
                lengthscales: em.lengthscales.iter().copied().collect(),
                process_variance: em.process_variance,
                mean_coefficients: em.mean_coefficients.iter().copied().collect(),
                nugget: em.nugget,
                fallback: em.is_fallback(),
            })
            .collect(),
        failed_indices: bank.failed_indices.clone(),
    }
}

fn cmd_emulate(args: EmulateArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let ensemble = load_ensemble(
        &base.join(&cfg.paths.ensemble),
        Some(base.join(&cfg.paths.design).as_path()),
    )?;
    let (sigma_e, sigma_eta) = cfg.error_matrices()?;
    let weight = ErrorSpec::combine(sigma_e, sigma_eta, &JitterPolicy::default())?;
    let gp = cfg.gp_config();
    ensure_dir(&args.out)?;
    let (bank, basis) = match args.mode.as_str() {
        "coeff" => {
            let basis =
                truncate_basis(&svd_basis(&ensemble)?, cfg.wave.truncation_threshold)?;
            let bank = fit_coefficient_emulators(&ensemble, &basis, &weight, &gp)?;
            (bank, Some(basis))
        }
        "uv" => (fit_univariate_emulators(&ensemble, &gp)?, None),
        other => {
            return Err(FieldMatchError::InvalidArgument(format!(
                "mode must be coeff or uv, got `{other}`"
            )))
        }
    };
    write_json(&args.out.join("bank.json"), &bank_report(&args.mode, &bank))?;
    // validate on the design itself: no held-out runs are assumed to exist
    let report = validate_emulators(
        &bank,
        basis.as_ref(),
        &ensemble,
        &ensemble.design_x,
        &ensemble.f,
        &weight,
    )?;
    write_json(&args.out.join("validation.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct MatchReport {
    nroy_fraction: f64,
    threshold: f64,
    basis_q: usize,
    n_samples: usize,
    summary: Option<crate::wave::NroySummary>,
    timing: crate::wave::WaveTiming,
}

fn cmd_match(args: MatchArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let ensemble = load_ensemble(
        &base.join(&cfg.paths.ensemble),
        Some(base.join(&cfg.paths.design).as_path()),
    )?;
    let z = read_vector(&base.join(&cfg.paths.z))?;
    let (sigma_e, sigma_eta) = cfg.error_matrices()?;
    let mut wave_cfg = cfg.wave_config();
    if let Some(true_x) = &cfg.paths.true_x {
        let tx = read_vector(&base.join(true_x))?;
        wave_cfg.include_points =
            Some(DMatrix::from_fn(1, tx.len(), |_, c| tx[c]));
    }
    let result = run_wave(&wave_cfg, &ensemble, &z, &sigma_e, &sigma_eta)?;
    ensure_dir(&args.out)?;
    write_vector(
        &args.out.join("implausibility.txt"),
        &DVector::from_vec(result.implausibilities.clone()),
    )?;
    write_vector(
        &args.out.join("nroy_mask.txt"),
        &DVector::from_iterator(
            result.mask.len(),
            result.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }),
        ),
    )?;
    // histogram data for external plotting: 20 equal bins to the max
    let max = result.implausibilities.iter().cloned().fold(0.0f64, f64::max);
    let nbins = 20;
    let width = if max > 0.0 { max / nbins as f64 } else { 1.0 };
    let mut counts = vec![0usize; nbins];
    for &v in &result.implausibilities {
        let b = ((v / width) as usize).min(nbins - 1);
        counts[b] += 1;
    }
    let mut hist = String::from("bin_lower,bin_upper,count\n");
    for (b, &c) in counts.iter().enumerate() {
        hist.push_str(&format!("{},{},{}\n", b as f64 * width, (b + 1) as f64 * width, c));
    }
    fs::write(args.out.join("histogram.csv"), hist).map_err(|e| FieldMatchError::Io {
        path: args.out.join("histogram.csv").display().to_string(),
        source: e,
    })?;
    let report = MatchReport {
        nroy_fraction: result.nroy_fraction,
        threshold: result.threshold,
        basis_q: result.basis_q,
        n_samples: result.implausibilities.len(),
        summary: result.summary.clone(),
        timing: result.timing.clone(),
    };
    write_json(&args.out.join("match_report.json"), &report)?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let counts = parse_counts(&args.samples)?;
    let rows = benchmark_implausibility(&[args.ell], args.q, &counts, args.seed, args.probes)?;
    let mut csv = String::from("samples, precomp_s, decomposed_s, naive_extrapolated_s\n");
    for r in &rows {
        csv.push_str(&format!(
            "{}, {:.6}, {:.6}, {:.6}\n",
            r.samples, r.precomp_s, r.decomposed_s, r.naive_extrapolated_s
        ));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    fs::write(&args.out, csv).map_err(|e| FieldMatchError::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    Ok(())
}
