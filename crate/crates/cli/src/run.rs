//! Command execution.
//!
//! Every run has two stages. Loading reads and validates all inputs and
//! output locations; any failure there is an input error (exit 2). Only
//! then does computation start, and nothing is written until every output
//! has been rendered, so a failed run leaves no files behind.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use enscgp_core::ensemble::{
    enkf_mean_update, enkf_perturbed_obs, ens_cgp_with, ensemble_stats_with, Ensemble, Perturbation,
};
use enscgp_core::experiments::{
    corpus_instance, repeated_reuse, run_equivalence, EquivalenceReport, MeanRoute, COLLAPSE_LABEL, MAX_REUSE,
};
use enscgp_core::gaussian::condition;
use enscgp_core::kernels::{gram_matrix, kl_truncate, sample_kl, KernelSpec, Truncation};
use enscgp_core::psd::symmetrize;
use enscgp_core::{GaussianLaw, ObservationModel, RankTol};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::config::{Command, EnsembleFiles, KlArgs, ProblemFiles, RunConfig};
use crate::matrix_io::{format_matrix, format_real, read_matrix, read_vector, MatrixIoError};
use crate::report::Report;

/// Name of the environment variable holding the default rank tolerance.
pub const RANK_TOL_ENV: &str = "ENSCGP_RANK_TOL";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Read(#[from] MatrixIoError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid input: {0}")]
    Model(#[source] enscgp_core::Error),
    #[error("computation failed: {0}")]
    Compute(#[source] enscgp_core::Error),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read(_) | CliError::Input(_) | CliError::Model(_) => 2,
            CliError::Compute(_) | CliError::Write { .. } => 1,
        }
    }
}

trait Stage<T> {
    fn input(self) -> Result<T, CliError>;
    fn compute(self) -> Result<T, CliError>;
}

impl<T> Stage<T> for enscgp_core::Result<T> {
    fn input(self) -> Result<T, CliError> {
        self.map_err(CliError::Model)
    }

    fn compute(self) -> Result<T, CliError> {
        self.map_err(CliError::Compute)
    }
}

/// Rendered results of a successful run; nothing has touched disk yet.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub report: String,
    /// Extra files in the order they should be written.
    pub files: Vec<(PathBuf, String)>,
}

/// Flag beats environment; both must be positive and finite.
pub fn resolve_rank_tol(flag: Option<f64>, env: Option<&str>) -> Result<RankTol, CliError> {
    if let Some(t) = flag {
        return RankTol::absolute(t).map_err(|e| CliError::Input(format!("--rank-tol: {e}")));
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(RankTol::Auto),
        Some(s) => {
            let t: f64 = s
                .parse()
                .map_err(|_| CliError::Input(format!("{RANK_TOL_ENV}={s:?} is not a number")))?;
            RankTol::absolute(t).map_err(|e| CliError::Input(format!("{RANK_TOL_ENV}: {e}")))
        }
    }
}

fn describe_tol(tol: RankTol) -> String {
    match tol {
        RankTol::Auto => "auto".into(),
        RankTol::Absolute(t) => format_real(t),
    }
}

struct Problem {
    prior: GaussianLaw,
    obs: ObservationModel,
    y: DVector<f64>,
}

fn load_observation(h: &Path, r: &Path, y: &Path, n: usize) -> Result<(ObservationModel, DVector<f64>), CliError> {
    let h = read_matrix(h)?;
    let r = read_matrix(r)?;
    let y = read_vector(y)?;
    let obs = ObservationModel::new(h, &r).input()?;
    if obs.state_dim() != n {
        return Err(CliError::Input(format!(
            "H has {} columns but the state dimension is {n}",
            obs.state_dim()
        )));
    }
    if y.len() != obs.obs_dim() {
        return Err(CliError::Input(format!(
            "y has {} entries but H has {} rows",
            y.len(),
            obs.obs_dim()
        )));
    }
    Ok((obs, y))
}

fn load_problem(files: &ProblemFiles, tol: RankTol) -> Result<Problem, CliError> {
    let mean = read_vector(&files.mean)?;
    let cov = symmetrize(&read_matrix(&files.cov)?).input()?;
    let prior = GaussianLaw::new(mean, &cov, tol).input()?;
    let (obs, y) = load_observation(&files.h, &files.r, &files.y, prior.dim())?;
    Ok(Problem { prior, obs, y })
}

fn problem_from_list(inputs: &[PathBuf], tol: RankTol) -> Result<Option<Problem>, CliError> {
    match inputs {
        [] => Ok(None),
        [mean, cov, h, r, y] => load_problem(
            &ProblemFiles {
                mean: mean.clone(),
                cov: cov.clone(),
                h: h.clone(),
                r: r.clone(),
                y: y.clone(),
            },
            tol,
        )
        .map(Some),
        other => Err(CliError::Input(format!(
            "expected MEAN COV H R Y (5 files) or none, got {}",
            other.len()
        ))),
    }
}

fn load_ensemble(files: &EnsembleFiles) -> Result<(Ensemble, ObservationModel, DVector<f64>), CliError> {
    let ens = Ensemble::new(read_matrix(&files.ensemble)?).input()?;
    let (obs, y) = load_observation(&files.h, &files.r, &files.y, ens.dim())?;
    Ok((ens, obs, y))
}

/// Output paths must be distinct and sit in existing directories.
fn check_outputs(paths: &[Option<&PathBuf>]) -> Result<(), CliError> {
    let mut seen = HashSet::new();
    for p in paths.iter().flatten() {
        if !seen.insert(p.as_path()) {
            return Err(CliError::Input(format!("output path {} is used twice", p.display())));
        }
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !parent.is_dir() {
                return Err(CliError::Input(format!(
                    "output directory {} does not exist",
                    parent.display()
                )));
            }
        }
    }
    Ok(())
}

fn header(report: &mut Report, command: &str, config: &RunConfig, tol: RankTol) {
    report
        .push("command", command)
        .push("seed", config.seed)
        .push("rank_tol", describe_tol(tol));
}

fn posterior_entries(report: &mut Report, law: &GaussianLaw) {
    report
        .push("posterior_rank", law.rank())
        .push("posterior_mean", law.mean())
        .push("posterior_covariance", law.covariance().into_matrix())
        .push("posterior_covariance_factor", law.cov_factor().factor());
}

fn equivalence_entries(report: &mut Report, prefix: &str, r: &EquivalenceReport) {
    let key = |k: &str| format!("{prefix}{k}");
    if let Some(seed) = r.descriptor.seed {
        report.push(key("seed"), seed);
    }
    report
        .push(key("n"), r.descriptor.n)
        .push(key("m"), r.descriptor.m)
        .push(key("prior_rank"), r.descriptor.rank)
        .push(key("posterior_rank"), r.posterior_rank);
    for (a, b, gap) in &r.mean_discrepancies {
        report.push(key(&format!("mean_discrepancy.{a}_{b}")), *gap);
    }
    report
        .push(key("max_mean_discrepancy"), r.max_mean_discrepancy())
        .push(key("covariance_discrepancy"), r.covariance_discrepancy)
        .push(key("range_leakage"), r.range_leakage)
        .push(key("passed"), r.passed);
}

/// Parses `args`, runs the command and writes its outputs.
///
/// Returns the process exit code.
pub fn main_with<I, T>(args: I, env_rank_tol: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = execute(&config, env_rank_tol).and_then(|out| emit(&config, &out, stdout));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn emit(config: &RunConfig, out: &Outputs, stdout: &mut dyn Write) -> Result<(), CliError> {
    for (path, contents) in &out.files {
        write_file(path, contents)?;
    }
    match &config.out {
        Some(path) => write_file(path, &out.report),
        None => match stdout.write_all(out.report.as_bytes()) {
            // A reader that stops early (e.g. `head`) is not a failure.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            other => other.map_err(|source| CliError::Write {
                path: "<stdout>".into(),
                source,
            }),
        },
    }
}

/// Loads inputs and computes every output without writing anything.
pub fn execute(config: &RunConfig, env_rank_tol: Option<&str>) -> Result<Outputs, CliError> {
    let tol = resolve_rank_tol(config.rank_tol, env_rank_tol)?;
    let mut report = Report::new();
    let mut files = Vec::new();

    match &config.command {
        Command::Condition(paths) => {
            check_outputs(&[config.out.as_ref()])?;
            let p = load_problem(paths, tol)?;
            let post = condition(&p.prior, &p.obs, &p.y).compute()?;
            header(&mut report, "condition", config, tol);
            report
                .push("n", p.prior.dim())
                .push("m", p.obs.obs_dim())
                .push("prior_rank", p.prior.rank());
            posterior_entries(&mut report, &post);
        }
        Command::EnsCgp(paths) => {
            check_outputs(&[config.out.as_ref()])?;
            let (ens, obs, y) = load_ensemble(paths)?;
            let stats = ensemble_stats_with(&ens, tol);
            let post = ens_cgp_with(&ens, &obs, &y, tol, Ok).compute()?;
            let gain_mean = enkf_mean_update(&stats, &obs, &y).compute()?;
            header(&mut report, "ens-cgp", config, tol);
            report
                .push("n", ens.dim())
                .push("m", obs.obs_dim())
                .push("members", ens.size())
                .push("ensemble_rank", stats.rank())
                .push("prior_mean", &stats.mean)
                .push("anomaly", &stats.anomaly);
            posterior_entries(&mut report, &post);
            let gap = (&gain_mean - post.mean()).norm() / post.mean().norm().max(1.0);
            report.push("gain_mean", gain_mean).push("gain_mean_discrepancy", gap);
        }
        Command::Equivalence { inputs, count } => {
            check_outputs(&[config.out.as_ref()])?;
            let single = problem_from_list(inputs, tol)?;
            header(&mut report, "equivalence", config, tol);
            match single {
                Some(p) => {
                    let r = run_equivalence(&p.prior, &p.obs, &p.y).compute()?;
                    report.push("summary", format!("{}/1 pass", u8::from(r.passed)));
                    equivalence_entries(&mut report, "", &r);
                    report.push("prior_mean", &r.prior_mean);
                    for route in MeanRoute::ALL {
                        report.push(format!("mean.{route}"), r.mean(route));
                    }
                    report
                        .push("covariance.schur", r.schur_covariance.as_matrix())
                        .push("covariance.hessian", r.hessian_covariance.as_matrix());
                }
                None => {
                    if *count == 0 {
                        return Err(CliError::Input("--count must be positive".into()));
                    }
                    let mut reports = Vec::with_capacity(*count);
                    for seed in 0..*count as u64 {
                        let inst = corpus_instance(seed);
                        let prior = match tol {
                            RankTol::Auto => inst.prior,
                            _ => GaussianLaw::from_factor(
                                inst.prior.mean().clone(),
                                inst.prior.cov_factor().factor(),
                                tol,
                            )
                            .compute()?,
                        };
                        let mut r = run_equivalence(&prior, &inst.obs, &inst.y).compute()?;
                        r.descriptor.seed = Some(seed);
                        reports.push(r);
                    }
                    let passed = reports.iter().filter(|r| r.passed).count();
                    report
                        .push("summary", format!("{passed}/{count} pass"))
                        .push("passed", passed)
                        .push("total", *count)
                        .push(
                            "worst_mean_discrepancy",
                            reports.iter().map(|r| r.max_mean_discrepancy()).fold(0.0, f64::max),
                        )
                        .push(
                            "worst_covariance_discrepancy",
                            reports.iter().map(|r| r.covariance_discrepancy).fold(0.0, f64::max),
                        )
                        .push(
                            "worst_range_leakage",
                            reports.iter().map(|r| r.range_leakage).fold(0.0, f64::max),
                        );
                    for (i, r) in reports.iter().enumerate() {
                        equivalence_entries(&mut report, &format!("instance.{i}."), r);
                    }
                }
            }
        }
        Command::Collapse { inputs, k_max, trace } => {
            check_outputs(&[config.out.as_ref(), trace.as_ref()])?;
            if *k_max == 0 || *k_max > MAX_REUSE {
                return Err(CliError::Input(format!(
                    "--k-max must be in 1..={MAX_REUSE}, got {k_max}"
                )));
            }
            let p = match problem_from_list(inputs, tol)? {
                Some(p) => p,
                None => Problem {
                    prior: GaussianLaw::new(DVector::zeros(1), &enscgp_core::SymmetricMatrix::identity(1), tol)
                        .input()?,
                    obs: ObservationModel::new(DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).input()?,
                    y: DVector::from_element(1, 1.0),
                },
            };
            if p.prior.rank() != p.prior.dim() {
                return Err(CliError::Input(format!(
                    "collapse needs an SPD prior covariance, got rank {} of {}",
                    p.prior.rank(),
                    p.prior.dim()
                )));
            }
            let t = repeated_reuse(&p.prior, &p.obs, &p.y, *k_max).compute()?;
            let last = t.steps.last().expect("k_max >= 1");
            header(&mut report, "collapse", config, tol);
            report
                .push("label", t.label)
                .push("n", p.prior.dim())
                .push("k_max", *k_max)
                .push("recursive_checked_through", t.recursive_checked_through)
                .push("max_recursive_discrepancy", t.max_recursive_discrepancy)
                .push("initial_spectral_norm", t.steps[0].spectral_norm)
                .push("final_spectral_norm", last.spectral_norm)
                .push("final_mean", &last.mean)
                .push("final_covariance", last.covariance.as_matrix());
            if let Some(path) = trace {
                let mut text = format!("# {COLLAPSE_LABEL}\n# k spectral_norm mean_norm\n");
                for s in &t.steps {
                    text.push_str(&format!(
                        "{} {} {}\n",
                        s.k,
                        format_real(s.spectral_norm),
                        format_real(s.mean.norm())
                    ));
                }
                files.push((path.clone(), text));
            }
        }
        Command::KlSample(args) => kl_sample(config, args, tol, &mut report, &mut files)?,
        Command::Enkf {
            files: paths,
            perturbation,
            trace,
            matrix_out,
        } => {
            check_outputs(&[config.out.as_ref(), trace.as_ref(), matrix_out.as_ref()])?;
            let (ens, obs, y) = load_ensemble(paths)?;
            let stats = ensemble_stats_with(&ens, tol);
            let exact = enkf_mean_update(&stats, &obs, &y).compute()?;
            let post = ens_cgp_with(&ens, &obs, &y, tol, Ok).compute()?;
            let updated = enkf_perturbed_obs(&ens, &obs, &y, config.seed, *perturbation).compute()?;
            let sample_mean = updated.sample_mean();
            let sample_cov = ensemble_stats_with(&updated, tol).covariance_factor.gram();

            header(&mut report, "enkf", config, tol);
            report
                .push("perturbation", perturbation_name(*perturbation))
                .push("n", ens.dim())
                .push("m", obs.obs_dim())
                .push("members", ens.size())
                .push("prior_mean", &stats.mean)
                .push("exact_mean", &exact)
                .push("sample_mean", &sample_mean)
                .push("mean_error", (&sample_mean - &exact).norm())
                .push("posterior_covariance", post.covariance().into_matrix())
                .push("sample_covariance", sample_cov.into_matrix());
            if let Some(path) = trace {
                let mut text = String::from("# index exact_mean sample_mean\n");
                for i in 0..exact.len() {
                    text.push_str(&format!(
                        "{i} {} {}\n",
                        format_real(exact[i]),
                        format_real(sample_mean[i])
                    ));
                }
                files.push((path.clone(), text));
            }
            match matrix_out {
                Some(path) => files.push((
                    path.clone(),
                    format_matrix(updated.members(), &[&format!("ensemble members={}", updated.size())]),
                )),
                None => {
                    report.push("updated_members", updated.members());
                }
            }
        }
    }

    Ok(Outputs {
        report: report.render(config.format),
        files,
    })
}

fn perturbation_name(p: Perturbation) -> String {
    p.to_string()
}

fn kl_sample(
    config: &RunConfig,
    args: &KlArgs,
    tol: RankTol,
    report: &mut Report,
    files: &mut Vec<(PathBuf, String)>,
) -> Result<(), CliError> {
    check_outputs(&[config.out.as_ref(), args.matrix_out.as_ref()])?;
    let points = read_matrix(&args.points)?;
    let mean = args.mean.as_deref().map(read_vector).transpose()?;
    let spec = KernelSpec::new(args.kernel, args.variance, args.lengthscale).input()?;
    if args.members == 0 {
        return Err(CliError::Input("--members must be positive".into()));
    }
    if let Some(m) = &mean {
        if m.len() != points.nrows() {
            return Err(CliError::Input(format!(
                "mean has {} entries for {} points",
                m.len(),
                points.nrows()
            )));
        }
    }
    let truncation = match (args.modes, args.energy) {
        (Some(r), _) => Truncation::Modes(r),
        (None, Some(f)) => Truncation::Energy(f),
        (None, None) => Truncation::Energy(1.0),
    };

    let k = gram_matrix(&spec, &points).input()?;
    let mut modes = kl_truncate(&k, truncation, tol).input()?;
    if let Some(m) = mean {
        modes = modes.with_mean(m).input()?;
    }
    let samples = sample_kl(&modes, args.members, config.seed);

    header(report, "kl-sample", config, tol);
    report
        .push("kernel", args.kernel.to_string())
        .push("variance", spec.variance())
        .push("lengthscale", spec.lengthscale())
        .push("points", points.nrows())
        .push("modes", modes.rank())
        .push("eigenvalues", modes.eigenvalues())
        .push("residual", modes.residual())
        .push("members", args.members)
        .push("sample_mean", samples.column_mean());
    match &args.matrix_out {
        Some(path) => files.push((
            path.clone(),
            format_matrix(&samples, &[&format!("ensemble members={}", args.members)]),
        )),
        None => {
            report.push("samples", samples);
        }
    }
    Ok(())
}
