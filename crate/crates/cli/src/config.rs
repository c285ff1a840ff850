use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use enscgp_core::ensemble::Perturbation;
use enscgp_core::kernels::KernelFamily;

use crate::report::Format;

/// Gaussian conditioning along Schur, QP, RKHS and Kalman-gain routes.
#[derive(Debug, Clone, Parser)]
#[command(name = "enscgp", version)]
pub struct RunConfig {
    /// Absolute eigenvalue/singular-value threshold for numerical rank
    /// (defaults to ENSCGP_RANK_TOL, then to the scale-relative rule).
    #[arg(long, global = true, value_name = "TOL")]
    pub rank_tol: Option<f64>,

    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Write the report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Condition a Gaussian prior on linear observations.
    Condition(ProblemFiles),
    /// Condition the Gaussian built from an ensemble's empirical moments.
    EnsCgp(EnsembleFiles),
    /// Compare the four posterior-mean routes (bundled corpus when no files are given).
    Equivalence {
        /// MEAN COV H R Y, or nothing for the seeded corpus.
        #[arg(value_name = "FILES")]
        inputs: Vec<PathBuf>,
        /// Corpus size when no files are given.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Condition repeatedly on the same data to show posterior collapse.
    Collapse {
        /// MEAN COV H R Y, or nothing for the scalar instance K=R=H=1, m=0, y=1.
        #[arg(value_name = "FILES")]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        k_max: usize,
        /// Plot-ready `k spectral_norm mean_norm` columns.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Draw Karhunen–Loève samples from a kernel prior on a point set.
    KlSample(KlArgs),
    /// Stochastic EnKF analysis with perturbed observations.
    Enkf {
        #[command(flatten)]
        files: EnsembleFiles,
        #[arg(long, default_value_t = Perturbation::Raw, value_parser = parse_perturbation)]
        perturbation: Perturbation,
        /// Plot-ready `index exact_mean sample_mean` columns.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Write the updated ensemble (members as columns) here.
        #[arg(long, value_name = "PATH")]
        matrix_out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ProblemFiles {
    pub mean: PathBuf,
    pub cov: PathBuf,
    pub h: PathBuf,
    pub r: PathBuf,
    pub y: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleFiles {
    /// Members as columns.
    pub ensemble: PathBuf,
    pub h: PathBuf,
    pub r: PathBuf,
    pub y: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct KlArgs {
    /// Points, one per row.
    pub points: PathBuf,
    #[arg(long, default_value_t = KernelFamily::SquaredExponential, value_parser = parse_kernel)]
    pub kernel: KernelFamily,
    #[arg(long, default_value_t = 1.0)]
    pub variance: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lengthscale: f64,
    /// Keep this many leading modes.
    #[arg(long, conflicts_with = "energy")]
    pub modes: Option<usize>,
    /// Keep the fewest modes reaching this fraction of the trace (default 1).
    #[arg(long)]
    pub energy: Option<f64>,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub members: usize,
    /// Optional mean vector; zero otherwise.
    #[arg(long, value_name = "PATH")]
    pub mean: Option<PathBuf>,
    /// Write the samples (one per column) here.
    #[arg(long, value_name = "PATH")]
    pub matrix_out: Option<PathBuf>,
}

fn parse_perturbation(s: &str) -> Result<Perturbation, String> {
    s.parse().map_err(|e: enscgp_core::Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.parse().map_err(|e: enscgp_core::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        RunConfig::command().debug_assert();
    }

    #[test]
    fn defaults() {
        let c = RunConfig::try_parse_from(["enscgp", "equivalence"]).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.format, Format::Text);
        assert!(c.rank_tol.is_none());
        assert!(matches!(c.command, Command::Equivalence { count: 100, ref inputs } if inputs.is_empty()));
    }

    #[test]
    fn global_flags_after_subcommand() {
        let c = RunConfig::try_parse_from([
            "enscgp",
            "collapse",
            "--k-max",
            "9",
            "--seed",
            "4",
            "--format",
            "structured",
        ])
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.format, Format::Structured);
        assert!(matches!(c.command, Command::Collapse { k_max: 9, .. }));
    }

    #[test]
    fn rejects_unknown_modes() {
        assert!(RunConfig::try_parse_from(["enscgp", "kl-sample", "p", "--kernel", "cubic"]).is_err());
        assert!(RunConfig::try_parse_from(["enscgp", "enkf", "e", "h", "r", "y", "--perturbation", "x"]).is_err());
        assert!(RunConfig::try_parse_from(["enscgp", "kl-sample", "p", "--modes", "2", "--energy", "0.5"]).is_err());
    }
}
