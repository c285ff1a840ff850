//! Ensemble statistics, the ensemble-conditioned Gaussian law and the
//! stochastic (perturbed-observation) EnKF analysis step.
//!
//! The empirical covariance uses divisor `E − 1`; its square root is the
//! anomaly matrix `A = (E−1)^{-1/2} [f⁽¹⁾ − f̄, …, f⁽ᴱ⁾ − f̄]`, so the prior
//! has rank at most `E − 1` and every posterior mean shift stays in the
//! ensemble span.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{condition, gain_from_factor, GaussianLaw, ObservationModel};
use crate::psd::{canonicalize_factor_with, first_non_finite, PsdFactor, RankTol};
use crate::rng::NormalStream;

/// Members stored one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        if let Some((row, col)) = first_non_finite(&members) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn sample_mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub anomaly: DMatrix<f64>,
    pub covariance_factor: PsdFactor,
    rank_tol: RankTol,
}

impl EnsembleStats {
    /// The Gaussian prior `N(f̄, A Aᵀ)`.
    pub fn prior_law(&self) -> GaussianLaw {
        GaussianLaw::from_parts(self.mean.clone(), self.covariance_factor.clone(), self.rank_tol)
    }

    pub fn rank(&self) -> usize {
        self.covariance_factor.rank()
    }
}

pub fn ensemble_stats(ens: &Ensemble) -> EnsembleStats {
    ensemble_stats_with(ens, RankTol::Auto)
}

pub fn ensemble_stats_with(ens: &Ensemble, tol: RankTol) -> EnsembleStats {
    let mean = ens.sample_mean();
    let mut anomaly = ens.members.clone();
    for mut col in anomaly.column_iter_mut() {
        col -= &mean;
    }
    anomaly /= ((ens.size() - 1) as f64).sqrt();
    let covariance_factor = canonicalize_factor_with(&anomaly, tol);
    EnsembleStats {
        mean,
        anomaly,
        covariance_factor,
        rank_tol: tol,
    }
}

/// Conditional Gaussian law with the ensemble's empirical moments as prior.
pub fn ens_cgp(ens: &Ensemble, obs: &ObservationModel, y: &DVector<f64>) -> Result<GaussianLaw> {
    ens_cgp_with(ens, obs, y, RankTol::Auto, Ok)
}

/// As [`ens_cgp`], with a hook that may replace the empirical prior (for
/// example a localized or inflated covariance) before conditioning.
pub fn ens_cgp_with<F>(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    tol: RankTol,
    prior_hook: F,
) -> Result<GaussianLaw>
where
    F: FnOnce(GaussianLaw) -> Result<GaussianLaw>,
{
    let prior = prior_hook(ensemble_stats_with(ens, tol).prior_law())?;
    condition(&prior, obs, y)
}

/// `f̄ + G (y − H f̄)` with the gain built from the raw anomaly matrix.
pub fn enkf_mean_update(stats: &EnsembleStats, obs: &ObservationModel, y: &DVector<f64>) -> Result<DVector<f64>> {
    obs.check_state(stats.mean.len())?;
    obs.check_data(y)?;
    let gain = gain_from_factor(&stats.anomaly, obs)?;
    Ok(&stats.mean + gain * (y - obs.h() * &stats.mean))
}

/// How observation perturbations are drawn in [`enkf_perturbed_obs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturbation {
    /// `η⁽ᵉ⁾ ~ N(0, R)` independently per member.
    #[default]
    Raw,
    /// Raw draws with their ensemble average subtracted.
    MeanCorrected,
    /// `η = 0`: every member receives the deterministic mean update.
    Disabled,
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Perturbation::Raw),
            "mean-corrected" => Ok(Perturbation::MeanCorrected),
            "none" | "disabled" => Ok(Perturbation::Disabled),
            other => Err(Error::InvalidArgument(format!("unknown perturbation mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Perturbation::Raw => "raw",
            Perturbation::MeanCorrected => "mean-corrected",
            Perturbation::Disabled => "none",
        })
    }
}

/// Stochastic EnKF analysis: `f⁽ᵉ⁾ ← f⁽ᵉ⁾ + G (y + η⁽ᵉ⁾ − H f⁽ᵉ⁾)`.
///
/// `G` comes from the prior ensemble and is shared by all members. Member
/// `e` draws its perturbation from substream `e` of `seed`.
pub fn enkf_perturbed_obs(
    ens: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    seed: u64,
    perturbation: Perturbation,
) -> Result<Ensemble> {
    obs.check_state(ens.dim())?;
    obs.check_data(y)?;
    let stats = ensemble_stats(ens);
    let gain = gain_from_factor(&stats.anomaly, obs)?;
    let m = obs.obs_dim();
    let size = ens.size();

    let mut perturbed = DMatrix::zeros(m, size);
    if perturbation != Perturbation::Disabled {
        let l = obs.noise_cholesky();
        for (e, mut col) in perturbed.column_iter_mut().enumerate() {
            let z = NormalStream::substream(seed, e as u64).vector(m);
            col.copy_from(&(&l * z));
        }
        if perturbation == Perturbation::MeanCorrected {
            let bar = perturbed.column_mean();
            for mut col in perturbed.column_iter_mut() {
                col -= &bar;
            }
        }
    }
    for mut col in perturbed.column_iter_mut() {
        col += y;
    }
    let innovations = perturbed - obs.h() * &ens.members;
    Ensemble::new(&ens.members + gain * innovations)
}
