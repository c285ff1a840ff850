//! Cross-route equivalence reports and the repeated-reuse collapse study.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gaussian::{condition, kalman_gain, posterior_cov_via_hessian, GaussianLaw, ObservationModel};
use crate::map_qp::{build_qp, solve_qp};
use crate::psd::{relative_frobenius, RankTol, SymmetricMatrix};
use crate::rkhs::{rkhs_solve, DiscreteRkhs};
use crate::rng::NormalStream;

/// Pass threshold for every cross-route discrepancy.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// `‖a − b‖ / max(1, ‖a‖, ‖b‖)`.
pub fn relative_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / 1.0_f64.max(a.norm()).max(b.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanRoute {
    Schur,
    Qp,
    Rkhs,
    Gain,
}

impl MeanRoute {
    pub const ALL: [MeanRoute; 4] = [MeanRoute::Schur, MeanRoute::Qp, MeanRoute::Rkhs, MeanRoute::Gain];
}

impl fmt::Display for MeanRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanRoute::Schur => "schur",
            MeanRoute::Qp => "qp",
            MeanRoute::Rkhs => "rkhs",
            MeanRoute::Gain => "gain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceDescriptor {
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub descriptor: InstanceDescriptor,
    pub prior_mean: DVector<f64>,
    pub means: Vec<(MeanRoute, DVector<f64>)>,
    pub schur_covariance: SymmetricMatrix,
    pub hessian_covariance: SymmetricMatrix,
    /// Every unordered pair of routes, in `MeanRoute::ALL` order.
    pub mean_discrepancies: Vec<(MeanRoute, MeanRoute, f64)>,
    pub covariance_discrepancy: f64,
    /// Component of the Schur mean shift outside `Range(K)`, relative to
    /// `max(1, ‖shift‖)`.
    pub range_leakage: f64,
    pub posterior_rank: usize,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn mean(&self, route: MeanRoute) -> &DVector<f64> {
        &self
            .means
            .iter()
            .find(|(r, _)| *r == route)
            .expect("all routes present")
            .1
    }

    pub fn max_mean_discrepancy(&self) -> f64 {
        self.mean_discrepancies.iter().map(|t| t.2).fold(0.0, f64::max)
    }
}

/// Posterior mean through all four routes and covariance through both.
pub fn run_equivalence(prior: &GaussianLaw, obs: &ObservationModel, y: &DVector<f64>) -> Result<EquivalenceReport> {
    let schur = condition(prior, obs, y)?;
    let qp = solve_qp(&build_qp(prior, obs, y)?)?;
    let space = DiscreteRkhs::new(prior.cov_factor(), prior.rank_tol());
    let rkhs = rkhs_solve(&space, prior.mean(), obs, y)?;
    let gain = prior.mean() + kalman_gain(prior, obs)? * (y - obs.h() * prior.mean());

    let means = vec![
        (MeanRoute::Schur, schur.mean().clone()),
        (MeanRoute::Qp, qp.posterior_mean),
        (MeanRoute::Rkhs, rkhs),
        (MeanRoute::Gain, gain),
    ];
    let mut mean_discrepancies = Vec::with_capacity(6);
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            mean_discrepancies.push((means[i].0, means[j].0, relative_gap(&means[i].1, &means[j].1)));
        }
    }

    let schur_covariance = schur.covariance();
    let hessian_covariance = posterior_cov_via_hessian(prior, obs)?;
    let covariance_discrepancy = relative_frobenius(schur_covariance.as_matrix(), hessian_covariance.as_matrix());

    let shift = schur.mean() - prior.mean();
    let basis = prior.range_basis();
    let outside = &shift - basis * (basis.transpose() * &shift);
    let range_leakage = outside.norm() / shift.norm().max(1.0);

    let passed = mean_discrepancies.iter().all(|t| t.2 <= EQUIVALENCE_TOL) && covariance_discrepancy <= EQUIVALENCE_TOL;
    Ok(EquivalenceReport {
        descriptor: InstanceDescriptor {
            n: prior.dim(),
            m: obs.obs_dim(),
            rank: prior.rank(),
            seed: None,
        },
        prior_mean: prior.mean().clone(),
        means,
        schur_covariance,
        hessian_covariance,
        mean_discrepancies,
        covariance_discrepancy,
        range_leakage,
        posterior_rank: schur.rank(),
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    FullRank,
    RankOne,
    /// Empirical covariance of a small ensemble, rank `E − 1`.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsKind {
    /// More observations than state components.
    Tall,
    Wide,
    Zero,
}

/// A seeded linear–Gaussian test problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub prior_kind: PriorKind,
    pub obs_kind: ObsKind,
    pub prior: GaussianLaw,
    pub obs: ObservationModel,
    pub y: DVector<f64>,
}

fn pick(stream: &mut NormalStream, lo: usize, hi: usize) -> usize {
    lo + ((stream.next_uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

/// Deterministic instance for `seed`; the prior and observation shapes
/// cycle through every (prior kind, observation kind) combination.
pub fn corpus_instance(seed: u64) -> Instance {
    let prior_kind = [PriorKind::FullRank, PriorKind::RankOne, PriorKind::Ensemble][(seed % 3) as usize];
    let obs_kind = [ObsKind::Tall, ObsKind::Wide, ObsKind::Zero][((seed / 3) % 3) as usize];
    let mut s = NormalStream::new(seed);

    let (n, m) = match obs_kind {
        ObsKind::Tall => {
            let n = pick(&mut s, 3, 19);
            (n, pick(&mut s, n + 1, 20))
        }
        ObsKind::Wide => {
            let n = pick(&mut s, 3, 50);
            (n, pick(&mut s, 1, 20.min(n - 1)))
        }
        ObsKind::Zero => (pick(&mut s, 3, 50), pick(&mut s, 1, 20)),
    };

    let mean = s.vector(n);
    let prior = match prior_kind {
        PriorKind::FullRank => {
            let b = s.matrix(n, n);
            let k = SymmetricMatrix::from_square(&b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.25);
            GaussianLaw::new(mean, &k, RankTol::Auto)
        }
        PriorKind::RankOne => GaussianLaw::from_factor(mean, &s.matrix(n, 1), RankTol::Auto),
        PriorKind::Ensemble => {
            let members = pick(&mut s, 2, n.min(12));
            let draws = s.matrix(n, members);
            let centre = draws.column_mean();
            let mut anomaly = draws;
            for mut c in anomaly.column_iter_mut() {
                c -= &centre;
            }
            anomaly /= ((members - 1) as f64).sqrt();
            GaussianLaw::from_factor(mean, &anomaly, RankTol::Auto)
        }
    }
    .expect("generated prior is valid");

    let h = match obs_kind {
        ObsKind::Zero => DMatrix::zeros(m, n),
        _ => s.matrix(m, n),
    };
    let c = s.matrix(m, m);
    let r = &c * c.transpose() / m as f64 + DMatrix::identity(m, m) * 0.5;
    let obs = ObservationModel::new(h, &r).expect("generated noise covariance is SPD");
    let y = obs.h() * prior.mean() + s.vector(m) * 2.0;
    Instance {
        seed,
        prior_kind,
        obs_kind,
        prior,
        obs,
        y,
    }
}

/// Instances for seeds `0..count`.
pub fn equivalence_corpus(count: usize) -> Vec<Instance> {
    (0..count as u64).map(corpus_instance).collect()
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub reports: Vec<EquivalenceReport>,
    pub passed: usize,
    pub total: usize,
}

pub fn run_corpus(instances: &[Instance]) -> Result<CorpusSummary> {
    let mut reports = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut report = run_equivalence(&inst.prior, &inst.obs, &inst.y)?;
        report.descriptor.seed = Some(inst.seed);
        reports.push(report);
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    Ok(CorpusSummary {
        total: reports.len(),
        passed,
        reports,
    })
}

/// Metadata label carried by every collapse trace.
pub const COLLAPSE_LABEL: &str = "double-counting demonstration";
pub const MAX_REUSE: usize = 1_000_000;
/// Recursive conditioning is replayed only up to this many reuses.
pub const RECURSIVE_CHECK_LIMIT: usize = 100;

#[derive(Debug, Clone)]
pub struct CollapseStep {
    pub k: usize,
    pub mean: DVector<f64>,
    pub covariance: SymmetricMatrix,
    pub spectral_norm: f64,
}

/// Result of conditioning `k` times on the same realized `y`.
///
/// This is not a posterior: it shows what treating one observation as `k`
/// independent ones does to the covariance.
#[derive(Debug, Clone)]
pub struct CollapseTrace {
    pub label: &'static str,
    pub steps: Vec<CollapseStep>,
    /// Last `k` replayed by recursive conditioning.
    pub recursive_checked_through: usize,
    /// Largest relative gap between closed form and recursion, over means
    /// and covariances.
    pub max_recursive_discrepancy: f64,
}

/// `K_k = (K₀⁻¹ + k HᵀR⁻¹H)⁻¹`, `m_k = K_k (K₀⁻¹ m₀ + k HᵀR⁻¹ y)` for
/// `k = 0..=k_max`, cross-checked against `k` successive calls to
/// [`condition`] for `k ≤ 100`.
pub fn repeated_reuse(
    prior: &GaussianLaw,
    obs: &ObservationModel,
    y: &DVector<f64>,
    k_max: usize,
) -> Result<CollapseTrace> {
    obs.check_state(prior.dim())?;
    obs.check_data(y)?;
    let n = prior.dim();
    if prior.rank() != n {
        return Err(Error::Precondition(format!(
            "repeated reuse needs an SPD prior covariance (rank {} < {n})",
            prior.rank()
        )));
    }
    if k_max == 0 || k_max > MAX_REUSE {
        return Err(Error::InvalidArgument(format!(
            "k_max must be in 1..={MAX_REUSE}, got {k_max}"
        )));
    }

    let prior_precision = prior.cov_factor().pseudoinverse(prior.rank_tol());
    let information = obs.information();
    let prior_shift = prior_precision.as_matrix() * prior.mean();
    let data_shift = obs.h().transpose() * obs.whiten(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
    let data_shift = data_shift.column(0).into_owned();

    let mut steps = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let kf = k as f64;
        let precision = prior_precision.as_matrix() + information.as_matrix() * kf;
        let chol = Cholesky::new(precision).ok_or(Error::NotSpd("accumulated precision"))?;
        let covariance = SymmetricMatrix::from_square(chol.inverse());
        let mean = covariance.as_matrix() * (&prior_shift + &data_shift * kf);
        let spectral_norm = SymmetricEigen::new(covariance.as_matrix().clone())
            .eigenvalues
            .iter()
            .fold(0.0_f64, |a, v| a.max(*v));
        steps.push(CollapseStep {
            k,
            mean,
            covariance,
            spectral_norm,
        });
    }

    let checked = k_max.min(RECURSIVE_CHECK_LIMIT);
    let mut law = prior.clone();
    let mut worst = relative_gap(law.mean(), &steps[0].mean).max(relative_frobenius(
        law.covariance().as_matrix(),
        steps[0].covariance.as_matrix(),
    ));
    for step in &steps[1..=checked] {
        law = condition(&law, obs, y)?;
        let gap = relative_gap(law.mean(), &step.mean).max(relative_frobenius(
            law.covariance().as_matrix(),
            step.covariance.as_matrix(),
        ));
        worst = worst.max(gap);
    }

    Ok(CollapseTrace {
        label: COLLAPSE_LABEL,
        steps,
        recursive_checked_through: checked,
        max_recursive_discrepancy: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psd::symmetrize;
    use nalgebra::{dmatrix, dvector};

    fn scalar(h: f64) -> (GaussianLaw, ObservationModel) {
        (
            GaussianLaw::new(dvector![0.0], &SymmetricMatrix::from_diagonal(&[1.0]), RankTol::Auto).unwrap(),
            ObservationModel::new(dmatrix![h], &dmatrix![1.0]).unwrap(),
        )
    }

    #[test]
    fn scalar_equivalence_closed_form() {
        let (prior, obs) = scalar(1.0);
        let r = run_equivalence(&prior, &obs, &dvector![2.0]).unwrap();
        for route in MeanRoute::ALL {
            assert!((r.mean(route)[0] - 1.0).abs() <= 1e-12);
        }
        assert!((r.schur_covariance.as_matrix()[(0, 0)] - 0.5).abs() <= 1e-12);
        assert!((r.hessian_covariance.as_matrix()[(0, 0)] - 0.5).abs() <= 1e-12);
        assert!(r.max_mean_discrepancy() <= 1e-12);
        assert!(r.covariance_discrepancy <= 1e-12);
        assert!(r.passed);
        assert_eq!(r.mean_discrepancies.len(), 6);
    }

    #[test]
    fn no_information_instance() {
        let k = SymmetricMatrix::from_diagonal(&[2.0, 0.5, 1.0]);
        let prior = GaussianLaw::new(dvector![1.0, 2.0, 3.0], &k, RankTol::Auto).unwrap();
        let obs = ObservationModel::new(DMatrix::zeros(2, 3), &DMatrix::identity(2, 2)).unwrap();
        let r = run_equivalence(&prior, &obs, &dvector![-4.0, 4.0]).unwrap();
        for route in MeanRoute::ALL {
            assert!((r.mean(route) - prior.mean()).amax() <= 1e-14);
        }
        assert!(relative_frobenius(r.schur_covariance.as_matrix(), k.as_matrix()) <= 1e-14);
        assert!(r.passed);
    }

    #[test]
    fn corpus_covers_every_shape() {
        let corpus = equivalence_corpus(9);
        for inst in &corpus {
            let (n, m) = (inst.prior.dim(), inst.obs.obs_dim());
            assert!((3..=50).contains(&n) && (1..=20).contains(&m));
            match inst.obs_kind {
                ObsKind::Tall => assert!(m > n),
                ObsKind::Wide => assert!(m < n),
                ObsKind::Zero => assert!(inst.obs.h().iter().all(|&v| v == 0.0)),
            }
            match inst.prior_kind {
                PriorKind::FullRank => assert_eq!(inst.prior.rank(), n),
                PriorKind::RankOne => assert_eq!(inst.prior.rank(), 1),
                PriorKind::Ensemble => assert!(inst.prior.rank() < n),
            }
        }
        let again = corpus_instance(4);
        assert_eq!(again.y, corpus[4].y);
    }

    #[test]
    fn collapse_scalar_closed_form() {
        let (prior, obs) = scalar(1.0);
        let t = repeated_reuse(&prior, &obs, &dvector![1.0], 9).unwrap();
        assert_eq!(t.label, COLLAPSE_LABEL);
        assert_eq!(t.steps.len(), 10);
        assert!((t.steps[1].covariance.as_matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((t.steps[9].covariance.as_matrix()[(0, 0)] - 0.1).abs() < 1e-15);
        for s in &t.steps {
            let k = s.k as f64;
            assert!((s.mean[0] - k / (1.0 + k)).abs() < 1e-15);
        }
        assert!(t.max_recursive_discrepancy < 1e-8);
        for w in t.steps.windows(2) {
            assert!(w[1].spectral_norm < w[0].spectral_norm);
        }
    }

    #[test]
    fn collapse_without_information() {
        let (prior, obs) = scalar(0.0);
        let t = repeated_reuse(&prior, &obs, &dvector![5.0], 20).unwrap();
        for s in &t.steps {
            assert_eq!(s.covariance.as_matrix()[(0, 0)], 1.0);
            assert_eq!(s.mean[0], 0.0);
        }
    }

    #[test]
    fn collapse_with_full_observation() {
        // With H = I, K_k = (K₀⁻¹ + k R⁻¹)⁻¹ ⪯ R / k, so ‖K_k‖ ≤ λ_max(R) / k,
        // and m_k − y = K_k K₀⁻¹ (m₀ − y).
        let k0 = dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, 0.2; 0.0, 0.2, 0.7];
        let prior = GaussianLaw::new(dvector![1.0, -1.0, 0.5], &symmetrize(&k0).unwrap(), RankTol::Auto).unwrap();
        let r = dmatrix![0.5, 0.1, 0.0; 0.1, 0.8, 0.0; 0.0, 0.0, 0.3];
        let obs = ObservationModel::new(DMatrix::identity(3, 3), &r).unwrap();
        let y = dvector![3.0, 2.0, -1.0];
        let k = 10_000;
        let t = repeated_reuse(&prior, &obs, &y, k).unwrap();
        let r_max = SymmetricEigen::new(r).eigenvalues.max();
        let last = &t.steps[k];
        assert!(last.spectral_norm <= 1.01 * r_max / k as f64);
        let k0_inv_max = 1.0 / SymmetricEigen::new(k0).eigenvalues.min();
        let bound = last.spectral_norm * k0_inv_max * (prior.mean() - &y).norm();
        assert!((&last.mean - &y).norm() <= 1.01 * bound);
        assert!(t.max_recursive_discrepancy <= 1e-8);
        for w in t.steps.windows(2) {
            assert!(w[1].spectral_norm < w[0].spectral_norm);
        }
    }

    #[test]
    fn single_reuse_matches_condition() {
        let inst = corpus_instance(0);
        let t = repeated_reuse(&inst.prior, &inst.obs, &inst.y, 1).unwrap();
        let post = condition(&inst.prior, &inst.obs, &inst.y).unwrap();
        assert!(relative_gap(&t.steps[1].mean, post.mean()) <= 1e-10);
        assert!(relative_frobenius(t.steps[1].covariance.as_matrix(), post.covariance().as_matrix()) <= 1e-10);
    }

    #[test]
    fn collapse_preconditions() {
        let singular = GaussianLaw::new(
            DVector::zeros(2),
            &SymmetricMatrix::from_diagonal(&[1.0, 0.0]),
            RankTol::Auto,
        )
        .unwrap();
        let obs = ObservationModel::new(DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            repeated_reuse(&singular, &obs, &dvector![1.0, 1.0], 3),
            Err(Error::Precondition(_))
        ));
        let (prior, obs) = scalar(1.0);
        assert!(repeated_reuse(&prior, &obs, &dvector![1.0], 0).is_err());
        assert!(repeated_reuse(&prior, &obs, &dvector![1.0], MAX_REUSE + 1).is_err());
    }
}
