//! Kernel Gram matrices on point sets and truncated Karhunen–Loève sampling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::psd::{eig_psd, RankTol, SymmetricMatrix};
use crate::rng::NormalStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    SquaredExponential,
    /// Matérn-1/2.
    Exponential,
    Linear,
    White,
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" | "squared-exponential" | "rbf" => Ok(KernelFamily::SquaredExponential),
            "exp" | "exponential" | "matern12" => Ok(KernelFamily::Exponential),
            "linear" => Ok(KernelFamily::Linear),
            "white" => Ok(KernelFamily::White),
            other => Err(Error::InvalidArgument(format!("unknown kernel family {other:?}"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::SquaredExponential => "squared-exponential",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Linear => "linear",
            KernelFamily::White => "white",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    variance: f64,
    lengthscale: f64,
}

impl KernelSpec {
    /// `lengthscale` is ignored for the linear and white families but must
    /// still be positive.
    pub fn new(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(KernelSpec {
            family,
            variance,
            lengthscale,
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    fn eval(&self, i: usize, j: usize, points: &DMatrix<f64>) -> f64 {
        let xi = points.row(i);
        let xj = points.row(j);
        match self.family {
            KernelFamily::SquaredExponential => {
                let d2 = (xi - xj).norm_squared();
                self.variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelFamily::Exponential => self.variance * (-(xi - xj).norm() / self.lengthscale).exp(),
            KernelFamily::Linear => self.variance * xi.dot(&xj),
            KernelFamily::White => {
                if i == j {
                    self.variance
                } else {
                    0.0
                }
            }
        }
    }
}

/// `K_ij = k(x_i, x_j)` for points stored one per row.
pub fn gram_matrix(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("gram_matrix needs at least one point".into()));
    }
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = spec.eval(i, j, points);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(SymmetricMatrix::from_square(k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Keep the leading `r` modes.
    Modes(usize),
    /// Keep the fewest modes whose eigenvalues reach this fraction of the trace.
    Energy(f64),
}

/// Leading eigenpairs of a Gram matrix plus a mean.
#[derive(Debug, Clone, PartialEq)]
pub struct KlModes {
    eigenvalues: DVector<f64>,
    modes: DMatrix<f64>,
    mean: DVector<f64>,
    residual: f64,
}

impl KlModes {
    /// Builds modes directly; eigenvalues must be nonnegative.
    pub fn new(eigenvalues: DVector<f64>, modes: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        if modes.ncols() != eigenvalues.len() {
            return Err(Error::dim("KL modes", eigenvalues.len(), modes.ncols()));
        }
        if modes.nrows() != mean.len() {
            return Err(Error::dim("KL mean", modes.nrows(), mean.len()));
        }
        if let Some(&bad) = eigenvalues.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "KL eigenvalue {bad} is not a nonnegative real"
            )));
        }
        Ok(KlModes {
            eigenvalues,
            modes,
            mean,
            residual: f64::NAN,
        })
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.modes.nrows() {
            return Err(Error::dim("KL mean", self.modes.nrows(), mean.len()));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `‖K − ΨΛΨᵀ‖_F / ‖K‖_F` measured at truncation; NaN for hand-built modes.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn reconstruct(&self) -> SymmetricMatrix {
        let mut scaled = self.modes.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        SymmetricMatrix::from_square(scaled * self.modes.transpose())
    }
}

/// Truncated spectral expansion of `K` with zero mean.
pub fn kl_truncate(k: &SymmetricMatrix, truncation: Truncation, tol: RankTol) -> Result<KlModes> {
    let spec = eig_psd(k, tol)?;
    let keep = match truncation {
        Truncation::Modes(r) => {
            if r == 0 || r > spec.rank {
                return Err(Error::InvalidArgument(format!(
                    "truncation rank {r} outside 1..={}",
                    spec.rank
                )));
            }
            r
        }
        Truncation::Energy(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) || spec.rank == 0 {
                return Err(Error::InvalidArgument(format!(
                    "energy fraction {fraction} outside (0, 1] or kernel has rank 0"
                )));
            }
            let total: f64 = spec.values.iter().sum();
            let mut acc = 0.0;
            let mut r = spec.rank;
            for (i, v) in spec.values.iter().enumerate() {
                acc += v;
                if acc >= fraction * total {
                    r = i + 1;
                    break;
                }
            }
            r
        }
    };
    let mut modes = KlModes::new(
        spec.values.rows(0, keep).into_owned(),
        spec.vectors.columns(0, keep).into_owned(),
        DVector::zeros(k.dim()),
    )?;
    let norm = k.frobenius_norm();
    modes.residual = if norm == 0.0 {
        0.0
    } else {
        (k.as_matrix() - modes.reconstruct().as_matrix()).norm() / norm
    };
    Ok(modes)
}

/// `count` members `m + Ψ Λ^{1/2} z`, one per column, with `z ~ N(0, I)`
/// drawn member by member from a single seeded stream.
pub fn sample_kl(modes: &KlModes, count: usize, seed: u64) -> DMatrix<f64> {
    let mut stream = NormalStream::new(seed);
    let scale = modes.eigenvalues.map(f64::sqrt);
    let mut out = DMatrix::zeros(modes.dim(), count);
    for mut col in out.column_iter_mut() {
        let z = stream.vector(modes.rank()).component_mul(&scale);
        col.copy_from(&(&modes.mean + &modes.modes * z));
    }
    out
}
