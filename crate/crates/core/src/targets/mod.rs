//! Probabilistic models `p(x, z; θ)`.
//!
//! Each [`TargetModel`] exposes its log joint together with exact gradients in
//! the latent `z` and, where the model has them, in the parameters `θ`. The
//! funnel, banana and Gaussian targets are normalized and support exact
//! ancestral sampling, which the test-suite uses as ground truth.

mod multilevel;

pub use multilevel::Observation;

pub use multilevel::{synth_multilevel, MultilevelData, MultilevelLogit, SIGMA_FLOOR};

use crate::numkit::Rng;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("latent dimension mismatch: model has {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter length mismatch: model has {expected}, got {got}")]
    ThetaLength { expected: usize, got: usize },
    #[error("{0} does not support exact sampling")]
    NoExactSampler(&'static str),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// `p(z) = N(z_scale; 0, 1) · N(z_obs; 0, exp(a·z_scale)²)` with coordinate
/// order `(z_obs, z_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunnelParams {
    pub a: f64,
}

impl Default for FunnelParams {
    fn default() -> Self {
        Self { a: 1.0 }
    }
}

/// Twisted Gaussian: `(v₁, v₂) ~ N(0, diag(var1, var2))`,
/// `z₁ = v₁`, `z₂ = v₂ + b·v₁² − var1·b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BananaParams {
    pub b: f64,
    pub var1: f64,
    pub var2: f64,
}

impl Default for BananaParams {
    fn default() -> Self {
        Self {
            b: 0.02,
            var1: 100.0,
            var2: 1.0,
        }
    }
}

/// Multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAnalytic {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianAnalytic {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self, TargetError> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(TargetError::Invalid(format!("covariance must be {d}×{d}")));
        }
        let cov = DMatrix::from_fn(d, d, |r, c| cov[r][c]);
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| TargetError::Invalid("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean,
            cov,
            chol: l,
            precision,
            log_norm: -0.5 * d as f64 * LN_2PI - 0.5 * log_det,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self, TargetError> {
        let d = variances.len();
        let cov = (0..d)
            .map(|r| (0..d).map(|c| if r == c { variances[r] } else { 0.0 }).collect())
            .collect();
        Self::new(mean, cov)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        (0..d).map(|r| (0..d).map(|c| self.cov[(r, c)]).collect()).collect()
    }

    pub fn marginal_std(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)].sqrt()).collect()
    }

    fn centered(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(z.len(), z.iter().zip(&self.mean).map(|(a, b)| a - b))
    }
}

/// `z ~ N(θ, 1)`, `x_i | z ~ N(z, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateGaussian {
    pub observations: Vec<f64>,
}

impl ConjugateGaussian {
    /// Maximum-likelihood θ: the sample mean.
    pub fn mle(&self) -> f64 {
        self.observations.iter().sum::<f64>() / self.observations.len() as f64
    }

    /// Draw `z ~ N(θ, 1)` then `n` observations around it.
    pub fn simulate(rng: &mut Rng, n: usize, theta: f64) -> Self {
        let z = theta + rng.normal();
        Self {
            observations: (0..n).map(|_| z + rng.normal()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetModel {
    Funnel(FunnelParams),
    Banana(BananaParams),
    Gaussian(GaussianAnalytic),
    ConjugateGaussian(ConjugateGaussian),
    MultilevelLogit(MultilevelLogit),
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean) * (x - mean) / var
}

impl TargetModel {
    pub fn funnel(a: f64) -> Self {
        TargetModel::Funnel(FunnelParams { a })
    }

    pub fn banana(b: f64) -> Self {
        TargetModel::Banana(BananaParams { b, ..Default::default() })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetModel::Funnel(_) => "funnel",
            TargetModel::Banana(_) => "banana",
            TargetModel::Gaussian(_) => "gaussian",
            TargetModel::ConjugateGaussian(_) => "conjugate_gaussian",
            TargetModel::MultilevelLogit(_) => "multilevel_logit",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetModel::Funnel(_) | TargetModel::Banana(_) => 2,
            TargetModel::Gaussian(g) => g.mean.len(),
            TargetModel::ConjugateGaussian(_) => 1,
            TargetModel::MultilevelLogit(m) => m.n_groups(),
        }
    }

    pub fn theta_len(&self) -> usize {
        match self {
            TargetModel::ConjugateGaussian(_) => 1,
            TargetModel::MultilevelLogit(_) => 2,
            _ => 0,
        }
    }

    /// Starting value for the learnable parameters.
    pub fn initial_theta(&self) -> Vec<f64> {
        vec![0.0; self.theta_len()]
    }

    fn check(&self, z: &[f64], theta: &[f64]) -> Result<(), TargetError> {
        if z.len() != self.dim() {
            return Err(TargetError::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        if theta.len() != self.theta_len() {
            return Err(TargetError::ThetaLength {
                expected: self.theta_len(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn log_joint(&self, z: &[f64], theta: &[f64]) -> Result<f64, TargetError> {
        self.check(z, theta)?;
        Ok(match self {
            TargetModel::Funnel(p) => {
                let (obs, scale) = (z[0], z[1]);
                -LN_2PI - 0.5 * scale * scale - p.a * scale - 0.5 * obs * obs * (-2.0 * p.a * scale).exp()
            }
            TargetModel::Banana(p) => {
                let v1 = z[0];
                let v2 = z[1] - p.b * z[0] * z[0] + p.var1 * p.b;
                log_normal(v1, 0.0, p.var1) + log_normal(v2, 0.0, p.var2)
            }
            TargetModel::Gaussian(g) => {
                let c = g.centered(z);
                g.log_norm - 0.5 * c.dot(&(&g.precision * &c))
            }
            TargetModel::ConjugateGaussian(c) => {
                let prior = log_normal(z[0], theta[0], 1.0);
                prior + c.observations.iter().map(|x| log_normal(*x, z[0], 1.0)).sum::<f64>()
            }
            TargetModel::MultilevelLogit(m) => m.log_joint(z, theta),
        })
    }

    pub fn grad_z(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>, TargetError> {
        Ok(self.log_joint_and_grad_z(z, theta)?.1)
    }

    pub fn log_joint_and_grad_z(&self, z: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>), TargetError> {
        self.check(z, theta)?;
        Ok(match self {
            TargetModel::Funnel(p) => {
                let (obs, scale) = (z[0], z[1]);
                let w = (-2.0 * p.a * scale).exp();
                let value = -LN_2PI - 0.5 * scale * scale - p.a * scale - 0.5 * obs * obs * w;
                (value, vec![-obs * w, -scale - p.a + p.a * obs * obs * w])
            }
            TargetModel::Banana(p) => {
                let v1 = z[0];
                let v2 = z[1] - p.b * z[0] * z[0] + p.var1 * p.b;
                let value = log_normal(v1, 0.0, p.var1) + log_normal(v2, 0.0, p.var2);
                let dv2 = -v2 / p.var2;
                (value, vec![-v1 / p.var1 + dv2 * (-2.0 * p.b * z[0]), dv2])
            }
            TargetModel::Gaussian(g) => {
                let c = g.centered(z);
                let pc = &g.precision * &c;
                (g.log_norm - 0.5 * c.dot(&pc), pc.iter().map(|v| -v).collect())
            }
            TargetModel::ConjugateGaussian(c) => {
                let value = self.log_joint(z, theta)?;
                let g = -(z[0] - theta[0]) + c.observations.iter().map(|x| x - z[0]).sum::<f64>();
                (value, vec![g])
            }
            TargetModel::MultilevelLogit(m) => m.log_joint_and_grad_z(z, theta),
        })
    }

    /// `∇_θ log p(x, z; θ)`; empty for models without parameters.
    pub fn grad_theta(&self, z: &[f64], theta: &[f64]) -> Result<Vec<f64>, TargetError> {
        self.check(z, theta)?;
        Ok(match self {
            TargetModel::ConjugateGaussian(_) => vec![z[0] - theta[0]],
            TargetModel::MultilevelLogit(m) => m.grad_theta(z, theta),
            _ => Vec::new(),
        })
    }

    pub fn supports_exact_sampling(&self) -> bool {
        matches!(
            self,
            TargetModel::Funnel(_) | TargetModel::Banana(_) | TargetModel::Gaussian(_)
        )
    }

    /// One i.i.d. draw by ancestral sampling.
    pub fn exact_sample(&self, rng: &mut Rng) -> Result<Vec<f64>, TargetError> {
        match self {
            TargetModel::Funnel(p) => {
                let scale = rng.normal();
                let obs = (p.a * scale).exp() * rng.normal();
                Ok(vec![obs, scale])
            }
            TargetModel::Banana(p) => {
                let v1 = p.var1.sqrt() * rng.normal();
                let v2 = p.var2.sqrt() * rng.normal();
                Ok(vec![v1, v2 + p.b * v1 * v1 - p.var1 * p.b])
            }
            TargetModel::Gaussian(g) => {
                let eps = DVector::from_vec(rng.normal_vec(g.mean.len()));
                let x = &g.chol * eps;
                Ok(x.iter().zip(&g.mean).map(|(a, b)| a + b).collect())
            }
            other => Err(TargetError::NoExactSampler(other.name())),
        }
    }

    /// Closed-form marginal means and standard deviations, where known.
    pub fn analytic_moments(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            TargetModel::Funnel(p) => Some((vec![0.0, 0.0], vec![(p.a * p.a).exp(), 1.0])),
            TargetModel::Banana(p) => {
                // Var(b·v₁²) = 2b²·var1²
                let var2 = p.var2 + 2.0 * p.b * p.b * p.var1 * p.var1;
                Some((vec![0.0, 0.0], vec![p.var1.sqrt(), var2.sqrt()]))
            }
            TargetModel::Gaussian(g) => Some((g.mean.clone(), g.marginal_std())),
            _ => None,
        }
    }
}
