use super::{TargetError, TargetModel, LN_2PI};
use crate::numkit::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Lower bound on the group-level standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// One row of the synthetic survey: group index, covariate and binary response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub group: usize,
    pub covariate: f64,
    pub response: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelData {
    pub n_groups: usize,
    pub rows: Vec<Observation>,
}

impl MultilevelData {
    /// CSV with header `group,covariate,response`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, n_groups: usize) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<Result<Vec<Observation>, _>>()?;
        Ok(Self { n_groups, rows })
    }
}

/// Random-intercept logistic regression with one fixed effect:
/// `x_i ~ Bernoulli(logit⁻¹(z_{g[i]} + β·u_i))`, `z_g ~ N(0, σ²)`,
/// with parameters `θ = (log σ, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelLogit {
    data: MultilevelData,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl MultilevelLogit {
    pub fn new(data: MultilevelData) -> Result<Self, TargetError> {
        if data.n_groups < 1 {
            return Err(TargetError::Invalid("need at least one group".into()));
        }
        if let Some(bad) = data.rows.iter().find(|r| r.group >= data.n_groups || r.response > 1) {
            return Err(TargetError::Invalid(format!(
                "row with group {} / response {} is out of range",
                bad.group, bad.response
            )));
        }
        Ok(Self { data })
    }

    pub fn n_groups(&self) -> usize {
        self.data.n_groups
    }

    pub fn data(&self) -> &MultilevelData {
        &self.data
    }

    /// `σ = max(exp(log σ), floor)` and `dσ/dlogσ · 1/σ` (1, or 0 on the floor).
    fn sigma(log_sigma: f64) -> (f64, f64) {
        let s = log_sigma.exp();
        if s > SIGMA_FLOOR {
            (s, 1.0)
        } else {
            (SIGMA_FLOOR, 0.0)
        }
    }

    pub(super) fn log_joint(&self, z: &[f64], theta: &[f64]) -> f64 {
        let (sigma, _) = Self::sigma(theta[0]);
        let beta = theta[1];
        let lik: f64 = self
            .data
            .rows
            .iter()
            .map(|r| {
                let eta = z[r.group] + beta * r.covariate;
                f64::from(r.response) * eta - softplus(eta)
            })
            .sum();
        let prior: f64 = z
            .iter()
            .map(|zg| -0.5 * LN_2PI - sigma.ln() - 0.5 * zg * zg / (sigma * sigma))
            .sum();
        lik + prior
    }

    pub(super) fn log_joint_and_grad_z(&self, z: &[f64], theta: &[f64]) -> (f64, Vec<f64>) {
        let (sigma, _) = Self::sigma(theta[0]);
        let beta = theta[1];
        let var = sigma * sigma;
        let mut grad: Vec<f64> = z.iter().map(|zg| -zg / var).collect();
        let mut value: f64 = z
            .iter()
            .map(|zg| -0.5 * LN_2PI - sigma.ln() - 0.5 * zg * zg / var)
            .sum();
        for r in &self.data.rows {
            let eta = z[r.group] + beta * r.covariate;
            let y = f64::from(r.response);
            value += y * eta - softplus(eta);
            grad[r.group] += y - sigmoid(eta);
        }
        (value, grad)
    }

    pub(super) fn grad_theta(&self, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let (sigma, active) = Self::sigma(theta[0]);
        let beta = theta[1];
        let var = sigma * sigma;
        let d_log_sigma = active * z.iter().map(|zg| zg * zg / var - 1.0).sum::<f64>();
        let d_beta: f64 = self
            .data
            .rows
            .iter()
            .map(|r| {
                let eta = z[r.group] + beta * r.covariate;
                (f64::from(r.response) - sigmoid(eta)) * r.covariate
            })
            .sum();
        vec![d_log_sigma, d_beta]
    }
}

/// Simulate a balanced dataset: observation `i` belongs to group `i mod n_groups`,
/// covariates are standard normal, group effects are `N(0, σ_group²)`.
pub fn synth_multilevel(
    rng: &mut Rng,
    n_groups: usize,
    n_obs: usize,
    sigma_group: f64,
    beta: f64,
) -> Result<(MultilevelData, TargetModel), TargetError> {
    if n_groups < 2 {
        return Err(TargetError::Invalid(format!("n_groups must be ≥ 2, got {n_groups}")));
    }
    if n_obs < n_groups {
        return Err(TargetError::Invalid(format!(
            "n_obs ({n_obs}) must be ≥ n_groups ({n_groups})"
        )));
    }
    if !(sigma_group >= 0.0) || !sigma_group.is_finite() || !beta.is_finite() {
        return Err(TargetError::Invalid("sigma_group must be ≥ 0 and beta finite".into()));
    }
    let effects: Vec<f64> = (0..n_groups).map(|_| sigma_group * rng.normal()).collect();
    let rows = (0..n_obs)
        .map(|i| {
            let group = i % n_groups;
            let covariate = rng.normal();
            let p = sigmoid(effects[group] + beta * covariate);
            Observation {
                group,
                covariate,
                response: u8::from(rng.bernoulli(p)),
            }
        })
        .collect();
    let data = MultilevelData { n_groups, rows };
    let model = TargetModel::MultilevelLogit(MultilevelLogit::new(data.clone())?);
    Ok((data, model))
}
