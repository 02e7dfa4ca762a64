//! Experiment configuration.

use crate::climb::{Method, TrainerConfig};
use crate::flows::FlowKind;
use crate::hmc::HmcConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunnelConfig {
    #[serde(default = "one")]
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BananaConfig {
    #[serde(default = "banana_b")]
    pub b: f64,
    #[serde(default = "banana_var1")]
    pub var1: f64,
    #[serde(default = "one")]
    pub var2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    #[serde(default = "gaussian_mean")]
    pub mean: Vec<f64>,
    /// Diagonal covariance; ignored when `cov` is given.
    #[serde(default = "gaussian_variances")]
    pub variances: Vec<f64>,
    #[serde(default)]
    pub cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateConfig {
    #[serde(default = "conjugate_n_obs")]
    pub n_obs: usize,
    #[serde(default = "one")]
    pub true_theta: f64,
    /// Seed for the simulated data; defaults to the run seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
    /// Fixed observations; when present nothing is simulated.
    #[serde(default)]
    pub observations: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelConfig {
    #[serde(default = "multilevel_groups")]
    pub n_groups: usize,
    #[serde(default = "multilevel_obs")]
    pub n_obs: usize,
    #[serde(default = "one")]
    pub sigma_group: f64,
    #[serde(default = "multilevel_beta")]
    pub beta: f64,
    #[serde(default)]
    pub data_seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}
fn banana_b() -> f64 {
    0.02
}
fn banana_var1() -> f64 {
    100.0
}
fn gaussian_mean() -> Vec<f64> {
    vec![1.0, -1.0]
}
fn gaussian_variances() -> Vec<f64> {
    vec![4.0, 0.25]
}
fn conjugate_n_obs() -> usize {
    50
}
fn multilevel_groups() -> usize {
    3
}
fn multilevel_obs() -> usize {
    300
}
fn multilevel_beta() -> f64 {
    0.5
}

/// Target choice with its parameters resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Funnel(FunnelConfig),
    Banana(BananaConfig),
    Gaussian(GaussianConfig),
    ConjugateGaussian(ConjugateConfig),
    MultilevelLogit(MultilevelConfig),
}

pub const TARGET_NAMES: &[&str] = &["funnel", "banana", "gaussian", "conjugate_gaussian", "multilevel_logit"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

fn params_of<T: DeserializeOwned>(name: &str, params: &Value) -> Result<T, ConfigError> {
    let v = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params.clone()
    };
    serde_json::from_value(v).map_err(|e| invalid(&format!("target.params ({name})"), e.to_string()))
}

impl TargetConfig {
    pub fn resolve(&self) -> Result<TargetSpec, ConfigError> {
        let p = &self.params;
        let n = self.name.as_str();
        Ok(match n {
            "funnel" => TargetSpec::Funnel(params_of(n, p)?),
            "banana" => TargetSpec::Banana(params_of(n, p)?),
            "gaussian" => TargetSpec::Gaussian(params_of(n, p)?),
            "conjugate_gaussian" => TargetSpec::ConjugateGaussian(params_of(n, p)?),
            "multilevel_logit" => TargetSpec::MultilevelLogit(params_of(n, p)?),
            other => {
                return Err(invalid(
                    "target.name",
                    format!("unknown target `{other}`, expected one of {}", TARGET_NAMES.join(", ")),
                ))
            }
        })
    }
}

impl TargetSpec {
    fn to_config(&self) -> TargetConfig {
        let (name, params) = match self {
            TargetSpec::Funnel(c) => ("funnel", serde_json::to_value(c)),
            TargetSpec::Banana(c) => ("banana", serde_json::to_value(c)),
            TargetSpec::Gaussian(c) => ("gaussian", serde_json::to_value(c)),
            TargetSpec::ConjugateGaussian(c) => ("conjugate_gaussian", serde_json::to_value(c)),
            TargetSpec::MultilevelLogit(c) => ("multilevel_logit", serde_json::to_value(c)),
        };
        TargetConfig {
            name: name.to_string(),
            params: params.expect("plain structs serialize"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default = "flow_kind")]
    pub kind: FlowKind,
    /// Number of IAF/RealNVP layers.
    #[serde(default = "two")]
    pub stack_depth: usize,
    #[serde(default = "sixteen")]
    pub hidden_width: usize,
    #[serde(default = "two")]
    pub hidden_layers: usize,
}

fn flow_kind() -> FlowKind {
    FlowKind::Affine
}
fn two() -> usize {
    2
}
fn sixteen() -> usize {
    16
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            kind: flow_kind(),
            stack_depth: 2,
            hidden_width: 16,
            hidden_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Draws from the fitted q for the summary moments (and per `table1.csv` group).
    #[serde(default = "posterior_samples")]
    pub n_posterior_samples: usize,
    /// Groups for `table1.csv`; zero disables it.
    #[serde(default)]
    pub n_groups_table1: usize,
}

fn posterior_samples() -> usize {
    100_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_posterior_samples: posterior_samples(),
            n_groups_table1: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl ExperimentConfig {
    /// Funnel with TSC and every other field at its default.
    pub fn defaults() -> Self {
        let mut c = Self {
            target: TargetConfig {
                name: "funnel".into(),
                params: Value::Null,
            },
            flow: FlowConfig::default(),
            trainer: TrainerConfig::new(Method::Tsc),
            hmc: HmcConfig::default(),
            seed: 0,
            output_dir: output_dir(),
            eval: EvalConfig::default(),
        };
        c.normalize().expect("defaults are valid");
        c
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut c: Self = serde_json::from_str(text)?;
        c.normalize()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates every section and fills target parameter defaults.
    pub fn normalize(&mut self) -> Result<(), ConfigError> {
        let spec = self.target.resolve()?;
        validate_target(&spec)?;
        self.target = spec.to_config();
        self.trainer
            .validate()
            .map_err(|e| invalid("trainer", e.to_string()))?;
        self.hmc.validate().map_err(|e| invalid("hmc", e.to_string()))?;
        let f = &self.flow;
        if matches!(f.kind, FlowKind::Iaf | FlowKind::RealNvp) {
            if f.stack_depth < 1 {
                return Err(invalid("flow.stack_depth", "must be ≥ 1"));
            }
            if f.hidden_width < 1 {
                return Err(invalid("flow.hidden_width", "must be ≥ 1"));
            }
        }
        if self.eval.n_groups_table1 > 0 && self.eval.n_posterior_samples < 2 {
            return Err(invalid("eval.n_posterior_samples", "need ≥ 2 draws per group"));
        }
        Ok(())
    }

    pub fn target_spec(&self) -> TargetSpec {
        self.target.resolve().expect("normalized config resolves")
    }
}

fn validate_target(spec: &TargetSpec) -> Result<(), ConfigError> {
    let positive = |field: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(invalid(field, format!("must be > 0, got {v}")))
        }
    };
    match spec {
        TargetSpec::Funnel(c) => {
            if !c.a.is_finite() {
                return Err(invalid("target.params.a", "must be finite"));
            }
        }
        TargetSpec::Banana(c) => {
            positive("target.params.var1", c.var1)?;
            positive("target.params.var2", c.var2)?;
            if !c.b.is_finite() {
                return Err(invalid("target.params.b", "must be finite"));
            }
        }
        TargetSpec::Gaussian(c) => {
            if c.mean.is_empty() {
                return Err(invalid("target.params.mean", "must be non-empty"));
            }
            if c.cov.is_none() {
                if c.variances.len() != c.mean.len() {
                    return Err(invalid("target.params.variances", "length must match mean"));
                }
                for v in &c.variances {
                    positive("target.params.variances", *v)?;
                }
            }
        }
        TargetSpec::ConjugateGaussian(c) => {
            let n = c.observations.as_ref().map_or(c.n_obs, Vec::len);
            if n == 0 {
                return Err(invalid("target.params.n_obs", "need at least one observation"));
            }
        }
        TargetSpec::MultilevelLogit(c) => {
            if c.n_groups < 2 {
                return Err(invalid("target.params.n_groups", "must be ≥ 2"));
            }
            if c.n_obs < c.n_groups {
                return Err(invalid("target.params.n_obs", "must be ≥ n_groups"));
            }
            if !(c.sigma_group >= 0.0 && c.sigma_group.is_finite()) {
                return Err(invalid("target.params.sigma_group", "must be ≥ 0"));
            }
        }
    }
    Ok(())
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}
