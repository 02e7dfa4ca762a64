//! Training loops: transport score climbing, plain-space score climbing and
//! reparameterized ELBO maximization.
//!
//! All three share one [`Trainer`]. Each call to [`Trainer::step`] performs a
//! single iteration and returns a [`TraceRecord`].

use crate::flows::{FlowError, TransportMap};
use crate::hmc::{hmc_step, ChainState, HmcConfig, HmcError, LatentDensity, WarpedDensity};
use crate::numkit::{norm, AdamState, NumError, Rng};
use crate::targets::{TargetError, TargetModel};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// RNG stream for the Markov chain (and the ELBO base draws).
pub const CHAIN_STREAM: u64 = 0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Hmc(#[from] HmcError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("trace sink failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tsc,
    Msc,
    #[serde(rename = "elbo", alias = "elbo_vi")]
    ElboVi,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tsc => "tsc",
            Method::Msc => "msc",
            Method::ElboVi => "elbo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    #[serde(default = "defaults::iterations")]
    pub iterations: u64,
    #[serde(default = "defaults::lr")]
    pub lr_lambda: f64,
    #[serde(default = "defaults::lr")]
    pub lr_theta: f64,
    #[serde(default = "defaults::decay")]
    pub decay: f64,
    /// Iterations at the start of the run during which the map is not updated.
    #[serde(default = "defaults::freeze_window")]
    pub freeze_window: u64,
}

mod defaults {
    pub fn iterations() -> u64 {
        20_000
    }
    pub fn lr() -> f64 {
        3e-3
    }
    pub fn decay() -> f64 {
        3e-4
    }
    pub fn freeze_window() -> u64 {
        200
    }
}

impl TrainerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            iterations: defaults::iterations(),
            lr_lambda: defaults::lr(),
            lr_theta: defaults::lr(),
            decay: defaults::decay(),
            freeze_window: defaults::freeze_window(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be ≥ 1".into());
        }
        if !(self.lr_lambda > 0.0 && self.lr_lambda.is_finite()) {
            return bad(format!("lr_lambda must be > 0, got {}", self.lr_lambda));
        }
        if !(self.lr_theta > 0.0 && self.lr_theta.is_finite()) {
            return bad(format!("lr_theta must be > 0, got {}", self.lr_theta));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be ≥ 0, got {}", self.decay));
        }
        Ok(())
    }
}

/// Counters for everything the trainer tolerated instead of aborting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub skipped_lambda: u64,
    pub skipped_theta: u64,
    pub divergences: u64,
    /// Map updates rolled back because the retained sample could not be pulled back.
    pub rewarp_failures: u64,
    pub reinitializations: u64,
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: u64,
    pub accepted: bool,
    pub step_size: f64,
    pub leapfrog: usize,
    /// Log density the sampler targets at the retained state.
    pub warped_logp: f64,
    /// `log p(x, z; θ)` at the retained latent sample.
    pub latent_logp: f64,
    pub divergent: bool,
    /// `‖λ‖₂` after the update.
    pub lambda_norm: f64,
    /// θ after the update.
    pub theta: Vec<f64>,
    /// Latent sample `z` the updates used.
    pub z: Vec<f64>,
    pub lambda_updated: bool,
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct RunState {
    pub map: TransportMap,
    pub target: TargetModel,
    pub theta: Vec<f64>,
    pub chain: ChainState,
    pub adam_lambda: AdamState,
    pub adam_theta: AdamState,
    pub iteration: u64,
    pub events: Events,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainerConfig,
    state: RunState,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Trainer {
    pub fn new(
        config: TrainerConfig,
        hmc: HmcConfig,
        target: TargetModel,
        map: TransportMap,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if map.dim() != target.dim() {
            return Err(TrainError::Config(format!(
                "map dimension {} does not match target dimension {}",
                map.dim(),
                target.dim()
            )));
        }
        let chain = ChainState::new(target.dim(), hmc, Rng::with_stream(seed, CHAIN_STREAM))?;
        let theta = target.initial_theta();
        Ok(Self {
            config,
            state: RunState {
                adam_lambda: AdamState::new(map.param_count(), config.lr_lambda, config.decay),
                adam_theta: AdamState::new(theta.len(), config.lr_theta, config.decay),
                map,
                target,
                theta,
                chain,
                iteration: 0,
                events: Events::default(),
            },
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// Whether iteration `iter` falls in the initial map-freeze window.
    pub fn frozen_at(&self, iter: u64) -> bool {
        iter < self.config.freeze_window
    }

    pub fn step(&mut self) -> Result<TraceRecord, TrainError> {
        let rec = match self.config.method {
            Method::Tsc => self.sampler_step(true)?,
            Method::Msc => self.sampler_step(false)?,
            Method::ElboVi => self.elbo_step()?,
        };
        self.state.iteration += 1;
        Ok(rec)
    }

    /// Runs the remaining iterations, handing each record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self, &TraceRecord) -> std::io::Result<()>,
    {
        while !self.is_done() {
            let rec = self.step()?;
            sink(self, &rec)?;
        }
        Ok(())
    }

    /// Adam step on the map from the gradient of `log q` (ascent direction).
    /// Returns the previous parameters and optimizer state when an update was made.
    fn update_lambda(&mut self, ascent: Result<Vec<f64>, FlowError>) -> Option<(Vec<f64>, AdamState)> {
        let s = &mut self.state;
        let grad = match ascent {
            Ok(g) if all_finite(&g) => g,
            _ => {
                s.events.skipped_lambda += 1;
                return None;
            }
        };
        let old = s.map.params();
        let old_adam = s.adam_lambda.clone();
        let mut p = old.clone();
        let loss: Vec<f64> = grad.iter().map(|g| -g).collect();
        if s.adam_lambda.step(&mut p, &loss).is_err() || !all_finite(&p) || s.map.set_params(&p).is_err() {
            s.adam_lambda = old_adam;
            s.events.skipped_lambda += 1;
            return None;
        }
        Some((old, old_adam))
    }

    fn update_theta(&mut self, z: &[f64]) {
        let s = &mut self.state;
        if s.theta.is_empty() {
            return;
        }
        match s.target.grad_theta(z, &s.theta) {
            Ok(g) if all_finite(&g) => {
                let loss: Vec<f64> = g.iter().map(|v| -v).collect();
                let mut next = s.theta.clone();
                if s.adam_theta.step(&mut next, &loss).is_ok() && all_finite(&next) {
                    s.theta = next;
                } else {
                    s.events.skipped_theta += 1;
                }
            }
            _ => s.events.skipped_theta += 1,
        }
    }

    fn sampler_step(&mut self, warped: bool) -> Result<TraceRecord, TrainError> {
        let iter = self.state.iteration;
        let s = &mut self.state;
        let out = if warped {
            let density = WarpedDensity {
                target: &s.target,
                theta: &s.theta,
                map: &s.map,
            };
            hmc_step(&density, &mut s.chain)?
        } else {
            let density = LatentDensity {
                target: &s.target,
                theta: &s.theta,
            };
            hmc_step(&density, &mut s.chain)?
        };
        if out.divergent {
            s.events.divergences += 1;
        }
        let z = if warped {
            s.map.forward(&out.position)?.0
        } else {
            out.position.clone()
        };
        let latent_logp = s.target.log_joint(&z, &s.theta)?;

        let mut lambda_updated = false;
        if !self.frozen_at(iter) {
            let ascent = self.state.map.grad_log_q_params(&z);
            if let Some((old, old_adam)) = self.update_lambda(ascent) {
                lambda_updated = true;
                if warped {
                    let s = &mut self.state;
                    match s.map.inverse(&z) {
                        Ok(z0) if all_finite(&z0) => s.chain.position = z0,
                        _ => {
                            s.map.set_params(&old)?;
                            s.adam_lambda = old_adam;
                            s.events.rewarp_failures += 1;
                            lambda_updated = false;
                        }
                    }
                }
            }
        }
        self.update_theta(&z);
        let s = &mut self.state;
        s.chain.adapt(out.accepted, out.divergent);
        Ok(TraceRecord {
            iter,
            accepted: out.accepted,
            step_size: out.step_size,
            leapfrog: out.n_leapfrog,
            warped_logp: out.logp,
            latent_logp,
            divergent: out.divergent,
            lambda_norm: norm(&s.map.params()),
            theta: s.theta.clone(),
            z,
            lambda_updated,
        })
    }

    fn elbo_step(&mut self) -> Result<TraceRecord, TrainError> {
        let iter = self.state.iteration;
        let s = &mut self.state;
        let eps = s.chain.rng_mut().normal_vec(s.map.dim());
        let pass = s.map.forward_pass(&eps)?;
        let z = pass.z.clone();
        let (latent_logp, grad_z) = s.target.log_joint_and_grad_z(&z, &s.theta)?;
        let warped_logp = latent_logp + pass.logdet;
        let mut lambda_updated = false;
        if !self.frozen_at(iter) {
            let ascent = if all_finite(&grad_z) {
                self.state.map.backward(&pass, &grad_z, 1.0).map(|(_, dp)| dp)
            } else {
                Err(FlowError::NonFinite { layer: 0 })
            };
            lambda_updated = self.update_lambda(ascent).is_some();
        }
        self.update_theta(&z);
        let s = &self.state;
        Ok(TraceRecord {
            iter,
            accepted: false,
            step_size: s.chain.step_size(),
            leapfrog: 0,
            warped_logp,
            latent_logp,
            divergent: false,
            lambda_norm: norm(&s.map.params()),
            theta: s.theta.clone(),
            z,
            lambda_updated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmc::hmc_step_adapt;
    use crate::numkit::finite_diff_grad;
    use crate::targets::{ConjugateGaussian, GaussianAnalytic};

    fn gaussian() -> TargetModel {
        TargetModel::Gaussian(GaussianAnalytic::diagonal(vec![1.0, -1.0], &[4.0, 0.25]).unwrap())
    }

    fn trainer(method: Method, map: TransportMap, iterations: u64) -> Trainer {
        let cfg = TrainerConfig {
            iterations,
            ..TrainerConfig::new(method)
        };
        Trainer::new(cfg, HmcConfig::default(), gaussian(), map, 7).unwrap()
    }

    #[test]
    fn defaults() {
        let c = TrainerConfig::new(Method::Tsc);
        assert_eq!((c.lr_lambda, c.lr_theta, c.decay, c.freeze_window), (3e-3, 3e-3, 3e-4, 200));
        let parsed: TrainerConfig = serde_json::from_str(r#"{"method":"tsc"}"#).unwrap();
        assert_eq!(parsed, c);
        assert!(serde_json::from_str::<TrainerConfig>(r#"{"method":"nuts"}"#).is_err());
        let e: TrainerConfig = serde_json::from_str(r#"{"method":"elbo_vi"}"#).unwrap();
        assert_eq!(e.method, Method::ElboVi);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig::new(Method::Tsc);
        c.iterations = 0;
        assert!(c.validate().is_err());
        c.iterations = 1;
        c.lr_lambda = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = TrainerConfig::new(Method::Tsc);
        let r = Trainer::new(cfg, HmcConfig::default(), gaussian(), TransportMap::affine(3), 0);
        assert!(matches!(r, Err(TrainError::Config(_))));
    }

    #[test]
    fn frozen_identity_tsc_is_plain_hmc() {
        let mut t = trainer(Method::Tsc, TransportMap::identity(2), 300);
        let target = gaussian();
        let mut chain = ChainState::new(2, HmcConfig::default(), Rng::with_stream(7, CHAIN_STREAM)).unwrap();
        let density = LatentDensity { target: &target, theta: &[] };
        for _ in 0..300 {
            let rec = t.step().unwrap();
            let out = hmc_step_adapt(&density, &mut chain).unwrap();
            assert_eq!(rec.z, out.position);
        }
    }

    #[test]
    fn identity_map_tsc_equals_msc() {
        let mut a = trainer(Method::Tsc, TransportMap::identity(2), 500);
        let mut b = trainer(Method::Msc, TransportMap::identity(2), 500);
        for _ in 0..500 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
    }

    #[test]
    fn single_iteration_emits_one_record() {
        let mut t = trainer(Method::Tsc, TransportMap::affine(2), 1);
        let mut n = 0;
        t.run(|_, _| {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 1);
        assert!(t.is_done());
    }

    #[test]
    fn freeze_window_holds_map() {
        let mut t = trainer(Method::Tsc, TransportMap::affine(2), 50);
        let p0 = t.state().map.params();
        for _ in 0..50 {
            assert!(!t.step().unwrap().lambda_updated);
        }
        assert_eq!(t.state().map.params(), p0);
    }

    #[test]
    fn rewarp_uses_updated_map() {
        let cfg = TrainerConfig {
            freeze_window: 0,
            ..TrainerConfig::new(Method::Tsc)
        };
        let mut t = Trainer::new(cfg, HmcConfig::default(), gaussian(), TransportMap::affine(2), 3).unwrap();
        let rec = t.step().unwrap();
        assert!(rec.lambda_updated);
        let s = t.state();
        let (z, _) = s.map.forward(&s.chain.position).unwrap();
        for (a, b) in z.iter().zip(&rec.z) {
            assert!((a - b).abs() < 1e-12);
        }
        let old = TransportMap::affine(2).inverse(&rec.z).unwrap();
        assert_ne!(old, s.chain.position);
    }

    #[test]
    fn lambda_direction_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let map = TransportMap::affine_with(vec![0.3, -0.1], vec![0.2, -0.4]).unwrap();
        for _ in 0..100 {
            let z = rng.normal_vec(2);
            let g = map.grad_log_q_params(&z).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut m = map.clone();
                    m.set_params(p).unwrap();
                    m.log_q(&z).unwrap()
                },
                &map.params(),
                1e-5,
            )
            .unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-7 + 1e-4 * a.abs().max(b.abs()));
            }
        }
    }

    #[test]
    fn zero_progress_before_first_step() {
        let t = trainer(Method::ElboVi, TransportMap::affine(2), 10);
        assert_eq!(t.state().map.params(), TransportMap::affine(2).params());
        assert_eq!(t.state().iteration, 0);
    }

    #[test]
    fn elbo_fits_gaussian() {
        let cfg = TrainerConfig {
            iterations: 20_000,
            lr_lambda: 1e-2,
            ..TrainerConfig::new(Method::ElboVi)
        };
        let mut t = Trainer::new(cfg, HmcConfig::default(), gaussian(), TransportMap::affine(2), 1).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        let (mu, sigma) = t.state().map.affine_parts().unwrap();
        assert!((mu[0] - 1.0).abs() < 0.1 && (mu[1] + 1.0).abs() < 0.05, "{mu:?}");
        assert!((sigma[0] / 2.0 - 1.0).abs() < 0.1 && (sigma[1] / 0.5 - 1.0).abs() < 0.1, "{sigma:?}");
    }

    #[test]
    fn theta_moves_toward_data() {
        let target = TargetModel::ConjugateGaussian(ConjugateGaussian {
            observations: vec![2.0; 10],
        });
        let cfg = TrainerConfig {
            iterations: 3000,
            lr_theta: 1e-2,
            ..TrainerConfig::new(Method::Msc)
        };
        let mut t = Trainer::new(cfg, HmcConfig::default(), target, TransportMap::affine(1), 0).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        assert!((t.state().theta[0] - 2.0).abs() < 0.3, "{:?}", t.state().theta);
        assert_eq!(t.state().events.reinitializations, 0);
    }
}
