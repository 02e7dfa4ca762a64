//! Hamiltonian Monte Carlo on a warped space.
//!
//! The chain lives in the base space of a [`TransportMap`] and targets
//! `log p(x, T(z₀); θ) + log|det dT/dz₀|`. With the identity map this is the
//! plain latent-space sampler.

use crate::flows::{FlowError, TransportMap};
use crate::numkit::{dot, Rng};
use crate::targets::{TargetError, TargetModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_STEP_SIZE: f64 = 1e-4;
pub const MAX_STEP_SIZE: f64 = 2.0;
/// Multiplicative step-size shrink applied after a divergent trajectory.
pub const DIVERGENCE_SHRINK: f64 = 0.9;
/// Energy error above which a finite trajectory is still called divergent.
pub const DIVERGENCE_ENERGY: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmcError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("non-finite log density at the current position")]
    NonFiniteState,
    #[error("invalid sampler setting: {0}")]
    Invalid(String),
}

/// A differentiable unnormalized log density.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn logp_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), HmcError>;
}

/// `log p(x, z; θ)` as a function of `z`.
#[derive(Debug, Clone, Copy)]
pub struct LatentDensity<'a> {
    pub target: &'a TargetModel,
    pub theta: &'a [f64],
}

impl LogDensity for LatentDensity<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn logp_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), HmcError> {
        Ok(self.target.log_joint_and_grad_z(x, self.theta)?)
    }
}

/// Pullback of the target through a transport map.
#[derive(Debug, Clone, Copy)]
pub struct WarpedDensity<'a> {
    pub target: &'a TargetModel,
    pub theta: &'a [f64],
    pub map: &'a TransportMap,
}

impl WarpedDensity<'_> {
    fn latent(&self) -> LatentDensity<'_> {
        LatentDensity {
            target: self.target,
            theta: self.theta,
        }
    }

    /// Latent point `T(z₀)` for a warped-space position.
    pub fn to_latent(&self, z0: &[f64]) -> Result<Vec<f64>, HmcError> {
        Ok(self.map.forward(z0)?.0)
    }
}

impl LogDensity for WarpedDensity<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn logp_and_grad(&self, z0: &[f64]) -> Result<(f64, Vec<f64>), HmcError> {
        if self.map.is_identity() {
            return self.latent().logp_and_grad(z0);
        }
        let pass = self.map.forward_pass(z0)?;
        let (logp, grad_z) = self.target.log_joint_and_grad_z(&pass.z, self.theta)?;
        let (grad, _) = self.map.backward(&pass, &grad_z, 1.0)?;
        Ok((logp + pass.logdet, grad))
    }
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
    /// The integrator left the finite domain (or the density failed) mid-way.
    pub divergent: bool,
}

fn is_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `steps` leapfrog iterations with unit mass, starting from a known gradient.
fn integrate<D: LogDensity + ?Sized>(
    density: &D,
    z: &[f64],
    m: &[f64],
    grad: &[f64],
    step_size: f64,
    steps: usize,
) -> Trajectory {
    let half = 0.5 * step_size;
    let mut z = z.to_vec();
    let mut m = m.to_vec();
    let mut grad = grad.to_vec();
    let mut logp = f64::NAN;
    for _ in 0..steps {
        m.iter_mut().zip(&grad).for_each(|(mi, g)| *mi += half * g);
        z.iter_mut().zip(&m).for_each(|(zi, mi)| *zi += step_size * mi);
        match density.logp_and_grad(&z) {
            Ok((lp, g)) if lp.is_finite() && is_finite(&g) => {
                logp = lp;
                grad = g;
            }
            _ => {
                return Trajectory {
                    position: z,
                    momentum: m,
                    logp: f64::NAN,
                    grad,
                    divergent: true,
                }
            }
        }
        m.iter_mut().zip(&grad).for_each(|(mi, g)| *mi += half * g);
    }
    let divergent = !is_finite(&z) || !is_finite(&m);
    Trajectory {
        position: z,
        momentum: m,
        logp,
        grad,
        divergent,
    }
}

/// Leapfrog integration of `H(z, m) = −log p(z) + ½‖m‖²`.
pub fn leapfrog<D: LogDensity + ?Sized>(
    density: &D,
    z: &[f64],
    m: &[f64],
    step_size: f64,
    steps: usize,
) -> Result<Trajectory, HmcError> {
    if !(step_size > 0.0) || steps == 0 {
        return Err(HmcError::Invalid(format!(
            "leapfrog needs step_size > 0 and steps ≥ 1, got {step_size} and {steps}"
        )));
    }
    if m.len() != z.len() {
        return Err(HmcError::Invalid("momentum and position lengths differ".into()));
    }
    let (_, grad) = density.logp_and_grad(z)?;
    Ok(integrate(density, z, m, &grad, step_size, steps))
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub target_accept: f64,
    pub step_size_init: f64,
    pub l_max: usize,
    /// Stop adapting the step size after this many updates.
    pub adapt_freeze_after: Option<u64>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            target_accept: 0.67,
            step_size_init: 0.25,
            l_max: 50,
            adapt_freeze_after: None,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(HmcError::Invalid(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(MIN_STEP_SIZE..=MAX_STEP_SIZE).contains(&self.step_size_init) {
            return Err(HmcError::Invalid(format!(
                "step_size_init must lie in [{MIN_STEP_SIZE}, {MAX_STEP_SIZE}], got {}",
                self.step_size_init
            )));
        }
        if self.l_max == 0 {
            return Err(HmcError::Invalid("l_max must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `min(⌈1/s⌉, l_max)`
pub fn leapfrog_count(step_size: f64, l_max: usize) -> usize {
    ((1.0 / step_size).ceil() as usize).clamp(1, l_max)
}

/// Robbins–Monro gain for the `k`-th adaptation update.
pub fn adaptation_gain(k: u64) -> f64 {
    0.05 / (1.0 + k as f64).powf(0.6)
}

/// Persistent chain: position, step size and its adaptation statistics.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    step_size: f64,
    n_leapfrog: usize,
    config: HmcConfig,
    adapt_count: u64,
    accept_ewma: f64,
    rng: Rng,
}

impl ChainState {
    /// Starts at `z₀ ~ N(0, I)` drawn from `rng`, which the chain then owns.
    pub fn new(dim: usize, config: HmcConfig, mut rng: Rng) -> Result<Self, HmcError> {
        let position = rng.normal_vec(dim);
        Self::at(position, config, rng)
    }

    pub fn at(position: Vec<f64>, config: HmcConfig, rng: Rng) -> Result<Self, HmcError> {
        config.validate()?;
        Ok(Self {
            position,
            step_size: config.step_size_init,
            n_leapfrog: leapfrog_count(config.step_size_init, config.l_max),
            config,
            adapt_count: 0,
            accept_ewma: config.target_accept,
            rng,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn n_leapfrog(&self) -> usize {
        self.n_leapfrog
    }

    pub fn config(&self) -> &HmcConfig {
        &self.config
    }

    pub fn adapt_count(&self) -> u64 {
        self.adapt_count
    }

    /// Exponentially weighted acceptance rate (weight 0.01).
    pub fn accept_rate(&self) -> f64 {
        self.accept_ewma
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    fn set_step_size(&mut self, s: f64) {
        self.step_size = s.clamp(MIN_STEP_SIZE, MAX_STEP_SIZE);
        self.n_leapfrog = leapfrog_count(self.step_size, self.config.l_max);
    }

    /// One Robbins–Monro update of `log s` toward the target acceptance rate.
    /// A divergent step counts as a rejection and additionally shrinks `s`,
    /// even once adaptation is frozen.
    pub fn adapt(&mut self, accepted: bool, divergent: bool) {
        let hit = if accepted && !divergent { 1.0 } else { 0.0 };
        self.accept_ewma += 0.01 * (hit - self.accept_ewma);
        let frozen = self
            .config
            .adapt_freeze_after
            .is_some_and(|n| self.adapt_count >= n);
        let mut log_s = self.step_size.ln();
        if !frozen {
            log_s += adaptation_gain(self.adapt_count) * (hit - self.config.target_accept);
            self.adapt_count += 1;
        }
        let mut s = log_s.exp();
        if divergent {
            s *= DIVERGENCE_SHRINK;
        }
        self.set_step_size(s);
    }
}

/// Result of one Metropolis-corrected HMC transition.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutcome {
    pub position: Vec<f64>,
    pub proposal: Vec<f64>,
    pub accepted: bool,
    pub divergent: bool,
    /// `H_old − H_new`
    pub log_accept_ratio: f64,
    /// Log density at the returned position.
    pub logp: f64,
    pub step_size: f64,
    pub n_leapfrog: usize,
}

/// Metropolis acceptance probability for an energy change.
pub fn accept_probability(log_accept_ratio: f64) -> f64 {
    if log_accept_ratio.is_nan() {
        0.0
    } else {
        log_accept_ratio.exp().min(1.0)
    }
}

/// One HMC transition from the chain's position. The step size is not
/// adapted here; see [`ChainState::adapt`].
pub fn hmc_step<D: LogDensity + ?Sized>(density: &D, state: &mut ChainState) -> Result<HmcOutcome, HmcError> {
    let (logp0, grad0) = density.logp_and_grad(&state.position)?;
    if !logp0.is_finite() || !is_finite(&grad0) {
        return Err(HmcError::NonFiniteState);
    }
    let m0 = state.rng.normal_vec(state.position.len());
    let u = state.rng.uniform();
    let traj = integrate(density, &state.position, &m0, &grad0, state.step_size, state.n_leapfrog);
    let h_old = -logp0 + 0.5 * dot(&m0, &m0);
    let (log_accept_ratio, divergent) = if traj.divergent {
        (f64::NEG_INFINITY, true)
    } else {
        let h_new = -traj.logp + 0.5 * dot(&traj.momentum, &traj.momentum);
        let r = h_old - h_new;
        (r, !r.is_finite() || -r > DIVERGENCE_ENERGY)
    };
    let accepted = !divergent && u.ln() < log_accept_ratio;
    let proposal = traj.position;
    let outcome = HmcOutcome {
        position: if accepted { proposal.clone() } else { state.position.clone() },
        proposal,
        accepted,
        divergent,
        log_accept_ratio,
        logp: if accepted { traj.logp } else { logp0 },
        step_size: state.step_size,
        n_leapfrog: state.n_leapfrog,
    };
    state.position.clone_from(&outcome.position);
    Ok(outcome)
}

/// Transition followed by step-size adaptation.
pub fn hmc_step_adapt<D: LogDensity + ?Sized>(density: &D, state: &mut ChainState) -> Result<HmcOutcome, HmcError> {
    let out = hmc_step(density, state)?;
    state.adapt(out.accepted, out.divergent);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::hidden_widths;
    use crate::numkit::finite_diff_grad;
    use crate::targets::GaussianAnalytic;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn logp_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), HmcError> {
            Ok((-0.5 * dot(x, x), x.iter().map(|v| -v).collect()))
        }
    }

    /// Finite everywhere except `x > 1`.
    struct Cliff;

    impl LogDensity for Cliff {
        fn dim(&self) -> usize {
            1
        }
        fn logp_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), HmcError> {
            if x[0] > 1.0 {
                Ok((f64::NAN, vec![f64::NAN]))
            } else {
                Ok((-0.5 * x[0] * x[0], vec![-x[0]]))
            }
        }
    }

    #[test]
    fn leapfrog_hand_arithmetic() {
        let t = leapfrog(&StdNormal(1), &[0.0], &[1.0], 0.1, 1).unwrap();
        assert!((t.position[0] - 0.1).abs() < 1e-15);
        assert!((t.momentum[0] - 0.995).abs() < 1e-15);
        assert!(!t.divergent);
    }

    #[test]
    fn leapfrog_reversible() {
        let target = TargetModel::funnel(1.0);
        let d = LatentDensity { target: &target, theta: &[] };
        let t = leapfrog(&d, &[0.3, -0.2], &[0.7, 0.4], 0.05, 20).unwrap();
        let neg: Vec<f64> = t.momentum.iter().map(|v| -v).collect();
        let back = leapfrog(&d, &t.position, &neg, 0.05, 20).unwrap();
        assert!((back.position[0] - 0.3).abs() < 1e-8 && (back.position[1] + 0.2).abs() < 1e-8);
        assert!((back.momentum[0] + 0.7).abs() < 1e-8 && (back.momentum[1] + 0.4).abs() < 1e-8);
    }

    #[test]
    fn energy_drift_small() {
        let t = leapfrog(&StdNormal(1), &[0.5], &[1.0], 0.01, 100).unwrap();
        let h0 = 0.5 * 0.25 + 0.5;
        let h1 = -t.logp + 0.5 * t.momentum[0] * t.momentum[0];
        assert!((h1 - h0).abs() < 1e-3);
    }

    #[test]
    fn leapfrog_rejects_bad_settings() {
        assert!(leapfrog(&StdNormal(1), &[0.0], &[1.0], 0.0, 1).is_err());
        assert!(leapfrog(&StdNormal(1), &[0.0], &[1.0], 0.1, 0).is_err());
    }

    #[test]
    fn divergence_flagged() {
        let t = leapfrog(&Cliff, &[0.0], &[100.0], 0.1, 1).unwrap();
        assert!(t.divergent);
    }

    #[test]
    fn acceptance_probabilities() {
        assert_eq!(accept_probability(0.0), 1.0);
        assert!((accept_probability(-std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
        assert_eq!(accept_probability(f64::NAN), 0.0);
        assert_eq!(accept_probability(3.0), 1.0);
    }

    #[test]
    fn leapfrog_counts() {
        assert_eq!(leapfrog_count(0.3, 50), 4);
        assert_eq!(leapfrog_count(1e-4, 50), 50);
        assert_eq!(leapfrog_count(1.5, 50), 1);
    }

    #[test]
    fn first_adaptation_update() {
        let mut c = ChainState::at(vec![0.0], HmcConfig::default(), Rng::new(0)).unwrap();
        let s0 = c.step_size();
        c.adapt(true, false);
        assert!((c.step_size().ln() - s0.ln() - 0.05 * 0.33).abs() < 1e-12);
        assert_eq!(c.adapt_count(), 1);
    }

    #[test]
    fn alternating_feedback_balances() {
        let cfg = HmcConfig {
            target_accept: 0.5,
            ..Default::default()
        };
        let mut c = ChainState::at(vec![0.0], cfg, Rng::new(0)).unwrap();
        let s0 = c.step_size();
        for i in 0..2000 {
            c.adapt(i % 2 == 1, false);
        }
        assert!((c.step_size().ln() - s0.ln()).abs() < 0.03);
    }

    #[test]
    fn step_size_clamped_and_frozen() {
        let cfg = HmcConfig {
            adapt_freeze_after: Some(3),
            ..Default::default()
        };
        let mut c = ChainState::at(vec![0.0], cfg, Rng::new(0)).unwrap();
        for _ in 0..3 {
            c.adapt(true, false);
        }
        let s = c.step_size();
        c.adapt(true, false);
        assert_eq!(c.step_size(), s);
        c.adapt(false, true);
        assert!((c.step_size() - s * DIVERGENCE_SHRINK).abs() < 1e-15);
        for _ in 0..10_000 {
            c.adapt(false, true);
        }
        assert_eq!(c.step_size(), MIN_STEP_SIZE);
        assert_eq!(c.n_leapfrog(), 50);
    }

    #[test]
    fn config_validation() {
        let bad = HmcConfig {
            target_accept: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HmcConfig {
            step_size_init: 5.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejection_keeps_position() {
        let mut c = ChainState::at(vec![0.0], HmcConfig::default(), Rng::new(4)).unwrap();
        for _ in 0..200 {
            let before = c.position.clone();
            let out = hmc_step(&Cliff, &mut c).unwrap();
            if !out.accepted {
                assert_eq!(out.position, before);
                assert_eq!(c.position, before);
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let target = TargetModel::funnel(1.0);
        let map = TransportMap::identity(2);
        let w = WarpedDensity { target: &target, theta: &[], map: &map };
        let l = LatentDensity { target: &target, theta: &[] };
        let z = [0.4, -0.7];
        assert_eq!(w.logp_and_grad(&z).unwrap(), l.logp_and_grad(&z).unwrap());
    }

    #[test]
    fn matched_affine_warp_is_standard_normal() {
        let g = GaussianAnalytic::diagonal(vec![1.0, -1.0], &[4.0, 0.25]).unwrap();
        let target = TargetModel::Gaussian(g);
        let map = TransportMap::affine_with(vec![1.0, -1.0], vec![2f64.ln(), 0.5f64.ln()]).unwrap();
        let w = WarpedDensity { target: &target, theta: &[], map: &map };
        let (v0, _) = w.logp_and_grad(&[0.0, 0.0]).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let z0 = rng.normal_vec(2);
            let (v, g) = w.logp_and_grad(&z0).unwrap();
            assert!((v - (v0 - 0.5 * dot(&z0, &z0))).abs() < 1e-12);
            assert!(g.iter().zip(&z0).all(|(a, b)| (a + b).abs() < 1e-12));
        }
        assert!((v0 + std::f64::consts::TAU.ln()).abs() < 1e-12);
    }

    #[test]
    fn warped_gradient_matches_finite_differences() {
        let target = TargetModel::funnel(1.0);
        let mut rng = Rng::new(6);
        let mut map = TransportMap::realnvp(2, 4, &hidden_widths(2, 8), &mut rng);
        let p: Vec<f64> = (0..map.param_count()).map(|_| 0.2 * rng.normal()).collect();
        map.set_params(&p).unwrap();
        let w = WarpedDensity { target: &target, theta: &[], map: &map };
        for _ in 0..100 {
            let z0: Vec<f64> = rng.normal_vec(2).iter().map(|v| 0.7 * v).collect();
            let (_, g) = w.logp_and_grad(&z0).unwrap();
            let fd = finite_diff_grad(|x| w.logp_and_grad(x).unwrap().0, &z0, 1e-5).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 + 1e-4 * a.abs().max(b.abs()), "{g:?} vs {fd:?}");
            }
        }
    }

    /// Quartic well: a long step from far out overshoots by a huge energy.
    struct Quartic;

    impl LogDensity for Quartic {
        fn dim(&self) -> usize {
            1
        }
        fn logp_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), HmcError> {
            Ok((-x[0].powi(4), vec![-4.0 * x[0].powi(3)]))
        }
    }

    #[test]
    fn large_energy_error_is_divergent() {
        let cfg = HmcConfig {
            step_size_init: 1.0,
            ..Default::default()
        };
        let mut c = ChainState::at(vec![3.0], cfg, Rng::new(0)).unwrap();
        let out = hmc_step(&Quartic, &mut c).unwrap();
        assert!(out.divergent && !out.accepted);
        assert!(out.log_accept_ratio < -DIVERGENCE_ENERGY);
        c.adapt(out.accepted, out.divergent);
        assert!(c.step_size() < 0.9 * 1.0 + 1e-12);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut c = ChainState::at(vec![2.0], HmcConfig::default(), Rng::new(0)).unwrap();
        assert_eq!(hmc_step(&Cliff, &mut c), Err(HmcError::NonFiniteState));
    }

    #[test]
    fn chain_moments_standard_normal() {
        let mut c = ChainState::new(2, HmcConfig::default(), Rng::new(11)).unwrap();
        let n = 20_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let out = hmc_step_adapt(&StdNormal(2), &mut c).unwrap();
            for i in 0..2 {
                s[i] += out.position[i];
                s2[i] += out.position[i] * out.position[i];
            }
        }
        for i in 0..2 {
            let m = s[i] / n as f64;
            assert!(m.abs() < 0.1, "mean {m}");
            assert!((s2[i] / n as f64 - 1.0).abs() < 0.1);
        }
    }
}
