//! Transport maps `T_λ: ℝᵈ → ℝᵈ`.
//!
//! A [`TransportMap`] is an ordered stack of invertible layers. It defines the
//! variational density `q(z; λ) = N(ε; 0, I) |det dT/dε|⁻¹` with `ε = T⁻¹(z)`
//! and, read the other way round, the change of variables for warped HMC.
//!
//! Every layer records a tape on the forward and on the inverse pass so that
//! gradients of any scalar `f(output, logdet)` can be pulled back to the
//! layer's input and parameters. That one primitive covers the warped HMC
//! gradient, the reparameterized ELBO gradient and the score `∇_λ log q(z; λ)`
//! at fixed `z`.

mod affine;
mod coupling;
mod iaf;

pub use affine::Affine;
pub use coupling::Coupling;
pub use iaf::Iaf;

use crate::numkit::{NumError, Rng};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Log-scales are clamped to this range before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 10.0;
/// Smallest scale an inverse will divide by.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension mismatch: map has dimension {expected}, input has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter vector has length {got}, map expects {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite intermediate value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("scale underflow in layer {layer}: σ = {scale:e}")]
    ScaleUnderflow { layer: usize, scale: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Identity,
    Affine,
    Iaf,
    #[serde(rename = "realnvp")]
    RealNvp,
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::Identity => "identity",
            FlowKind::Affine => "affine",
            FlowKind::Iaf => "iaf",
            FlowKind::RealNvp => "realnvp",
        })
    }
}

/// Standard normal base density `N(0, I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseDensity {
    pub dim: usize,
}

impl BaseDensity {
    pub fn log_density(&self, eps: &[f64]) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * PI).ln() - 0.5 * eps.iter().map(|e| e * e).sum::<f64>()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        rng.normal_vec(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Identity,
    Affine(Affine),
    Iaf(Iaf),
    Coupling(Coupling),
}

#[derive(Debug, Clone)]
pub(crate) enum Tape {
    Identity,
    Affine(affine::Tape),
    Iaf(iaf::ForwardTape),
    IafInverse(iaf::InverseTape),
    Coupling(coupling::Tape),
}

/// Result of a layer pass: output, forward log-determinant at the layer's
/// base-side point, and the tape for backpropagation.
pub(crate) struct LayerPass {
    pub out: Vec<f64>,
    pub logdet: f64,
    pub tape: Tape,
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Identity => 0,
            Layer::Affine(a) => a.param_count(),
            Layer::Iaf(f) => f.param_count(),
            Layer::Coupling(c) => c.param_count(),
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Identity => {}
            Layer::Affine(a) => a.write_params(out),
            Layer::Iaf(f) => f.write_params(out),
            Layer::Coupling(c) => c.write_params(out),
        }
    }

    fn set_params(&mut self, p: &[f64]) -> Result<(), NumError> {
        match self {
            Layer::Identity => Ok(()),
            Layer::Affine(a) => a.set_params(p),
            Layer::Iaf(f) => f.set_params(p),
            Layer::Coupling(c) => c.set_params(p),
        }
    }

    fn forward(&self, x: &[f64], index: usize) -> Result<LayerPass, FlowError> {
        let pass = match self {
            Layer::Identity => LayerPass {
                out: x.to_vec(),
                logdet: 0.0,
                tape: Tape::Identity,
            },
            Layer::Affine(a) => a.forward(x),
            Layer::Iaf(f) => f.forward(x)?,
            Layer::Coupling(c) => c.forward(x)?,
        };
        check_finite(&pass, index)?;
        Ok(pass)
    }

    fn inverse(&self, y: &[f64], index: usize) -> Result<LayerPass, FlowError> {
        let pass = match self {
            Layer::Identity => LayerPass {
                out: y.to_vec(),
                logdet: 0.0,
                tape: Tape::Identity,
            },
            Layer::Affine(a) => a.inverse(y, index)?,
            Layer::Iaf(f) => f.inverse(y, index)?,
            Layer::Coupling(c) => c.inverse(y, index)?,
        };
        check_finite(&pass, index)?;
        Ok(pass)
    }

    /// Pull `(dy, dlogdet)` back through a forward pass: returns `(dx, dparams)`.
    fn forward_backward(&self, tape: &Tape, dy: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        Ok(match (self, tape) {
            (Layer::Identity, Tape::Identity) => (dy.to_vec(), Vec::new()),
            (Layer::Affine(a), Tape::Affine(t)) => a.forward_backward(t, dy, dlogdet),
            (Layer::Iaf(f), Tape::Iaf(t)) => f.forward_backward(t, dy, dlogdet)?,
            (Layer::Coupling(c), Tape::Coupling(t)) => c.forward_backward(t, dy, dlogdet)?,
            _ => unreachable!("tape recorded by a different layer"),
        })
    }

    /// Pull `(dx, dlogdet)` back through an inverse pass: returns `(dy, dparams)`.
    fn inverse_backward(&self, tape: &Tape, dx: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        Ok(match (self, tape) {
            (Layer::Identity, Tape::Identity) => (dx.to_vec(), Vec::new()),
            (Layer::Affine(a), Tape::Affine(t)) => a.inverse_backward(t, dx, dlogdet),
            (Layer::Iaf(f), Tape::IafInverse(t)) => f.inverse_backward(t, dx, dlogdet)?,
            (Layer::Coupling(c), Tape::Coupling(t)) => c.inverse_backward(t, dx, dlogdet)?,
            _ => unreachable!("tape recorded by a different layer"),
        })
    }
}

fn check_finite(pass: &LayerPass, layer: usize) -> Result<(), FlowError> {
    if pass.logdet.is_finite() && pass.out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite { layer })
    }
}

/// Clamped log-scale and the derivative of the clamp (1 inside, 0 outside).
#[inline]
pub(crate) fn clamp_log_scale(raw: f64) -> (f64, f64) {
    if raw > LOG_SCALE_CLAMP {
        (LOG_SCALE_CLAMP, 0.0)
    } else if raw < -LOG_SCALE_CLAMP {
        (-LOG_SCALE_CLAMP, 0.0)
    } else {
        (raw, 1.0)
    }
}

/// Invertible map built as `T = T_L ∘ … ∘ T_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    kind: FlowKind,
    dim: usize,
    layers: Vec<Layer>,
}

/// Forward evaluation with its tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub z: Vec<f64>,
    pub logdet: f64,
    tapes: Vec<Tape>,
}

/// Inverse evaluation with its tape. `logdet` is the forward log-determinant
/// at the recovered base point.
#[derive(Debug, Clone)]
pub struct InversePass {
    pub eps: Vec<f64>,
    pub logdet: f64,
    tapes: Vec<Tape>,
}

/// Vector-Jacobian products and log-determinant gradients of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardGradients {
    pub z: Vec<f64>,
    pub logdet: f64,
    /// `uᵀ dz/dε`
    pub vjp_input: Vec<f64>,
    /// `uᵀ dz/dλ`
    pub vjp_params: Vec<f64>,
    pub logdet_input: Vec<f64>,
    pub logdet_params: Vec<f64>,
}

impl TransportMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: FlowKind::Identity,
            dim,
            layers: vec![Layer::Identity],
        }
    }

    /// `z = μ + exp(logσ) ⊙ ε`, starting at `μ = 0, logσ = 0`.
    pub fn affine(dim: usize) -> Self {
        Self {
            kind: FlowKind::Affine,
            dim,
            layers: vec![Layer::Affine(Affine::identity(dim))],
        }
    }

    pub fn affine_with(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self, FlowError> {
        let dim = mu.len();
        Ok(Self {
            kind: FlowKind::Affine,
            dim,
            layers: vec![Layer::Affine(Affine::new(mu, log_sigma)?)],
        })
    }

    /// Stack of `depth` IAF layers; odd layers use the reversed coordinate order.
    /// Hidden conditioner weights are drawn from `rng`, output layers start at
    /// zero, so the map is the identity at initialization.
    pub fn iaf(dim: usize, depth: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let layers = (0..depth.max(1))
            .map(|l| Layer::Iaf(Iaf::new(dim, hidden, l % 2 == 1, rng)))
            .collect();
        Self {
            kind: FlowKind::Iaf,
            dim,
            layers,
        }
    }

    /// Stack of `depth` affine coupling layers with alternating checkerboard masks.
    pub fn realnvp(dim: usize, depth: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let layers = (0..depth.max(1))
            .map(|l| Layer::Coupling(Coupling::new(dim, l % 2, hidden, rng)))
            .collect();
        Self {
            kind: FlowKind::RealNvp,
            dim,
            layers,
        }
    }

    /// Compose maps of the same dimension; `maps[0]` is applied first.
    pub fn stack(maps: Vec<TransportMap>) -> Result<Self, FlowError> {
        let dim = maps.first().map_or(0, |m| m.dim);
        let kind = maps.first().map_or(FlowKind::Identity, |m| m.kind);
        let mut layers = Vec::new();
        for m in maps {
            if m.dim != dim {
                return Err(FlowError::Dimension {
                    expected: dim,
                    got: m.dim,
                });
            }
            layers.extend(m.layers);
        }
        Ok(Self { kind, dim, layers })
    }

    pub fn from_layers(kind: FlowKind, dim: usize, layers: Vec<Layer>) -> Self {
        Self { kind, dim, layers }
    }

    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, Layer::Identity))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flat parameter vector, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), FlowError> {
        if params.len() != self.param_count() {
            return Err(FlowError::ParamCount {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.param_count();
            l.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// The affine parameters `(μ, σ)` when the map is a single affine layer.
    pub fn affine_parts(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self.layers.as_slice() {
            [Layer::Affine(a)] => Some((a.mu().to_vec(), a.sigma())),
            _ => None,
        }
    }

    fn check_dim(&self, len: usize) -> Result<(), FlowError> {
        if len != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    pub fn forward_pass(&self, eps: &[f64]) -> Result<ForwardPass, FlowError> {
        self.check_dim(eps.len())?;
        let mut x = eps.to_vec();
        let mut logdet = 0.0;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let pass = layer.forward(&x, i)?;
            x = pass.out;
            logdet += pass.logdet;
            tapes.push(pass.tape);
        }
        Ok(ForwardPass { z: x, logdet, tapes })
    }

    /// `(z, log|det dT/dε|)`
    pub fn forward(&self, eps: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let pass = self.forward_pass(eps)?;
        Ok((pass.z, pass.logdet))
    }

    /// Gradients of `⟨dz, z⟩ + dlogdet · logdet` with respect to `ε` and `λ`.
    pub fn backward(&self, pass: &ForwardPass, dz: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        self.check_dim(dz.len())?;
        let mut grad = dz.to_vec();
        let mut dparams: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (layer, tape) in self.layers.iter().zip(&pass.tapes).rev() {
            let (dx, dp) = layer.forward_backward(tape, &grad, dlogdet)?;
            grad = dx;
            dparams.push(dp);
        }
        Ok((grad, dparams.into_iter().rev().flatten().collect()))
    }

    pub fn inverse_pass(&self, z: &[f64]) -> Result<InversePass, FlowError> {
        self.check_dim(z.len())?;
        let mut y = z.to_vec();
        let mut logdet = 0.0;
        let mut tapes: Vec<Tape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pass = layer.inverse(&y, i)?;
            y = pass.out;
            logdet += pass.logdet;
            tapes.push(pass.tape);
        }
        tapes.reverse();
        Ok(InversePass { eps: y, logdet, tapes })
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, FlowError> {
        Ok(self.inverse_pass(z)?.eps)
    }

    /// Gradients of `⟨deps, ε⟩ + dlogdet · logdet` (both functions of `z`
    /// through the inverse) with respect to `z` and `λ`.
    pub fn inverse_backward(&self, pass: &InversePass, deps: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        self.check_dim(deps.len())?;
        let mut grad = deps.to_vec();
        let mut dparams: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (layer, tape) in self.layers.iter().zip(&pass.tapes) {
            let (dy, dp) = layer.inverse_backward(tape, &grad, dlogdet)?;
            grad = dy;
            dparams.push(dp);
        }
        Ok((grad, dparams.into_iter().flatten().collect()))
    }

    pub fn base(&self) -> BaseDensity {
        BaseDensity { dim: self.dim }
    }

    /// `log q(z; λ) = log N(T⁻¹(z); 0, I) − log|det dT/dε|`
    pub fn log_q(&self, z: &[f64]) -> Result<f64, FlowError> {
        let pass = self.inverse_pass(z)?;
        Ok(self.base().log_density(&pass.eps) - pass.logdet)
    }

    /// `∇_λ log q(z; λ)` with `z` held fixed.
    pub fn grad_log_q_params(&self, z: &[f64]) -> Result<Vec<f64>, FlowError> {
        Ok(self.log_q_and_grad_params(z)?.1)
    }

    pub fn log_q_and_grad_params(&self, z: &[f64]) -> Result<(f64, Vec<f64>), FlowError> {
        let pass = self.inverse_pass(z)?;
        let value = self.base().log_density(&pass.eps) - pass.logdet;
        let deps: Vec<f64> = pass.eps.iter().map(|e| -e).collect();
        let (_, dparams) = self.inverse_backward(&pass, &deps, -1.0)?;
        Ok((value, dparams))
    }

    /// Vector-Jacobian products of `z = T(ε)` against `u`, plus the full
    /// gradients of the log-determinant.
    pub fn grad_forward_inputs(&self, eps: &[f64], u: &[f64]) -> Result<ForwardGradients, FlowError> {
        let pass = self.forward_pass(eps)?;
        let (vjp_input, vjp_params) = self.backward(&pass, u, 0.0)?;
        let zeros = vec![0.0; self.dim];
        let (logdet_input, logdet_params) = self.backward(&pass, &zeros, 1.0)?;
        Ok(ForwardGradients {
            z: pass.z,
            logdet: pass.logdet,
            vjp_input,
            vjp_params,
            logdet_input,
            logdet_params,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Vec<f64>, FlowError> {
        let eps = self.base().sample(rng);
        Ok(self.forward(&eps)?.0)
    }
}

/// Hidden-layer widths for a conditioner: `layers` copies of `width`.
pub fn hidden_widths(layers: usize, width: usize) -> Vec<usize> {
    vec![width; layers]
}

#[cfg(test)]
mod tests;
