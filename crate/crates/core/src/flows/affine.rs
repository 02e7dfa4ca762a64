use super::{clamp_log_scale, FlowError, LayerPass, MIN_SCALE};
use crate::numkit::{check_len, NumError};

/// Elementwise `z = μ + σ ⊙ ε` with `σ = exp(clamp(logσ, −10, 10))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    mu: Vec<f64>,
    log_sigma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape {
    x: Vec<f64>,
    scale: Vec<f64>,
    clamp_grad: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self, FlowError> {
        check_len("Affine::new", mu.len(), log_sigma.len())?;
        Ok(Self { mu, log_sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_sigma(&self) -> &[f64] {
        &self.log_sigma
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|&s| clamp_log_scale(s).0.exp()).collect()
    }

    pub(crate) fn param_count(&self) -> usize {
        2 * self.mu.len()
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.log_sigma);
    }

    pub(crate) fn set_params(&mut self, p: &[f64]) -> Result<(), NumError> {
        check_len("Affine::set_params", self.param_count(), p.len())?;
        let d = self.mu.len();
        self.mu.copy_from_slice(&p[..d]);
        self.log_sigma.copy_from_slice(&p[d..]);
        Ok(())
    }

    fn scales(&self) -> (Vec<f64>, Vec<f64>, f64) {
        let mut logdet = 0.0;
        let mut clamp_grad = Vec::with_capacity(self.mu.len());
        let scale = self
            .log_sigma
            .iter()
            .map(|&raw| {
                let (s, g) = clamp_log_scale(raw);
                logdet += s;
                clamp_grad.push(g);
                s.exp()
            })
            .collect();
        (scale, clamp_grad, logdet)
    }

    pub(crate) fn forward(&self, x: &[f64]) -> LayerPass {
        let (scale, clamp_grad, logdet) = self.scales();
        let out = x
            .iter()
            .zip(&scale)
            .zip(&self.mu)
            .map(|((xi, si), mi)| mi + si * xi)
            .collect();
        LayerPass {
            out,
            logdet,
            tape: super::Tape::Affine(Tape {
                x: x.to_vec(),
                scale,
                clamp_grad,
            }),
        }
    }

    pub(crate) fn inverse(&self, y: &[f64], layer: usize) -> Result<LayerPass, FlowError> {
        let (scale, clamp_grad, logdet) = self.scales();
        if let Some(&s) = scale.iter().find(|&&s| !(s > MIN_SCALE)) {
            return Err(FlowError::ScaleUnderflow { layer, scale: s });
        }
        let x: Vec<f64> = y
            .iter()
            .zip(&scale)
            .zip(&self.mu)
            .map(|((yi, si), mi)| (yi - mi) / si)
            .collect();
        Ok(LayerPass {
            out: x.clone(),
            logdet,
            tape: super::Tape::Affine(Tape { x, scale, clamp_grad }),
        })
    }

    pub(crate) fn forward_backward(&self, t: &Tape, dy: &[f64], dlogdet: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.mu.len();
        let mut dx = Vec::with_capacity(d);
        let mut dp = vec![0.0; 2 * d];
        for i in 0..d {
            dx.push(dy[i] * t.scale[i]);
            dp[i] = dy[i];
            dp[d + i] = (dy[i] * t.x[i] * t.scale[i] + dlogdet) * t.clamp_grad[i];
        }
        (dx, dp)
    }

    pub(crate) fn inverse_backward(&self, t: &Tape, dx: &[f64], dlogdet: f64) -> (Vec<f64>, Vec<f64>) {
        // x = (y − μ) / σ
        let d = self.mu.len();
        let mut dy = Vec::with_capacity(d);
        let mut dp = vec![0.0; 2 * d];
        for i in 0..d {
            let g = dx[i] / t.scale[i];
            dy.push(g);
            dp[i] = -g;
            dp[d + i] = (-dx[i] * t.x[i] + dlogdet) * t.clamp_grad[i];
        }
        (dy, dp)
    }
}
