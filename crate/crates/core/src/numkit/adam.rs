use super::{check_len, NumError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction and learning rate `α₀ / (1 + κ·t)`, where `t`
/// counts the updates already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    decay: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr,
            decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn learning_rate_at(&self, t: u64) -> f64 {
        self.lr / (1.0 + self.decay * t as f64)
    }

    pub fn current_learning_rate(&self) -> f64 {
        self.learning_rate_at(self.t)
    }

    /// Descend along `grad`. A non-finite gradient is rejected before any
    /// state is touched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NumError> {
        check_len("AdamState::step params", self.m.len(), params.len())?;
        check_len("AdamState::step grad", self.m.len(), grad.len())?;
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NumError::NonFinite {
                op: "AdamState::step",
                index,
            });
        }
        let alpha = self.current_learning_rate();
        self.t += 1;
        let bc1 = 1.0 - BETA1.powf(self.t as f64);
        let bc2 = 1.0 - BETA2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= alpha * m_hat / (v_hat.sqrt() + EPS);
        }
        Ok(())
    }
}
