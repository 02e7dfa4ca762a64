use super::{clamp_log_scale, FlowError, LayerPass, MIN_SCALE};
use crate::numkit::{Mlp, MlpCache, NumError, Rng};

/// RealNVP affine coupling layer.
///
/// Coordinates with mask bit 1 pass through unchanged and condition the
/// shift and log-scale applied to the others:
/// `y = b⊙x + (1−b)⊙(x⊙exp(s(b⊙x)) + μ(b⊙x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    dim: usize,
    /// Indices with mask bit 1 (identity part).
    fixed: Vec<usize>,
    /// Indices with mask bit 0 (transformed part).
    moved: Vec<usize>,
    net: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape {
    cache: MlpCache,
    /// Transformed coordinates on the base side.
    x_moved: Vec<f64>,
    scale: Vec<f64>,
    clamp_grad: Vec<f64>,
}

impl Coupling {
    /// Checkerboard mask `b_i = 1` iff `(i + parity)` is even.
    pub fn new(dim: usize, parity: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let (fixed, moved): (Vec<usize>, Vec<usize>) = (0..dim).partition(|i| (i + parity).is_multiple_of(2));
        let mut widths = vec![fixed.len()];
        widths.extend_from_slice(hidden);
        widths.push(2 * moved.len());
        let mut net = Mlp::zeros(&widths);
        net.init_hidden(rng);
        Self { dim, fixed, moved, net }
    }

    pub fn mask(&self) -> Vec<u8> {
        (0..self.dim).map(|i| u8::from(self.fixed.contains(&i))).collect()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub(crate) fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        self.net.write_params(out);
    }

    pub(crate) fn set_params(&mut self, p: &[f64]) -> Result<(), NumError> {
        self.net.set_params(p)
    }

    fn condition(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64, MlpCache), NumError> {
        let input: Vec<f64> = self.fixed.iter().map(|&i| v[i]).collect();
        let (h, cache) = self.net.forward(&input)?;
        let k = self.moved.len();
        let shift = h[..k].to_vec();
        let mut logdet = 0.0;
        let mut clamp_grad = Vec::with_capacity(k);
        let scale = h[k..]
            .iter()
            .map(|&raw| {
                let (s, g) = clamp_log_scale(raw);
                logdet += s;
                clamp_grad.push(g);
                s.exp()
            })
            .collect();
        Ok((shift, scale, clamp_grad, logdet, cache))
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Result<LayerPass, FlowError> {
        let (shift, scale, clamp_grad, logdet, cache) = self.condition(x)?;
        let mut out = x.to_vec();
        let mut x_moved = Vec::with_capacity(self.moved.len());
        for (j, &i) in self.moved.iter().enumerate() {
            x_moved.push(x[i]);
            out[i] = x[i] * scale[j] + shift[j];
        }
        Ok(LayerPass {
            out,
            logdet,
            tape: super::Tape::Coupling(Tape {
                cache,
                x_moved,
                scale,
                clamp_grad,
            }),
        })
    }

    pub(crate) fn inverse(&self, y: &[f64], layer: usize) -> Result<LayerPass, FlowError> {
        let (shift, scale, clamp_grad, logdet, cache) = self.condition(y)?;
        if let Some(&s) = scale.iter().find(|&&s| !(s > MIN_SCALE)) {
            return Err(FlowError::ScaleUnderflow { layer, scale: s });
        }
        let mut out = y.to_vec();
        let mut x_moved = Vec::with_capacity(self.moved.len());
        for (j, &i) in self.moved.iter().enumerate() {
            let xi = (y[i] - shift[j]) / scale[j];
            x_moved.push(xi);
            out[i] = xi;
        }
        Ok(LayerPass {
            out,
            logdet,
            tape: super::Tape::Coupling(Tape {
                cache,
                x_moved,
                scale,
                clamp_grad,
            }),
        })
    }

    fn pull_back_conditioner(&self, t: &Tape, d_shift: &[f64], d_log_scale: &[f64], grad: &mut [f64]) -> Result<Vec<f64>, NumError> {
        let mut upstream = d_shift.to_vec();
        upstream.extend_from_slice(d_log_scale);
        let (d_in, dp) = self.net.backward(&t.cache, &upstream)?;
        for (&i, g) in self.fixed.iter().zip(d_in) {
            grad[i] += g;
        }
        Ok(dp)
    }

    pub(crate) fn forward_backward(&self, t: &Tape, dy: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        let k = self.moved.len();
        let mut dx = vec![0.0; self.dim];
        let mut d_shift = Vec::with_capacity(k);
        let mut d_log_scale = Vec::with_capacity(k);
        for &i in &self.fixed {
            dx[i] = dy[i];
        }
        for (j, &i) in self.moved.iter().enumerate() {
            dx[i] = dy[i] * t.scale[j];
            d_shift.push(dy[i]);
            d_log_scale.push((dy[i] * t.x_moved[j] * t.scale[j] + dlogdet) * t.clamp_grad[j]);
        }
        let dp = self.pull_back_conditioner(t, &d_shift, &d_log_scale, &mut dx)?;
        Ok((dx, dp))
    }

    pub(crate) fn inverse_backward(&self, t: &Tape, dx: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        // x_moved = (y_moved − μ(y_fixed)) · exp(−s(y_fixed))
        let k = self.moved.len();
        let mut dy = vec![0.0; self.dim];
        let mut d_shift = Vec::with_capacity(k);
        let mut d_log_scale = Vec::with_capacity(k);
        for &i in &self.fixed {
            dy[i] = dx[i];
        }
        for (j, &i) in self.moved.iter().enumerate() {
            let g = dx[i] / t.scale[j];
            dy[i] = g;
            d_shift.push(-g);
            d_log_scale.push((-dx[i] * t.x_moved[j] + dlogdet) * t.clamp_grad[j]);
        }
        let dp = self.pull_back_conditioner(t, &d_shift, &d_log_scale, &mut dy)?;
        Ok((dy, dp))
    }
}
