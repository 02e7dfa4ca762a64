use super::{clamp_log_scale, FlowError, LayerPass, MIN_SCALE};
use crate::numkit::{Mat, Mlp, MlpCache, NumError, Rng};

/// Inverse autoregressive flow layer.
///
/// `z_i = ε_i · exp(s_i(ε_<i)) + μ_i(ε_<i)` where `<i` follows the layer's
/// coordinate order. Shift and log-scale come from one masked (MADE-style)
/// network with outputs `[μ_1..μ_d, s_1..s_d]`; the first coordinate in the
/// order only sees the output biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Iaf {
    dim: usize,
    /// `order[p]` is the coordinate transformed at autoregressive position `p`.
    order: Vec<usize>,
    net: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardTape {
    cache: MlpCache,
    x: Vec<f64>,
    scale: Vec<f64>,
    clamp_grad: Vec<f64>,
}

/// One conditioner evaluation per autoregressive position.
#[derive(Debug, Clone)]
pub(crate) struct InverseTape {
    steps: Vec<InverseStep>,
    x: Vec<f64>,
}

#[derive(Debug, Clone)]
struct InverseStep {
    cache: MlpCache,
    scale: f64,
    clamp_grad: f64,
}

impl Iaf {
    pub fn new(dim: usize, hidden: &[usize], reversed: bool, rng: &mut Rng) -> Self {
        let order: Vec<usize> = if reversed {
            (0..dim).rev().collect()
        } else {
            (0..dim).collect()
        };
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * dim);
        let masks = made_masks(&order, &widths);
        let mut net = Mlp::zeros(&widths)
            .with_masks(masks)
            .expect("mask shapes follow the layer widths");
        net.init_hidden(rng);
        Self { dim, order, net }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
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

    pub(crate) fn forward(&self, x: &[f64]) -> Result<LayerPass, FlowError> {
        let d = self.dim;
        let (h, cache) = self.net.forward(x)?;
        let mut out = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        let mut clamp_grad = Vec::with_capacity(d);
        let mut logdet = 0.0;
        for i in 0..d {
            let (s, g) = clamp_log_scale(h[d + i]);
            logdet += s;
            let sc = s.exp();
            out.push(x[i] * sc + h[i]);
            scale.push(sc);
            clamp_grad.push(g);
        }
        Ok(LayerPass {
            out,
            logdet,
            tape: super::Tape::Iaf(ForwardTape {
                cache,
                x: x.to_vec(),
                scale,
                clamp_grad,
            }),
        })
    }

    /// Sequential inversion: position `p` is solved once positions `< p` are known.
    pub(crate) fn inverse(&self, y: &[f64], layer: usize) -> Result<LayerPass, FlowError> {
        let d = self.dim;
        let mut x = vec![0.0; d];
        let mut steps = Vec::with_capacity(d);
        let mut logdet = 0.0;
        for &i in &self.order {
            let (h, cache) = self.net.forward(&x)?;
            let (s, g) = clamp_log_scale(h[d + i]);
            let sc = s.exp();
            if !(sc > MIN_SCALE) {
                return Err(FlowError::ScaleUnderflow { layer, scale: sc });
            }
            x[i] = (y[i] - h[i]) / sc;
            logdet += s;
            steps.push(InverseStep {
                cache,
                scale: sc,
                clamp_grad: g,
            });
        }
        Ok(LayerPass {
            out: x.clone(),
            logdet,
            tape: super::Tape::IafInverse(InverseTape { steps, x }),
        })
    }

    pub(crate) fn forward_backward(&self, t: &ForwardTape, dy: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        let d = self.dim;
        let mut upstream = vec![0.0; 2 * d];
        let mut dx = vec![0.0; d];
        for i in 0..d {
            dx[i] = dy[i] * t.scale[i];
            upstream[i] = dy[i];
            upstream[d + i] = (dy[i] * t.x[i] * t.scale[i] + dlogdet) * t.clamp_grad[i];
        }
        let (d_in, dp) = self.net.backward(&t.cache, &upstream)?;
        for (a, b) in dx.iter_mut().zip(d_in) {
            *a += b;
        }
        Ok((dx, dp))
    }

    /// Reverse sweep over the sequential inversion. Processing positions from
    /// last to first guarantees each coordinate's adjoint is complete before
    /// it is propagated into the conditioner that produced it.
    pub(crate) fn inverse_backward(&self, t: &InverseTape, dx: &[f64], dlogdet: f64) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
        let d = self.dim;
        let mut adj = dx.to_vec();
        let mut dy = vec![0.0; d];
        let mut dp = vec![0.0; self.net.param_count()];
        let mut upstream = vec![0.0; 2 * d];
        for (p, &i) in self.order.iter().enumerate().rev() {
            let step = &t.steps[p];
            let g = adj[i] / step.scale;
            dy[i] = g;
            upstream.iter_mut().for_each(|u| *u = 0.0);
            upstream[i] = -g;
            upstream[d + i] = (-adj[i] * t.x[i] + dlogdet) * step.clamp_grad;
            let (d_in, dpp) = self.net.backward(&step.cache, &upstream)?;
            for (a, b) in adj.iter_mut().zip(d_in) {
                *a += b;
            }
            for (a, b) in dp.iter_mut().zip(dpp) {
                *a += b;
            }
        }
        Ok((dy, dp))
    }
}

/// MADE connectivity masks for the given coordinate order and widths.
fn made_masks(order: &[usize], widths: &[usize]) -> Vec<Mat> {
    let d = order.len();
    // Degree of coordinate i is its 1-based position in the order.
    let mut input_degree = vec![0usize; d];
    for (p, &i) in order.iter().enumerate() {
        input_degree[i] = p + 1;
    }
    let max_hidden_degree = d.saturating_sub(1).max(1);
    let mut prev_degrees = input_degree.clone();
    let mut masks = Vec::with_capacity(widths.len() - 1);
    for l in 1..widths.len() {
        let is_output = l + 1 == widths.len();
        let n_out = widths[l];
        let degrees: Vec<usize> = if is_output {
            (0..n_out).map(|o| input_degree[o % d]).collect()
        } else {
            (0..n_out).map(|k| k % max_hidden_degree + 1).collect()
        };
        let mut mask = Mat::zeros(n_out, prev_degrees.len());
        for (r, &dr) in degrees.iter().enumerate() {
            for (c, &dc) in prev_degrees.iter().enumerate() {
                let connected = if is_output { dr > dc } else { dr >= dc };
                if connected {
                    mask.set(r, c, 1.0);
                }
            }
        }
        masks.push(mask);
        prev_degrees = degrees;
    }
    masks
}
