//! Small fully-connected networks with explicit backpropagation.
//!
//! Parameters are laid out layer by layer, each layer contributing its
//! `out × in` weight matrix (row-major) followed by its `out` biases. A layer
//! may carry a fixed 0/1 connectivity mask; masked weights act as zero in the
//! forward pass and always receive a zero gradient.

use super::{axpy, check_len, Mat, NumError, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weights: Mat,
    bias: Vec<f64>,
    mask: Option<Mat>,
    activation: Activation,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            weights: Mat::zeros(n_out, n_in),
            bias: vec![0.0; n_out],
            mask: None,
            activation,
        }
    }

    pub fn from_parts(weights: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self, NumError> {
        check_len("Dense::from_parts", weights.rows(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            mask: None,
            activation,
        })
    }

    pub fn n_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.n_in() * self.n_out() + self.n_out()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Per-layer inputs and outputs recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

/// Feed-forward network: tanh on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// All-zero network with the given layer widths `[in, h1, ..., out]`.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Tanh
                };
                Dense::zeros(widths[l], widths[l + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NumError> {
        for pair in layers.windows(2) {
            check_len("Mlp::from_layers", pair[0].n_out(), pair[1].n_in())?;
        }
        assert!(!layers.is_empty(), "an MLP needs at least one layer");
        Ok(Self { layers })
    }

    /// Attach connectivity masks, one per layer (`out × in`, entries 0 or 1).
    /// Masked weights are zeroed so the parameter vector stays tidy.
    pub fn with_masks(mut self, masks: Vec<Mat>) -> Result<Self, NumError> {
        check_len("Mlp::with_masks", self.layers.len(), masks.len())?;
        for (layer, mask) in self.layers.iter_mut().zip(masks) {
            check_len("Mlp::with_masks rows", layer.n_out(), mask.rows())?;
            check_len("Mlp::with_masks cols", layer.n_in(), mask.cols())?;
            layer.weights = layer.weights.hadamard(&mask)?;
            layer.mask = Some(mask);
        }
        Ok(self)
    }

    /// Glorot-uniform initialization of the hidden layers; the output layer
    /// is left at zero so the network starts as the zero function while
    /// still passing gradient to its output weights.
    pub fn init_hidden(&mut self, rng: &mut Rng) {
        let n = self.layers.len();
        for layer in self.layers.iter_mut().take(n.saturating_sub(1)) {
            let (n_in, n_out) = (layer.n_in(), layer.n_out());
            let limit = (6.0 / (n_in + n_out).max(1) as f64).sqrt();
            for r in 0..n_out {
                for c in 0..n_in {
                    let keep = layer.mask.as_ref().map_or(1.0, |m| m.get(r, c));
                    layer.weights.set(r, c, keep * limit * (2.0 * rng.uniform() - 1.0));
                }
            }
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NumError> {
        check_len("Mlp::set_params", self.param_count(), params.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.n_in() * layer.n_out();
            layer
                .weights
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + nw]);
            if let Some(mask) = &layer.mask {
                layer.weights = layer.weights.hadamard(mask)?;
            }
            offset += nw;
            let nb = layer.n_out();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), NumError> {
        check_len("Mlp::forward", self.input_width(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            // masked entries of `weights` are held at zero
            let mut y = layer.weights.matvec(&h)?;
            for (yi, bi) in y.iter_mut().zip(&layer.bias) {
                *yi += bi;
                if layer.activation == Activation::Tanh {
                    *yi = yi.tanh();
                }
            }
            inputs.push(std::mem::replace(&mut h, y.clone()));
            outputs.push(y);
        }
        Ok((h, MlpCache { inputs, outputs }))
    }

    /// Reverse-mode gradients of `⟨upstream, y⟩` with respect to the input
    /// and to every parameter (flat, same layout as [`Mlp::params`]).
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NumError> {
        check_len("Mlp::backward layers", self.layers.len(), cache.outputs.len())?;
        check_len("Mlp::backward", self.output_width(), upstream.len())?;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let output = &cache.outputs[l];
            check_len("Mlp::backward input", layer.n_in(), input.len())?;
            check_len("Mlp::backward output", layer.n_out(), output.len())?;
            if layer.activation == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(output) {
                    *d *= 1.0 - y * y;
                }
            }
            let mut g = vec![0.0; layer.param_count()];
            let nw = layer.n_in() * layer.n_out();
            {
                let (gw, gb) = g.split_at_mut(nw);
                for (r, &dr) in delta.iter().enumerate() {
                    if dr != 0.0 {
                        axpy(dr, input, &mut gw[r * layer.n_in()..(r + 1) * layer.n_in()]);
                    }
                    gb[r] = dr;
                }
                if let Some(mask) = &layer.mask {
                    for (gi, mi) in gw.iter_mut().zip(mask.as_slice()) {
                        *gi *= mi;
                    }
                }
            }
            grads.push(g);
            delta = layer.weights.matvec_t(&delta)?;
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads.into_iter().rev() {
            flat.extend(g);
        }
        Ok((delta, flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_grad;
    use proptest::prelude::*;
    use crate::numkit::Rng;

    fn linear_2x_plus_1() -> Mlp {
        let layer = Dense::from_parts(
            Mat::from_rows(&[vec![2.0]]).unwrap(),
            vec![1.0],
            Activation::Identity,
        )
        .unwrap();
        Mlp::from_layers(vec![layer]).unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 16, 16, 4]);
        let (y, _) = net.forward(&[0.3, -1.2, 5.0]).unwrap();
        assert_eq!(y, vec![0.0; 4]);
        assert_eq!(net.param_count(), 3 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
    }

    #[test]
    fn single_linear_layer() {
        let net = linear_2x_plus_1();
        let (y, cache) = net.forward(&[3.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        let (dx, dp) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(dx, vec![2.0]);
        assert_eq!(dp, vec![3.0, 1.0]);
    }

    #[test]
    fn single_tanh_layer_at_zero() {
        let layer = Dense::zeros(1, 1, Activation::Tanh);
        let net = Mlp::from_layers(vec![layer]).unwrap();
        assert_eq!(net.forward(&[5.0]).unwrap().0, vec![0.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = Mlp::zeros(&[2, 5, 3]);
        net.init_hidden(&mut Rng::new(3));
        let (_, cache) = net.forward(&[0.5, -0.5]).unwrap();
        let (dx, dp) = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(dx.iter().chain(&dp).all(|&g| g == 0.0));
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[2, 4, 1]);
        assert!(net.forward(&[1.0]).is_err());
        let other = Mlp::zeros(&[2, 4, 4, 1]);
        let (_, stale) = other.forward(&[1.0, 2.0]).unwrap();
        assert!(net.backward(&stale, &[1.0]).is_err());
        let (_, cache) = net.forward(&[1.0, 2.0]).unwrap();
        assert!(net.backward(&cache, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut net = Mlp::zeros(&[2, 3, 2]);
        net.init_hidden(&mut Rng::new(9));
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64 * 0.1).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
    }

    #[test]
    fn masked_weights_have_no_effect_or_gradient() {
        let mask = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let net = Mlp::zeros(&[2, 1]).with_masks(vec![mask]).unwrap();
        let mut net2 = net.clone();
        net2.set_params(&[0.7, 5.0, 0.1]).unwrap();
        let (y, cache) = net2.forward(&[1.0, 100.0]).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-15);
        let (dx, dp) = net2.backward(&cache, &[1.0]).unwrap();
        assert_eq!(dx, vec![0.7, 0.0]);
        assert_eq!(dp, vec![1.0, 0.0, 1.0]);
    }

    fn random_net(rng: &mut Rng, widths: &[usize]) -> Mlp {
        let mut net = Mlp::zeros(widths);
        let p: Vec<f64> = (0..net.param_count()).map(|_| 0.6 * rng.normal()).collect();
        net.set_params(&p).unwrap();
        net
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(120))]
        #[test]
        fn backward_matches_finite_differences(
            seed in 0u64..10_000,
            depth in 1usize..=3,
            w in 1usize..=16,
            n_in in 1usize..=4,
            n_out in 1usize..=3,
        ) {
            let mut rng = Rng::new(seed);
            let mut widths = vec![n_in];
            widths.extend(std::iter::repeat_n(w, depth - 1));
            widths.push(n_out);
            let net = random_net(&mut rng, &widths);
            let x = rng.normal_vec(n_in);
            let u = rng.normal_vec(n_out);
            let (_, cache) = net.forward(&x).unwrap();
            let (dx, dp) = net.backward(&cache, &u).unwrap();

            let f_x = |xx: &[f64]| crate::numkit::dot(&net.forward(xx).unwrap().0, &u);
            let fd_x = finite_diff_grad(f_x, &x, 1e-5).unwrap();
            for (a, b) in dx.iter().zip(&fd_x) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "dx {a} vs {b}");
            }
            let p0 = net.params();
            let f_p = |pp: &[f64]| {
                let mut n2 = net.clone();
                n2.set_params(pp).unwrap();
                crate::numkit::dot(&n2.forward(&x).unwrap().0, &u)
            };
            let fd_p = finite_diff_grad(f_p, &p0, 1e-5).unwrap();
            for (a, b) in dp.iter().zip(&fd_p) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "dp {a} vs {b}");
            }
        }
    }
}
