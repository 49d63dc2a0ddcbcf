//! Dense feed-forward network: affine layers, ReLU on hidden layers, linear output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{OtocError, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    // weights[l] is sizes[l + 1] x sizes[l], row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Per-column affine normalization `(x - mean) / scale` of network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    /// Column means and standard deviations over all rows of all matrices;
    /// near-constant columns keep scale 1.
    pub fn fit(mats: &[&FeatureMatrix]) -> Self {
        let dim = mats.first().map_or(0, |m| m.dim());
        let mut sum = vec![0.0; dim];
        let mut n = 0usize;
        for m in mats {
            for r in 0..m.rows() {
                sum.iter_mut().zip(m.row(r)).for_each(|(s, v)| *s += v);
            }
            n += m.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        let mut var = vec![0.0; dim];
        for m in mats {
            for r in 0..m.rows() {
                for ((v, x), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *v += (x - mu) * (x - mu);
                }
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n.max(1) as f64).sqrt();
                if sd > 1e-6 { sd } else { 1.0 }
            })
            .collect();
        InputScaling { mean, scale }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let d = m.dim();
        let values = m
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.mean[k % d]) / self.scale[k % d])
            .collect();
        FeatureMatrix::new(m.rows(), d, values).expect("scaled finite features stay finite")
    }
}

/// Activations of one forward pass: `layers[0]` is the input, `layers[l + 1]`
/// the output of layer `l` (post-ReLU for hidden layers).
#[derive(Debug, Clone)]
pub struct Forward {
    layers: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }

    /// Last hidden activation, or the input for a single-layer model.
    pub fn penultimate(&self) -> &[f64] {
        &self.layers[self.layers.len() - 2]
    }
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// He-initialized hidden layers; the output layer starts small so the
    /// initial softmax is close to uniform.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = if l + 1 == layers { 0.1 / (fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
            let normal = Normal::new(0.0, std).unwrap();
            weights.push((0..fan_in * fan_out).map(|_| normal.sample(rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { sizes: sizes.to_vec(), weights, biases })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let weights = sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Mlp { sizes: sizes.to_vec(), weights, biases })
    }

    /// Rebuilds a model from the flattened layout of [`Mlp::params`].
    pub fn from_params(sizes: &[usize], params: &[f64]) -> Result<Self> {
        let mut m = Mlp::zeros(sizes)?;
        if params.len() != m.num_params() {
            return Err(OtocError::validation(format!(
                "expected {} parameters, got {}",
                m.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(OtocError::validation("non-finite model parameter"));
        }
        m.set_params(params);
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    /// Rewrites the first layer so the model applied to raw `x` equals the
    /// current model applied to `(x - mean) / scale`.
    pub fn absorb_input_scaling(&mut self, scaling: &InputScaling) {
        let n_in = self.sizes[0];
        let (w, b) = (&mut self.weights[0], &mut self.biases[0]);
        for (o, bo) in b.iter_mut().enumerate() {
            let row = &mut w[o * n_in..(o + 1) * n_in];
            for (i, wi) in row.iter_mut().enumerate() {
                *wi /= scaling.scale[i];
                *bo -= *wi * scaling.mean[i];
            }
        }
    }

    /// Inverse of [`Mlp::absorb_input_scaling`].
    pub fn extract_input_scaling(&mut self, scaling: &InputScaling) {
        let n_in = self.sizes[0];
        let (w, b) = (&mut self.weights[0], &mut self.biases[0]);
        for (o, bo) in b.iter_mut().enumerate() {
            let row = &mut w[o * n_in..(o + 1) * n_in];
            for (i, wi) in row.iter_mut().enumerate() {
                *bo += *wi * scaling.mean[i];
                *wi *= scaling.scale[i];
            }
        }
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    /// Per layer: weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&params[off..off + nw]);
            off += nw;
            b.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Forward> {
        if input.len() != self.input_dim() {
            return Err(OtocError::validation(format!(
                "input has {} values, model expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> Forward {
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let x = &layers[l];
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.weights[l];
            let mut y = self.biases[l].clone();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += row[i] * x[i];
                }
                y[o] += acc;
                if l != last && y[o] < 0.0 {
                    y[o] = 0.0;
                }
            }
            layers.push(y);
        }
        Forward { layers }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, fwd: &Forward, d_output: &[f64], grads: &mut Grads) {
        let mut delta = d_output.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &fwd.layers[l];
            let gw = &mut grads.weights[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grads.biases[l][o] += d;
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    row[i] += d * x[i];
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    prev[i] += d * row[i];
                }
            }
            // ReLU mask of the layer that produced x.
            for (p, a) in prev.iter_mut().zip(x) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(OtocError::validation(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Grads,
}

impl Sgd {
    pub fn new(model: &Mlp, learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: model.zero_grads() }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Grads) {
        let lr = self.learning_rate;
        let mu = self.momentum;
        for l in 0..model.num_layers() {
            for ((p, v), g) in model.weights[l].iter_mut().zip(self.velocity.weights[l].iter_mut()).zip(&grads.weights[l]) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            for ((p, v), g) in model.biases[l].iter_mut().zip(self.velocity.biases[l].iter_mut()).zip(&grads.biases[l]) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}
