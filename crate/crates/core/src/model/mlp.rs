//! A small fully-connected network with hand-written reverse mode.
//!
//! Parameters live in one flat vector, layer by layer, each layer's weight
//! matrix (`out × in`, row-major) followed by its bias. Gradients use the same
//! layout so the optimizer and checkpoint code never need to know the shapes.

use std::f64::consts::PI;

use crate::error::{dim_err, Error, Result};
use crate::rng::RngStream;

/// Sinusoidal features of `t` followed by a one-hot stage code, appended to
/// every network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    /// Number of frequencies; each contributes a sine and a cosine.
    pub frequencies: usize,
    /// Length of the stage one-hot (0 disables it).
    pub stages: usize,
}

impl TimeEmbedding {
    pub const NONE: TimeEmbedding = TimeEmbedding {
        frequencies: 0,
        stages: 0,
    };

    pub fn dim(&self) -> usize {
        2 * self.frequencies + self.stages
    }

    fn write(&self, t: f64, stage: usize, out: &mut [f64]) -> Result<()> {
        if self.stages > 0 && stage >= self.stages {
            return dim_err(format!(
                "stage {stage} outside embedding with {} stages",
                self.stages
            ));
        }
        for i in 0..self.frequencies {
            let w = PI * (1u64 << i) as f64 * t;
            out[2 * i] = w.sin();
            out[2 * i + 1] = w.cos();
        }
        let one_hot = &mut out[2 * self.frequencies..];
        one_hot.fill(0.0);
        if self.stages > 0 {
            one_hot[stage] = 1.0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `x * sigmoid(x)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    /// Layer widths including the (embedding-extended) input and the output.
    dims: Vec<usize>,
    params: Vec<f64>,
    embedding: TimeEmbedding,
    activation: Activation,
}

/// Scratch buffers holding the activations of the last forward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    filled: bool,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl MlpNet {
    /// Randomly initialised network mapping `input` raw features to `output`
    /// values through the given hidden widths.
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        embedding: TimeEmbedding,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![input + embedding.dim()];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut net = Self::zeros(dims, embedding, activation)?;
        let mut rng = RngStream::new(seed, 0x6d6c70);
        let n_layers = net.num_layers();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (net.dims[l], net.dims[l + 1]);
            let std = if l + 1 == n_layers {
                0.1 / (fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = std * rng.normal();
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: Vec<usize>, embedding: TimeEmbedding, activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return dim_err(format!("invalid layer dims {dims:?}"));
        }
        if dims[0] < embedding.dim() {
            return dim_err(format!(
                "input width {} smaller than embedding width {}",
                dims[0],
                embedding.dim()
            ));
        }
        let n = param_count(&dims);
        Ok(Self {
            dims,
            params: vec![0.0; n],
            embedding,
            activation,
        })
    }

    pub fn from_params(
        dims: Vec<usize>,
        embedding: TimeEmbedding,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, embedding, activation)?;
        if params.len() != net.params.len() {
            return dim_err(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Width of the raw input, excluding the embedding.
    pub fn input_dim(&self) -> usize {
        self.dims[0] - self.embedding.dim()
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            inputs: self.dims.iter().map(|&d| vec![0.0; d]).collect(),
            pre: self.dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            filled: false,
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    /// Forward pass; activations are cached in `ws` for [`MlpNet::backward`].
    pub fn forward<'w>(
        &self,
        ws: &'w mut Workspace,
        input: &[f64],
        t: f64,
        stage: usize,
    ) -> Result<&'w [f64]> {
        let raw = self.input_dim();
        if input.len() != raw {
            return dim_err(format!("network expects {raw} inputs, got {}", input.len()));
        }
        ws.filled = false;
        ws.inputs[0][..raw].copy_from_slice(input);
        self.embedding.write(t, stage, &mut ws.inputs[0][raw..])?;
        let n_layers = self.num_layers();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let (before, after) = ws.inputs.split_at_mut(l + 1);
            let x = &before[l];
            let pre = &mut ws.pre[l];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                pre[o] = acc;
            }
            let y = &mut after[0];
            if l + 1 == n_layers {
                y.copy_from_slice(pre);
            } else {
                for (yo, &z) in y.iter_mut().zip(pre.iter()) {
                    *yo = self.activation.apply(z);
                }
            }
            offset += (fan_in + 1) * fan_out;
        }
        ws.filled = true;
        Ok(&ws.inputs[n_layers])
    }

    /// Allocating convenience wrapper around [`MlpNet::forward`].
    pub fn predict(&self, input: &[f64], t: f64, stage: usize) -> Result<Vec<f64>> {
        let mut ws = self.workspace();
        Ok(self.forward(&mut ws, input, t, stage)?.to_vec())
    }

    /// Accumulates `d(upstream · output)/d(params)` into `grads`, using the
    /// activations cached by the most recent forward pass in `ws`.
    pub fn backward(&self, ws: &mut Workspace, upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if !ws.filled {
            return Err(Error::State(
                "backward called without a cached forward pass".into(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return dim_err(format!(
                "upstream gradient has {} entries, network output {}",
                upstream.len(),
                self.output_dim()
            ));
        }
        if grads.len() != self.params.len() {
            return dim_err(format!(
                "gradient buffer has {} entries, network {}",
                grads.len(),
                self.params.len()
            ));
        }
        let n_layers = self.num_layers();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += (self.dims[l] + 1) * self.dims[l + 1];
        }
        let mut delta = std::mem::take(&mut ws.delta);
        let mut delta_prev = std::mem::take(&mut ws.delta_prev);
        delta.clear();
        delta.extend_from_slice(upstream);
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let x = &ws.inputs[l];
            let (gw, gb) = grads[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x.iter()) {
                    *g += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            delta_prev.clear();
            delta_prev.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (dp, wi) in delta_prev.iter_mut().zip(row.iter()) {
                    *dp += d * wi;
                }
            }
            for (dp, &z) in delta_prev.iter_mut().zip(ws.pre[l - 1].iter()) {
                *dp *= self.activation.derivative(z);
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
        ws.delta = delta;
        ws.delta_prev = delta_prev;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(seed: u64, input: usize, hidden: &[usize], output: usize) -> MlpNet {
        let emb = TimeEmbedding {
            frequencies: 2,
            stages: 3,
        };
        let mut net = MlpNet::new(input, hidden, output, emb, Activation::Silu, seed).unwrap();
        // perturb biases and the small output layer so every path is exercised
        let mut rng = RngStream::new(seed, 1);
        for p in net.params_mut() {
            *p += 0.3 * rng.normal();
        }
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpNet::zeros(vec![3, 4, 2], TimeEmbedding::NONE, Activation::Silu).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.0], 0.5, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_echoes_input() {
        let mut params = vec![0.0; 12];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = MlpNet::from_params(vec![3, 3], TimeEmbedding::NONE, Activation::Silu, params).unwrap();
        assert_eq!(net.predict(&[1.0, -2.0, 3.5], 0.0, 0).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn param_count_formula() {
        let net = random_net(1, 2, &[8, 5], 2);
        assert_eq!(net.num_params(), (2 + 7 + 1) * 8 + (8 + 1) * 5 + (5 + 1) * 2);
    }

    #[test]
    fn input_length_and_stage_are_checked() {
        let net = random_net(1, 2, &[4], 2);
        assert!(net.predict(&[1.0], 0.0, 0).is_err());
        assert!(net.predict(&[1.0, 2.0], 0.0, 3).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let net = random_net(2, 2, &[4], 2);
        let mut ws = net.workspace();
        let mut g = vec![0.0; net.num_params()];
        assert!(matches!(
            net.backward(&mut ws, &[1.0, 1.0], &mut g),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let net = random_net(3, 3, &[6, 6], 2);
        let mut ws = net.workspace();
        net.forward(&mut ws, &[0.1, 0.2, -0.3], 0.4, 1).unwrap();
        let mut g0 = vec![0.0; net.num_params()];
        net.backward(&mut ws, &[0.0, 0.0], &mut g0).unwrap();
        assert!(g0.iter().all(|&g| g == 0.0));
        let mut g1 = vec![0.0; net.num_params()];
        let mut g2 = vec![0.0; net.num_params()];
        net.backward(&mut ws, &[0.7, -1.1], &mut g1).unwrap();
        net.backward(&mut ws, &[1.4, -2.2], &mut g2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    /// Central finite differences of `|f(x)|^2 / 2` with respect to the parameters.
    fn numeric_grad(net: &MlpNet, x: &[f64], t: f64, stage: usize, h: f64) -> Vec<f64> {
        let mut probe = net.clone();
        let loss = |n: &MlpNet| -> f64 {
            n.predict(x, t, stage).unwrap().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        (0..net.num_params())
            .map(|i| {
                let p = net.params()[i];
                probe.params_mut()[i] = p + h;
                let up = loss(&probe);
                probe.params_mut()[i] = p - h;
                let down = loss(&probe);
                probe.params_mut()[i] = p;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, act) in [(10, Activation::Silu), (11, Activation::Tanh)] {
            let mut net = random_net(seed, 3, &[5, 4], 2);
            net.activation = act;
            let x = [0.3, -0.7, 1.2];
            let mut ws = net.workspace();
            let out = net.forward(&mut ws, &x, 0.37, 2).unwrap().to_vec();
            let mut g = vec![0.0; net.num_params()];
            net.backward(&mut ws, &out, &mut g).unwrap();
            let num = numeric_grad(&net, &x, 0.37, 2, 1e-5);
            let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
        }
    }
}
