//! Dense feedforward networks with reverse-mode gradients and Adam.
//!
//! Parameters live in one flat buffer (per layer: row-major weights, then
//! bias) so optimizer state, gradient clipping and serialization all work on
//! plain slices.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Network parameters: layer shapes plus the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer post-activation values recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape has input layer")
    }
}

impl Mlp {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let shapes: Vec<LayerShape> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == sizes.len() { output } else { hidden },
            })
            .collect();
        let mut mlp = Self::zeros(shapes);
        for l in 0..mlp.shapes.len() {
            let s = mlp.shapes[l];
            let limit = (6.0 / (s.inputs + s.outputs) as f64).sqrt();
            let off = mlp.offsets[l];
            for w in &mut mlp.params[off..off + s.inputs * s.outputs] {
                *w = rng.random_range(-limit..limit);
            }
        }
        mlp
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        for pair in shapes.windows(2) {
            assert_eq!(pair[0].outputs, pair[1].inputs, "layer dimensions must chain");
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut n = 0;
        for s in &shapes {
            offsets.push(n);
            n += s.len();
        }
        Mlp {
            shapes,
            offsets,
            params: vec![0.0; n],
        }
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().outputs
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

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let off = self.offsets[layer];
        &self.params[off..off + s.inputs * s.outputs]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let off = self.offsets[layer] + s.inputs * s.outputs;
        &self.params[off..off + s.outputs]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let off = self.offsets[layer] + s.inputs * s.outputs;
        &mut self.params[off..off + s.outputs]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, layer: usize, x: &[f64], out: &mut Vec<f64>) {
        let s = self.shapes[layer];
        let w = self.weights(layer);
        let b = self.bias(layer);
        out.clear();
        for o in 0..s.outputs {
            let row = &w[o * s.inputs..(o + 1) * s.inputs];
            let z = row.iter().zip(x).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
            out.push(s.activation.apply(z));
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.shapes.len() {
            self.layer_forward(l, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Tape> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.shapes.len() + 1);
        activations.push(x.to_vec());
        for l in 0..self.shapes.len() {
            let mut out = Vec::with_capacity(self.shapes[l].outputs);
            self.layer_forward(l, &activations[l], &mut out);
            activations.push(out);
        }
        Ok(Tape { activations })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let n = self.shapes.len();
        let out = &tape.activations[n];
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(out)
            .map(|(g, a)| g * self.shapes[n - 1].activation.derivative_from_output(*a))
            .collect();
        for l in (0..n).rev() {
            let s = self.shapes[l];
            let x = &tape.activations[l];
            let off = self.offsets[l];
            let (gw, gb) = grads[off..off + s.len()].split_at_mut(s.inputs * s.outputs);
            for o in 0..s.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, xi) in gw[o * s.inputs..(o + 1) * s.inputs].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let w = self.weights(l);
            let mut prev = vec![0.0; s.inputs];
            for o in 0..s.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * s.inputs..(o + 1) * s.inputs]) {
                    *p += wi * d;
                }
            }
            if l > 0 {
                let act = self.shapes[l - 1].activation;
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= act.derivative_from_output(*a);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `upstream · forward(x)` with respect to parameters and input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = self.forward_cached(x)?;
        let mut grads = self.zero_grad();
        let input_grad = self.backward_into(&tape, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ParamHeader {
            layers: self.shapes.clone(),
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Serialization(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing parameter-file magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ParamHeader =
            serde_json::from_slice(json).map_err(|e| Error::Serialization(e.to_string()))?;
        if header.layers.is_empty()
            || header.layers.windows(2).any(|p| p[0].outputs != p[1].inputs)
        {
            return Err(bad("layer dimensions do not chain"));
        }
        let mut mlp = Mlp::zeros(header.layers);
        if mlp.params.len() != header.param_count {
            return Err(bad("parameter count disagrees with layer shapes"));
        }
        let body = &bytes[8 + hlen..];
        if body.len() != 8 * header.param_count {
            return Err(bad("parameter payload has wrong length"));
        }
        for (p, chunk) in mlp.params.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !mlp.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

const MAGIC: &[u8; 4] = b"MLP1";

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    layers: Vec<LayerShape>,
    param_count: usize,
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_mlp(mlp: &Mlp) -> Self {
        Self::new(mlp.num_params())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], hidden: Activation, out: Activation, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(sizes, hidden, out, &mut rng);
        for l in 0..net.shapes().len() {
            for b in net.bias_mut(l) {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        net
    }

    /// Independent forward pass over explicit nested loops.
    fn oracle_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, s) in net.shapes().iter().enumerate() {
            let w = net.weights(l);
            let b = net.bias(l);
            let mut z = vec![0.0; s.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                *zo = b[o];
                for i in 0..s.inputs {
                    *zo += w[o * s.inputs + i] * a[i];
                }
            }
            a = z
                .into_iter()
                .map(|z| match s.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => z,
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                })
                .collect();
        }
        a
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(vec![
            LayerShape {
                inputs: 3,
                outputs: 4,
                activation: Activation::Tanh,
            },
            LayerShape {
                inputs: 4,
                outputs: 2,
                activation: Activation::Identity,
            },
        ]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Mlp::zeros(vec![LayerShape {
            inputs: 3,
            outputs: 3,
            activation: Activation::Identity,
        }]);
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_oracle() {
        let net = random_net(&[5, 16, 3], Activation::Tanh, Activation::Identity, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = net.forward(&x).unwrap();
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = random_net(&[5, 4, 3], Activation::Tanh, Activation::Identity, 1);
        assert!(matches!(
            net.forward(&[1.0; 4]),
            Err(Error::DimensionMismatch {
                expected: 5,
                got: 4
            })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = random_net(&[4, 8, 2], Activation::Tanh, Activation::Identity, 2);
        let (g, gi) = net.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let net = random_net(&[3, 2], Activation::Identity, Activation::Identity, 3);
        let x = [0.5, -1.5, 2.0];
        let up = [1.25, -0.75];
        let (g, _) = net.backward(&x, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], up[o] * x[i]);
            }
            assert_eq!(g[6 + o], up[o]);
        }
    }

    fn finite_difference_check(net: &Mlp, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..net.input_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let up: Vec<f64> = (0..net.output_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = |n: &Mlp, x: &[f64]| -> f64 {
            n.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let (g, gi) = net.backward(&x, &up).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        for i in 0..net.num_params() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let lp = loss(&probe, &x);
            probe.params_mut()[i] = orig - h;
            let lm = loss(&probe, &x);
            probe.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(net, &xp) - loss(net, &xm)) / (2.0 * h);
            worst = worst.max((fd - gi[i]).abs() / fd.abs().max(gi[i].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let acts = [
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Identity,
            Activation::Relu,
        ];
        for (k, &hidden) in acts.iter().enumerate() {
            for (j, &out) in acts.iter().enumerate() {
                for sizes in [&[3usize, 7, 2][..], &[6, 64, 64, 4][..]] {
                    let net = random_net(sizes, hidden, out, (k * 10 + j) as u64);
                    let err = finite_difference_check(&net, 99);
                    assert!(err < 1e-4, "{hidden:?}/{out:?} {sizes:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_stable() {
        let net = random_net(&[4, 32, 3], Activation::Tanh, Activation::Sigmoid, 5);
        let x = [0.3, -0.2, 0.9, 1.4];
        let a = net.forward(&x).unwrap();
        for _ in 0..10 {
            assert_eq!(net.forward(&x).unwrap(), a);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let lr = 1e-3;
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.37, -5.0, 1e-2], &mut st, lr);
        for v in p {
            assert!((v.abs() - lr).abs() < 1e-6 * lr);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let target = 3.7;
        let mut x = vec![-2.0];
        let mut st = AdamState::new(1);
        let mut reached = None;
        for step in 0..2000 {
            let g = 2.0 * (x[0] - target);
            adam_step(&mut x, &[g], &mut st, 1e-2);
            if (x[0] - target).abs() < 1e-3 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "final x = {}", x[0]);
        assert!((x[0] - target).abs() < 1e-3);
    }

    #[test]
    fn serialization_roundtrip_and_rejects_garbage() {
        let net = random_net(&[28, 64, 64, 3], Activation::Tanh, Activation::Identity, 9);
        let bytes = net.to_bytes();
        assert_eq!(Mlp::from_bytes(&bytes).unwrap(), net);
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Mlp::from_bytes(b"nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
    }
}
