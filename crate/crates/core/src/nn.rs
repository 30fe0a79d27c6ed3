//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Every network is `input -> 64 -> 128 -> 64 -> output` with tanh on the
//! three hidden layers and a linear output layer. The actor applies a softmax
//! to the outputs; the critic reads its single output as the state value.
//! Weights are stored input-major (`weight[i * outputs + o]`) so that both the
//! forward pass and the weight gradient are contiguous `axpy` sweeps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN_SIZES: [usize; 3] = [64, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weight[i * self.outputs..(i + 1) * self.outputs]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `tanh` through a single `exp`; absolute error stays within a few ulp and it
/// is several times cheaper than the libm routine.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let t = (-2.0 * x.abs()).exp();
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

/// `c += a . b` for an `m x k` by `k x n` product; `a` and `b` are given with
/// their (row, column) strides, `c` is dense row-major.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub rows: usize,
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

impl Mlp {
    /// A network of the standard shape for the given input and output widths.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend(HIDDEN_SIZES);
        sizes.push(output);
        Self::with_sizes(&sizes, rng)
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn with_sizes<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s >= 1));
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut layer = Dense::zeros(w[0], w[1]);
                let bound = 1.0 / (w[0] as f64).sqrt();
                for v in &mut layer.weight {
                    *v = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Raw outputs for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::Dimension {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (i, &xi) in a.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, layer.row(i), &mut z);
                }
            }
            if l < last {
                z.iter_mut().for_each(|v| *v = tanh(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass over `rows` inputs laid out row-major in `x`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<ForwardCache> {
        let n_in = self.input_size();
        if x.len() != rows * n_in {
            return Err(Error::Dimension {
                expected: rows * n_in,
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &activations[l];
            let mut out = Vec::with_capacity(rows * layer.outputs);
            for _ in 0..rows {
                out.extend_from_slice(&layer.bias);
            }
            gemm(
                (rows, layer.inputs, layer.outputs),
                (input, layer.inputs as isize, 1),
                (&layer.weight, layer.outputs as isize, 1),
                &mut out,
            );
            if l < last {
                out.iter_mut().for_each(|v| *v = tanh(*v));
            }
            activations.push(out);
        }
        Ok(ForwardCache { rows, activations })
    }

    /// Parameter gradients given `d(objective)/d(output)` for each cached row.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Mlp> {
        let rows = cache.rows;
        let n_out = self.output_size();
        if upstream.len() != rows * n_out {
            return Err(Error::Dimension {
                expected: rows * n_out,
                got: upstream.len(),
            });
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let input = &cache.activations[l];
            for d in delta.chunks_exact(layer.outputs) {
                axpy(1.0, d, &mut g.bias);
            }
            // dW = input^T . delta
            gemm(
                (layer.inputs, rows, layer.outputs),
                (input, 1, layer.inputs as isize),
                (&delta, layer.outputs as isize, 1),
                &mut g.weight,
            );
            if l == 0 {
                break;
            }
            // Propagate through this layer's weights and the previous tanh.
            let mut prev = vec![0.0; rows * layer.inputs];
            gemm(
                (rows, layer.outputs, layer.inputs),
                (&delta, layer.outputs as isize, 1),
                (&layer.weight, 1, layer.outputs as isize),
                &mut prev,
            );
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
        Ok(grads)
    }

    /// Gradients of `upstream · output(x)` for a single input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Mlp> {
        let cache = self.forward_batch(x, 1)?;
        self.backward_batch(&cache, upstream)
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Mlp) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += b;
        }
    }
}

/// A categorical distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    /// Softmax of `logits`, computed via a max-shifted log-sum-exp.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        ActionDistribution { probs, log_probs }
    }

    pub fn from_probs(probs: Vec<f64>) -> Self {
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        ActionDistribution { probs, log_probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Draws an index and returns it with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, f64)> {
        if self.probs.is_empty() || self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::training(format!(
                "cannot sample from degenerate distribution {:?}",
                self.probs
            )));
        }
        let u: f64 = rng.gen();
        let total: f64 = self.probs.iter().sum();
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            acc += p / total;
            chosen = Some(i);
            if u < acc {
                break;
            }
        }
        let i = chosen.ok_or_else(|| Error::training("distribution has no mass"))?;
        Ok((i, self.log_probs[i]))
    }
}

/// Actor head: softmax over the network outputs.
pub fn forward_actor(params: &Mlp, obs: &[f64]) -> Result<ActionDistribution> {
    Ok(ActionDistribution::from_logits(&params.forward(obs)?))
}

/// Critic head: the single network output.
pub fn forward_critic(params: &Mlp, obs: &[f64]) -> Result<f64> {
    let out = params.forward(obs)?;
    if out.len() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            got: out.len(),
        });
    }
    Ok(out[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    pub fn new(params: &Mlp) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam step. Rejects non-finite gradients untouched.
    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp, lr: f64) -> Result<()> {
        if self.m.sizes() != params.sizes() || grads.sizes() != params.sizes() {
            return Err(Error::training("optimizer state shape does not match parameters"));
        }
        if !grads.is_finite() {
            return Err(Error::training("non-finite gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grads.params())
            .zip(self.m.params_mut())
            .zip(self.v.params_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01 + 1e-3;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e3), 1.0);
        assert_eq!(tanh(-1e3), -1.0);
    }
    use crate::rng::derive_stream;

    #[test]
    fn standard_shapes() {
        let mut rng = derive_stream(0, "init");
        assert_eq!(Mlp::new(6, 7, &mut rng).sizes(), vec![6, 64, 128, 64, 7]);
        assert_eq!(Mlp::new(16, 2, &mut rng).sizes(), vec![16, 64, 128, 64, 2]);
        let net = Mlp::new(6, 7, &mut rng);
        for l in &net.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Mlp::new(6, 7, &mut derive_stream(3, "init"));
        let b = Mlp::new(6, 7, &mut derive_stream(3, "init"));
        assert_eq!(a, b);
        let c = Mlp::new(6, 7, &mut derive_stream(4, "init"));
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_uniform_actor_and_zero_critic() {
        let mut rng = derive_stream(0, "init");
        let actor = Mlp::new(6, 7, &mut rng).zeros_like();
        let dist = forward_actor(&actor, &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        for p in dist.probs() {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
        let critic = Mlp::new(6, 1, &mut rng).zeros_like();
        assert_eq!(forward_critic(&critic, &[5.0; 6]).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::new(6, 7, &mut derive_stream(0, "init"));
        assert!(matches!(
            forward_actor(&net, &[0.0; 5]),
            Err(Error::Dimension { expected: 6, got: 5 })
        ));
        assert!(net.backward(&[0.0; 6], &[0.0; 3]).is_err());
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = derive_stream(1, "init");
        let net = Mlp::new(6, 7, &mut rng);
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let cache = net.forward_batch(&x, 3).unwrap();
        for r in 0..3 {
            let single = net.forward(&x[r * 6..(r + 1) * 6]).unwrap();
            for (b, s) in cache.output()[r * 7..(r + 1) * 7].iter().zip(&single) {
                assert!((b - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn critic_stays_finite_for_large_inputs() {
        let net = Mlp::new(6, 1, &mut derive_stream(2, "init"));
        let v = forward_critic(&net, &[1e3, -1e3, 1e3, 1.0, 0.0, 1.0]).unwrap();
        // Hidden activations are bounded by tanh, so |v| <= sum|w_last| + |b_last|.
        let last = net.layers.last().unwrap();
        let bound: f64 = last.weight.iter().map(|w| w.abs()).sum::<f64>() + last.bias[0].abs();
        assert!(v.is_finite() && v.abs() <= bound);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::new(6, 7, &mut derive_stream(2, "init"));
        let g = net.backward(&[1.0, 0.5, -2.0, 1.0, 0.0, 1.0], &[0.0; 7]).unwrap();
        assert!(g.params().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = Mlp::new(6, 7, &mut derive_stream(2, "init"));
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let zeros = net.zeros_like();
        opt.step(&mut net, &zeros, 1e-3).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = Mlp::with_sizes(&[3, 4, 2], &mut derive_stream(2, "init"));
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let mut ones = net.zeros_like();
        ones.params_mut().for_each(|v| *v = 1.0);
        opt.step(&mut net, &ones, 1e-3).unwrap();
        for (a, b) in net.params().zip(before.params()) {
            // m_hat / (sqrt(v_hat) + eps) = 1 / (1 + 1e-8)
            assert!(((b - a) - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = Mlp::with_sizes(&[2, 2], &mut derive_stream(2, "init"));
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let mut g = net.zeros_like();
        g.layers[0].weight[0] = f64::NAN;
        assert!(opt.step(&mut net, &g, 1e-3).is_err());
        assert_eq!(net, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = derive_stream(9, "sample");
        let certain = ActionDistribution::from_probs(vec![1.0, 0.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(certain.sample(&mut rng).unwrap(), (0, 0.0));
        }
        let coin = ActionDistribution::from_probs(vec![0.75, 0.25]);
        let n = 10_000;
        let mut zeros = 0;
        for _ in 0..n {
            let (i, lp) = coin.sample(&mut rng).unwrap();
            assert_eq!(lp, coin.prob(i).ln());
            if i == 0 {
                zeros += 1;
            }
        }
        let f = zeros as f64 / n as f64;
        assert!((f - 0.75).abs() <= 0.02, "{f}");
        let bad = ActionDistribution::from_probs(vec![f64::NAN, 0.5]);
        assert!(bad.sample(&mut rng).is_err());
    }
}
