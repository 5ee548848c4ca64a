//! Feed-forward head over precomputed utterance-level features.
//!
//! Hidden layers use ReLU; the output layer is either a softmax or one of
//! the evidence activations (ReLU, softplus, clamped exponential). All
//! parameters live in one flat vector so the optimizer and gradient checks
//! can treat them uniformly.

mod ensemble;
mod persist;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletPrediction;
use crate::error::{EdlError, Result};
use crate::special::softmax_unchecked;

pub use ensemble::{Ensemble, EnsembleConfig, MemberTrace};
pub use train::{mean_loss, train, train_with_validation, Optimizer, TrainConfig, TrainOutcome, TrainSet};

/// Pre-activations are clamped to this range before exponentiation.
pub const EXP_CLAMP: f64 = 10.0;

/// Number of stochastic passes used for Monte-Carlo dropout by default.
pub const DEFAULT_MC_PASSES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softmax,
    ReluEvidence,
    SoftplusEvidence,
    ExpEvidence,
}

impl OutputActivation {
    pub fn is_evidential(self) -> bool {
        self != OutputActivation::Softmax
    }

    fn evidence(self, z: f64) -> f64 {
        match self {
            OutputActivation::Softmax => unreachable!("softmax has no evidence"),
            OutputActivation::ReluEvidence => z.max(0.0),
            OutputActivation::SoftplusEvidence => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            OutputActivation::ExpEvidence => z.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
        }
    }

    fn evidence_derivative(self, z: f64) -> f64 {
        match self {
            OutputActivation::Softmax => unreachable!("softmax has no evidence"),
            OutputActivation::ReluEvidence => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            OutputActivation::SoftplusEvidence => 1.0 / (1.0 + (-z).exp()),
            OutputActivation::ExpEvidence => {
                if z.abs() < EXP_CLAMP {
                    z.exp()
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_outputs: usize,
    pub output_activation: OutputActivation,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![256]
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_outputs: usize, output_activation: OutputActivation) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            num_outputs,
            output_activation,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_outputs == 0 || self.hidden_dims.contains(&0) {
            return Err(EdlError::Config("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EdlError::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_outputs));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    // offset of the row-major fan_out × fan_in weights; biases follow
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
    // bumped on every parameter write; forward caches record it
    revision: u64,
}

/// Intermediate values of one forward pass, needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    /// Input to each layer (post-dropout for hidden layers).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    /// Inverted-dropout scale per hidden unit (0 or 1/(1−p)); empty when off.
    dropout_masks: Vec<Vec<f64>>,
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardCache {
    /// Raw pre-activations of the output layer.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Activated output: probabilities for softmax, evidence otherwise.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activation values of each hidden layer.
    pub fn hidden_preactivations(&self) -> &[Vec<f64>] {
        &self.hidden_pre
    }
}

impl Model {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut shapes = Vec::new();
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let shape = LayerShape {
                fan_in,
                fan_out,
                offset: params.len(),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
            shapes.push(shape);
        }
        Ok(Self {
            config,
            shapes,
            params,
            revision: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.params
    }

    /// Deterministic forward pass without dropout.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_pass(x, None)?.output)
    }

    /// Forward pass keeping the intermediates for [`Model::backward`].
    /// Dropout is applied to hidden activations when an RNG is supplied and
    /// the model has a nonzero dropout rate.
    pub fn forward_pass(
        &self,
        x: &[f64],
        mut dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardCache> {
        if x.len() != self.config.input_dim {
            return Err(EdlError::DimensionMismatch {
                expected: self.config.input_dim,
                found: x.len(),
            });
        }
        if self.config.dropout_rate == 0.0 {
            dropout = None;
        }
        let n_hidden = self.shapes.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.shapes.len());
        let mut hidden_pre = Vec::with_capacity(n_hidden);
        let mut dropout_masks = Vec::new();
        let mut h = x.to_vec();
        let keep = 1.0 - self.config.dropout_rate;
        for shape in &self.shapes[..n_hidden] {
            let z = self.affine(shape, &h);
            let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            if let Some(rng) = dropout.as_deref_mut() {
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                dropout_masks.push(mask);
            }
            layer_inputs.push(std::mem::replace(&mut h, a));
            hidden_pre.push(z);
        }
        let last = self.shapes[n_hidden];
        let logits = self.affine(&last, &h);
        layer_inputs.push(h);
        let act = self.config.output_activation;
        let output = match act {
            OutputActivation::Softmax => softmax_unchecked(&logits),
            _ => logits.iter().map(|&z| act.evidence(z)).collect(),
        };
        Ok(ForwardCache {
            revision: self.revision,
            layer_inputs,
            hidden_pre,
            dropout_masks,
            logits,
            output,
        })
    }

    fn affine(&self, shape: &LayerShape, input: &[f64]) -> Vec<f64> {
        let w = &self.params[shape.weights()];
        let b = &self.params[shape.bias()];
        (0..shape.fan_out)
            .map(|o| {
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                b[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// The quantity losses are expressed in: logits for a softmax head and
    /// α = evidence + 1 for an evidential head.
    pub fn loss_input(&self, cache: &ForwardCache) -> Vec<f64> {
        if self.config.output_activation.is_evidential() {
            cache.output.iter().map(|e| e + 1.0).collect()
        } else {
            cache.logits.clone()
        }
    }

    /// Parameter gradients given the loss gradient with respect to
    /// [`Model::loss_input`].
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(cache, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale ×` the parameter gradient into `grads`.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        if cache.revision != self.revision {
            return Err(EdlError::StaleCache);
        }
        if upstream.len() != self.config.num_outputs {
            return Err(EdlError::DimensionMismatch {
                expected: self.config.num_outputs,
                found: upstream.len(),
            });
        }
        let act = self.config.output_activation;
        let mut delta: Vec<f64> = if act.is_evidential() {
            upstream
                .iter()
                .zip(&cache.logits)
                .map(|(g, &z)| scale * g * act.evidence_derivative(z))
                .collect()
        } else {
            upstream.iter().map(|g| scale * g).collect()
        };
        for (l, shape) in self.shapes.iter().enumerate().rev() {
            let input = &cache.layer_inputs[l];
            let (w_range, b_range) = (shape.weights(), shape.bias());
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[b_range.start + o] += d;
                let row = &mut grads[w_range.start + o * shape.fan_in..w_range.start + (o + 1) * shape.fan_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[w_range];
            let mut back = vec![0.0; shape.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            let pre = &cache.hidden_pre[l - 1];
            let mask = cache.dropout_masks.get(l - 1);
            for (i, b) in back.iter_mut().enumerate() {
                let relu = if pre[i] > 0.0 { 1.0 } else { 0.0 };
                *b *= relu * mask.map_or(1.0, |m| m[i]);
            }
            delta = back;
        }
        Ok(())
    }

    /// Class probabilities: the softmax output, or E[η] for an evidential head.
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(x)?;
        Ok(self.probs_from_output(out))
    }

    pub(crate) fn probs_from_output(&self, out: Vec<f64>) -> Vec<f64> {
        if self.config.output_activation.is_evidential() {
            let s: f64 = out.iter().sum::<f64>() + out.len() as f64;
            out.iter().map(|e| (e + 1.0) / s).collect()
        } else {
            out
        }
    }

    /// Dirichlet prediction from an evidential head.
    pub fn predict_dirichlet(&self, x: &[f64]) -> Result<DirichletPrediction> {
        if !self.config.output_activation.is_evidential() {
            return Err(EdlError::Config(
                "a softmax head does not produce a Dirichlet".into(),
            ));
        }
        DirichletPrediction::from_evidence(&self.forward(x)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McDropoutPrediction {
    pub mean: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl McDropoutPrediction {
    pub fn confidence(&self) -> f64 {
        self.mean.iter().copied().fold(0.0, f64::max)
    }
}

/// Averages `passes` stochastic forward passes with dropout active.
pub fn mc_dropout_predict(
    m: &Model,
    x: &[f64],
    passes: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<McDropoutPrediction> {
    if passes == 0 {
        return Err(EdlError::InvalidInput("MC dropout needs at least one pass".into()));
    }
    let k = m.config.num_outputs;
    let mut mean = vec![0.0; k];
    let mut samples = Vec::with_capacity(passes);
    for _ in 0..passes {
        let cache = m.forward_pass(x, Some(rng))?;
        let p = m.probs_from_output(cache.output);
        for (a, b) in mean.iter_mut().zip(&p) {
            *a += b;
        }
        samples.push(p);
    }
    for a in &mut mean {
        *a /= passes as f64;
    }
    Ok(McDropoutPrediction { mean, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(act: OutputActivation, k: usize) -> Model {
        let mut cfg = ModelConfig::new(3, k, act);
        cfg.hidden_dims = vec![4];
        let mut m = Model::new(cfg).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        m
    }

    #[test]
    fn zero_network_outputs() {
        let m = zeroed(OutputActivation::ReluEvidence, 5);
        let p = m.predict_dirichlet(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(p.alpha(), vec![1.0; 5]);
        assert_eq!(p.uncertainty(), 1.0);
        let m = zeroed(OutputActivation::Softmax, 5);
        let out = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert!(out.iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut cfg = ModelConfig::new(3, 4, OutputActivation::SoftplusEvidence);
        cfg.dropout_rate = 0.5;
        let m = Model::new(cfg).unwrap();
        let x = [0.1, 0.2, -0.3];
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.forward_pass(&x, None).unwrap();
        assert_eq!(a.output(), m.forward(&x).unwrap().as_slice());
        let b = m.forward_pass(&x, Some(&mut rng)).unwrap();
        assert_ne!(b.output(), a.output());
    }

    #[test]
    fn dimension_mismatch() {
        let m = Model::new(ModelConfig::new(3, 2, OutputActivation::Softmax)).unwrap();
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(EdlError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn evidence_activations_stay_finite_and_nonnegative() {
        for act in [
            OutputActivation::ReluEvidence,
            OutputActivation::SoftplusEvidence,
            OutputActivation::ExpEvidence,
        ] {
            for i in 0..=1000 {
                let z = -50.0 + 0.1 * i as f64;
                let e = act.evidence(z);
                assert!(e.is_finite() && e >= 0.0, "{act:?} at {z} gave {e}");
            }
        }
        assert_eq!(OutputActivation::ExpEvidence.evidence(50.0), EXP_CLAMP.exp());
        let sp = OutputActivation::SoftplusEvidence;
        assert!((sp.evidence(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sp.evidence(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::new(ModelConfig::new(3, 2, OutputActivation::ExpEvidence)).unwrap();
        let cache = m.forward_pass(&[0.3, -0.1, 0.9], None).unwrap();
        let g = m.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let mut cfg = ModelConfig::new(3, 2, OutputActivation::Softmax);
        cfg.hidden_dims = vec![];
        let m = Model::new(cfg).unwrap();
        let x = [0.5, -1.0, 2.0];
        let up = [0.25, -0.75];
        let cache = m.forward_pass(&x, None).unwrap();
        let g = m.backward(&cache, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], up[o] * x[i]);
            }
            assert_eq!(g[6 + o], up[o]);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = Model::new(ModelConfig::new(2, 2, OutputActivation::Softmax)).unwrap();
        let cache = m.forward_pass(&[1.0, 1.0], None).unwrap();
        m.params_mut()[0] += 0.1;
        assert!(matches!(m.backward(&cache, &[1.0, 0.0]), Err(EdlError::StaleCache)));
    }

    #[test]
    fn mc_dropout_basics() {
        let mut cfg = ModelConfig::new(3, 4, OutputActivation::Softmax);
        cfg.hidden_dims = vec![8];
        let m = Model::new(cfg.clone()).unwrap();
        let x = [0.2, 0.4, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let single = mc_dropout_predict(&m, &x, 1, &mut rng).unwrap();
        assert_eq!(single.mean, m.forward(&x).unwrap());
        assert!(mc_dropout_predict(&m, &x, 0, &mut rng).is_err());

        cfg.dropout_rate = 0.5;
        let m = Model::new(cfg).unwrap();
        let pred = mc_dropout_predict(&m, &x, DEFAULT_MC_PASSES, &mut rng).unwrap();
        assert_eq!(pred.samples.len(), 100);
        assert!((pred.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(pred.samples.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(3, 2, OutputActivation::Softmax);
        cfg.dropout_rate = 1.0;
        assert!(Model::new(cfg.clone()).is_err());
        cfg.dropout_rate = 0.0;
        cfg.hidden_dims = vec![0];
        assert!(Model::new(cfg).is_err());
    }
}
