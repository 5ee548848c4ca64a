use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::annotations::Dataset;
use crate::error::{EdlError, Result};
use crate::losses::{total_loss, LossKind, LossSpec, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Draw every batch slot from a uniformly chosen class.
    #[serde(default)]
    pub balanced_sampling: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    64
}

fn default_learning_rate() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn new(loss: LossSpec, epochs: usize) -> Self {
        Self {
            loss,
            batch_size: default_batch_size(),
            epochs,
            learning_rate: default_learning_rate(),
            optimizer: Optimizer::default(),
            balanced_sampling: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(EdlError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EdlError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Feature vectors paired with loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Target>,
    // class used for balanced sampling
    strata: Vec<usize>,
}

impl TrainSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Target>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(EdlError::DimensionMismatch {
                expected: inputs.len(),
                found: targets.len(),
            });
        }
        let strata = targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => *c,
                Target::Counts(c) => crate::special::argmax(c),
            })
            .collect();
        Ok(Self {
            inputs,
            targets,
            strata,
        })
    }

    /// Targets for `kind`: the majority class for single-class losses and
    /// the count vector otherwise. Examples without a majority are rejected
    /// by single-class losses.
    pub fn from_dataset(d: &Dataset, kind: LossKind) -> Result<Self> {
        let mut inputs = Vec::with_capacity(d.len());
        let mut targets = Vec::with_capacity(d.len());
        for ex in d.examples() {
            let target = if kind.uses_counts() {
                Target::Counts(ex.annotations.counts().iter().map(|&c| c as f64).collect())
            } else {
                let class = ex.annotations.majority().class().ok_or_else(|| {
                    EdlError::InvalidInput(format!(
                        "example {} has no majority label for {}",
                        ex.id,
                        kind.name()
                    ))
                })?;
                Target::Class(class)
            };
            inputs.push(ex.features.clone());
            targets.push(target);
        }
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// Examples at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            strata: indices.iter().map(|&i| self.strata[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean validation loss after each epoch, when a validation set was given.
    pub val_losses: Vec<f64>,
}

fn check_compatible(m: &Model, data: &TrainSet, tc: &TrainConfig) -> Result<()> {
    tc.validate()?;
    let act = m.config().output_activation;
    if tc.loss.kind.is_evidential() != act.is_evidential() {
        return Err(EdlError::Config(format!(
            "loss {} cannot train a {act:?} head",
            tc.loss.kind.name()
        )));
    }
    let k = m.config().num_outputs;
    for t in &data.targets {
        match t {
            Target::Class(c) if *c >= k => {
                return Err(EdlError::InvalidInput(format!(
                    "target class {c} out of range for {k} outputs"
                )))
            }
            Target::Counts(c) if c.len() != k => {
                return Err(EdlError::DimensionMismatch {
                    expected: k,
                    found: c.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean loss over a dataset with a deterministic forward pass.
pub fn mean_loss(m: &Model, data: &TrainSet, spec: &LossSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(EdlError::EmptyInput("mean_loss"));
    }
    let mut total = 0.0;
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        let cache = m.forward_pass(x, None)?;
        total += total_loss(spec, &m.loss_input(&cache), t, usize::MAX)?.value;
    }
    Ok(total / data.len() as f64)
}

pub fn train(m: &Model, data: &TrainSet, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with_validation(m, data, None, tc)
}

/// Mini-batch training of a private copy of `m`. Fully determined by
/// `tc.seed` and the model's initial parameters.
pub fn train_with_validation(
    m: &Model,
    data: &TrainSet,
    val: Option<&TrainSet>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(EdlError::EmptyInput("train"));
    }
    check_compatible(m, data, tc)?;
    let mut model = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let n = data.len();
    let batches_per_epoch = n.div_ceil(tc.batch_size);
    let sampler = BalancedSampler::new(&data.strata);

    let mut state = OptimizerState::new(tc.optimizer, model.num_params());
    let mut grads = vec![0.0; model.num_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut val_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        if !tc.balanced_sampling {
            order.shuffle(&mut rng);
        }
        let mut epoch_total = 0.0;
        let mut seen = 0usize;
        for b in 0..batches_per_epoch {
            let batch: Vec<usize> = if tc.balanced_sampling {
                (0..tc.batch_size).map(|_| sampler.draw(&mut rng)).collect()
            } else {
                order[b * tc.batch_size..((b + 1) * tc.batch_size).min(n)].to_vec()
            };
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let cache = model.forward_pass(&data.inputs[i], Some(&mut rng))?;
                let loss = total_loss(&tc.loss, &model.loss_input(&cache), &data.targets[i], step)?;
                if !loss.value.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
                    return Err(EdlError::NonFiniteLoss { epoch, step });
                }
                epoch_total += loss.value;
                model.backward_into(&cache, &loss.grad, scale, &mut grads)?;
            }
            seen += batch.len();
            state.apply(model.params_mut(), &grads, tc.learning_rate);
            step += 1;
        }
        epoch_losses.push(epoch_total / seen as f64);
        if let Some(v) = val {
            if !v.is_empty() {
                val_losses.push(mean_loss(&model, v, &tc.loss)?);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        val_losses,
    })
}

/// Picks a class uniformly, then an example of that class uniformly.
struct BalancedSampler {
    strata: Vec<Vec<usize>>,
}

impl BalancedSampler {
    fn new(labels: &[usize]) -> Self {
        let mut strata: Vec<Vec<usize>> = Vec::new();
        for (i, &s) in labels.iter().enumerate() {
            if s >= strata.len() {
                strata.resize(s + 1, Vec::new());
            }
            strata[s].push(i);
        }
        strata.retain(|s| !s.is_empty());
        Self { strata }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let s = &self.strata[rng.random_range(0..self.strata.len())];
        s[rng.random_range(0..s.len())]
    }
}

struct OptimizerState {
    kind: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        let (first, second) = match kind {
            Optimizer::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
            Optimizer::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            first,
            second,
            t: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
        }
    }
}
