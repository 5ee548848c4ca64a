//! Training objectives with analytic gradients.
//!
//! Evidential losses are differentiated with respect to the concentration
//! α (which equals the gradient with respect to evidence, since α = e + 1).
//! Softmax losses are differentiated with respect to the logits. The network
//! chains these through its own output activation.

use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletPrediction;
use crate::error::{EdlError, Result};
use crate::special::{digamma_unchecked, log_gamma_unchecked, softmax_unchecked, trigamma_unchecked};

/// Slack allowed below 1 for a masked concentration entry.
const ALPHA_FLOOR_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    /// Evidential classification: marginal-likelihood NLL plus KL on masked α.
    Edl,
    /// Evidential distribution estimation with the Dirichlet-KL regulariser.
    EdlStarR1,
    /// Evidential distribution estimation with KL(soft label ‖ E[η]).
    EdlStarR2,
    CeMajority,
    /// Cross-entropy where NMA is an extra class.
    CeMajorityPlus,
    KlSoftLabel,
}

impl LossKind {
    pub fn is_evidential(self) -> bool {
        matches!(self, LossKind::Edl | LossKind::EdlStarR1 | LossKind::EdlStarR2)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Edl => "EDL",
            LossKind::EdlStarR1 => "EDL_STAR_R1",
            LossKind::EdlStarR2 => "EDL_STAR_R2",
            LossKind::CeMajority => "CE_MAJORITY",
            LossKind::CeMajorityPlus => "CE_MAJORITY_PLUS",
            LossKind::KlSoftLabel => "KL_SOFT_LABEL",
        }
    }

    /// Whether the loss consumes annotation counts rather than a single class.
    pub fn uses_counts(self) -> bool {
        matches!(
            self,
            LossKind::EdlStarR1 | LossKind::EdlStarR2 | LossKind::KlSoftLabel
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Anneal {
    #[default]
    None,
    /// λ ramps linearly from 0 to its full value over `steps` optimizer steps.
    Linear { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub anneal: Anneal,
}

impl LossSpec {
    pub fn new(kind: LossKind, lambda: f64) -> Result<Self> {
        let spec = Self {
            kind,
            lambda,
            anneal: Anneal::None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EdlError::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if let Anneal::Linear { steps: 0 } = self.anneal {
            return Err(EdlError::Config("linear anneal needs steps > 0".into()));
        }
        Ok(())
    }

    /// Regularisation weight in effect at optimizer step `step`.
    pub fn effective_lambda(&self, step: usize) -> f64 {
        match self.anneal {
            Anneal::None => self.lambda,
            Anneal::Linear { steps } => self.lambda * (step as f64 / steps as f64).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// What a single example is trained against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Counts(Vec<f64>),
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(EdlError::DimensionMismatch { expected, found })
    }
}

fn one_hot(k: usize, class: usize) -> Result<Vec<f64>> {
    if class >= k {
        return Err(EdlError::InvalidInput(format!(
            "class {class} out of range for {k} classes"
        )));
    }
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    Ok(y)
}

fn check_counts(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(EdlError::InvalidInput(
            "counts must be finite and nonnegative".into(),
        ));
    }
    let m: f64 = counts.iter().sum();
    if m <= 0.0 {
        return Err(EdlError::InvalidInput("all-zero count vector".into()));
    }
    Ok(m)
}

/// Evidential NLL for a one-hot target: Σ y_k (ln α₀ − ln α_k).
pub fn edl_nll(p: &DirichletPrediction, class: usize) -> Result<LossValueGrad> {
    let y = one_hot(p.num_classes(), class)?;
    edl_nll_star(p, &y)
}

/// Evidential NLL for annotation counts ŷ: Σ ŷ_k (ln α₀ − ln α_k), with
/// gradient M/α₀ − ŷ_k/α_k.
pub fn edl_nll_star(p: &DirichletPrediction, counts: &[f64]) -> Result<LossValueGrad> {
    check_len(p.num_classes(), counts.len())?;
    let m = check_counts(counts)?;
    let alpha = p.alpha();
    let s = p.strength();
    let ln_s = s.ln();
    let value = counts
        .iter()
        .zip(&alpha)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, a)| c * (ln_s - a.ln()))
        .sum();
    let grad = counts.iter().zip(&alpha).map(|(c, a)| m / s - c / a).collect();
    Ok(LossValueGrad { value, grad })
}

/// KL(Dir(α̃) ‖ Dir(1)) and its gradient with respect to α̃.
pub fn kl_dirichlet_to_uniform(alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
    if alpha.is_empty() {
        return Err(EdlError::EmptyInput("kl_dirichlet_to_uniform"));
    }
    if let Some(&bad) = alpha
        .iter()
        .find(|a| !(a.is_finite() && **a >= 1.0 - ALPHA_FLOOR_SLACK))
    {
        return Err(EdlError::Domain {
            function: "kl_dirichlet_to_uniform",
            value: bad,
        });
    }
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma_unchecked(s);
    let tri_s = trigamma_unchecked(s);
    let mut value = log_gamma_unchecked(s) - log_gamma_unchecked(k);
    let mut grad = Vec::with_capacity(alpha.len());
    for &a in alpha {
        value += -log_gamma_unchecked(a) + (a - 1.0) * (digamma_unchecked(a) - psi_s);
        grad.push((a - 1.0) * trigamma_unchecked(a) - (s - k) * tri_s);
    }
    Ok((value.max(0.0), grad))
}

/// α̃ = y + (1 − y) ⊙ α: the true-class entry is reset to 1.
pub fn masked_alpha_classification(p: &DirichletPrediction, class: usize) -> Result<Vec<f64>> {
    let y = one_hot(p.num_classes(), class)?;
    masked_alpha_distribution(p, &y)
}

/// α̂ = ȳ + (1 − ȳ) ⊙ α.
pub fn masked_alpha_distribution(p: &DirichletPrediction, soft_label: &[f64]) -> Result<Vec<f64>> {
    check_len(p.num_classes(), soft_label.len())?;
    Ok(soft_label
        .iter()
        .zip(p.alpha())
        .map(|(y, a)| y + (1.0 - y) * a)
        .collect())
}

/// KL between a soft label and the Dirichlet mean, with gradient in α.
pub fn r2_kl(soft_label: &[f64], p: &DirichletPrediction) -> Result<(f64, Vec<f64>)> {
    check_len(p.num_classes(), soft_label.len())?;
    let probs = p.expected_probs();
    let alpha = p.alpha();
    let s = p.strength();
    let mass: f64 = soft_label.iter().sum();
    let value: f64 = soft_label
        .iter()
        .zip(&probs)
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, q)| y * (y / q).ln())
        .sum();
    let grad = soft_label
        .iter()
        .zip(&alpha)
        .map(|(y, a)| mass / s - y / a)
        .collect();
    Ok((value.max(0.0), grad))
}

/// −ln softmax(z)_class with gradient softmax(z) − y.
pub fn cross_entropy_majority(logits: &[f64], class: usize) -> Result<LossValueGrad> {
    let y = one_hot(logits.len(), class)?;
    let p = softmax_unchecked(logits);
    let value = -log_softmax_at(logits, class);
    let grad = p.iter().zip(&y).map(|(p, y)| p - y).collect();
    Ok(LossValueGrad { value, grad })
}

/// KL(ȳ ‖ softmax(z)) with gradient softmax(z) − ȳ.
pub fn kl_soft_label(logits: &[f64], soft_label: &[f64]) -> Result<LossValueGrad> {
    check_len(logits.len(), soft_label.len())?;
    let p = softmax_unchecked(logits);
    let value: f64 = soft_label
        .iter()
        .enumerate()
        .filter(|(_, y)| **y > 0.0)
        .map(|(k, y)| y * (y.ln() - log_softmax_at(logits, k)))
        .sum();
    let grad = p.iter().zip(soft_label).map(|(p, y)| p - y).collect();
    Ok(LossValueGrad {
        value: value.max(0.0),
        grad,
    })
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

fn soft_from_counts(counts: &[f64]) -> Result<Vec<f64>> {
    let m = check_counts(counts)?;
    Ok(counts.iter().map(|c| c / m).collect())
}

/// Full objective for one example.
///
/// `output` is α for the evidential kinds and the logits for the softmax
/// kinds. `step` drives λ annealing.
pub fn total_loss(spec: &LossSpec, output: &[f64], target: &Target, step: usize) -> Result<LossValueGrad> {
    let lambda = spec.effective_lambda(step);
    let incompatible = |target: &'static str| EdlError::IncompatibleTarget {
        loss: spec.kind.name(),
        target,
    };
    match (spec.kind, target) {
        (LossKind::Edl, Target::Class(c)) => {
            let p = DirichletPrediction::from_alpha(output)?;
            let y = one_hot(p.num_classes(), *c)?;
            evidential_r1(&p, &y, &y, lambda)
        }
        (LossKind::EdlStarR1, Target::Counts(counts)) => {
            let p = DirichletPrediction::from_alpha(output)?;
            check_len(p.num_classes(), counts.len())?;
            let soft = soft_from_counts(counts)?;
            evidential_r1(&p, counts, &soft, lambda)
        }
        (LossKind::EdlStarR2, Target::Counts(counts)) => {
            let p = DirichletPrediction::from_alpha(output)?;
            check_len(p.num_classes(), counts.len())?;
            let soft = soft_from_counts(counts)?;
            let mut out = edl_nll_star(&p, counts)?;
            if lambda > 0.0 {
                let (r, g) = r2_kl(&soft, &p)?;
                out.value += lambda * r;
                for (o, g) in out.grad.iter_mut().zip(g) {
                    *o += lambda * g;
                }
            }
            Ok(out)
        }
        (LossKind::CeMajority | LossKind::CeMajorityPlus, Target::Class(c)) => {
            cross_entropy_majority(output, *c)
        }
        (LossKind::KlSoftLabel, Target::Counts(counts)) => {
            check_len(output.len(), counts.len())?;
            kl_soft_label(output, &soft_from_counts(counts)?)
        }
        (_, Target::Class(_)) => Err(incompatible("single-class")),
        (_, Target::Counts(_)) => Err(incompatible("count")),
    }
}

// NLL* on `counts` plus λ·KL(Dir(ȳ + (1 − ȳ)⊙α) ‖ Dir(1)). With a one-hot
// `counts` and `soft` this is exactly the classification loss.
fn evidential_r1(
    p: &DirichletPrediction,
    counts: &[f64],
    soft: &[f64],
    lambda: f64,
) -> Result<LossValueGrad> {
    let mut out = edl_nll_star(p, counts)?;
    if lambda > 0.0 {
        let masked = masked_alpha_distribution(p, soft)?;
        let (r, g) = kl_dirichlet_to_uniform(&masked)?;
        out.value += lambda * r;
        for ((o, g), y) in out.grad.iter_mut().zip(g).zip(soft) {
            *o += lambda * g * (1.0 - y);
        }
    }
    Ok(out)
}
