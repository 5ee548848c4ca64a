//! Dirichlet predictions and the subjective-logic quantities derived from them.
//!
//! A prediction stores the evidence vector; the concentration is always
//! `α = e + 1`, so every `α_k ≥ 1` and the strength `α₀ ≥ K`.

use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::special::{argmax, entropy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrediction {
    evidence: Vec<f64>,
}

impl DirichletPrediction {
    pub fn from_evidence(evidence: &[f64]) -> Result<Self> {
        if evidence.is_empty() {
            return Err(EdlError::EmptyInput("DirichletPrediction::from_evidence"));
        }
        if let Some(&bad) = evidence.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(EdlError::InvalidInput(format!(
                "evidence must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(Self {
            evidence: evidence.to_vec(),
        })
    }

    /// Builds a prediction from a concentration vector with every entry ≥ 1.
    pub fn from_alpha(alpha: &[f64]) -> Result<Self> {
        let evidence: Vec<f64> = alpha.iter().map(|a| a - 1.0).collect();
        Self::from_evidence(&evidence)
    }

    pub fn num_classes(&self) -> usize {
        self.evidence.len()
    }

    pub fn evidence(&self) -> &[f64] {
        &self.evidence
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.evidence.iter().map(|e| e + 1.0).collect()
    }

    /// Dirichlet strength α₀ = Σ α_k.
    pub fn strength(&self) -> f64 {
        self.evidence.iter().sum::<f64>() + self.num_classes() as f64
    }

    /// u = K / α₀.
    pub fn uncertainty(&self) -> f64 {
        self.num_classes() as f64 / self.strength()
    }

    /// b_k = (α_k − 1) / α₀.
    pub fn belief_masses(&self) -> Vec<f64> {
        let s = self.strength();
        self.evidence.iter().map(|e| e / s).collect()
    }

    /// Mean of the Dirichlet, α_k / α₀.
    pub fn expected_probs(&self) -> Vec<f64> {
        let s = self.strength();
        self.evidence.iter().map(|e| (e + 1.0) / s).collect()
    }

    pub fn predictive_entropy(&self) -> f64 {
        entropy(&self.expected_probs())
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.evidence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_evidence_is_flat() {
        let p = DirichletPrediction::from_evidence(&[0.0; 5]).unwrap();
        assert_eq!(p.alpha(), vec![1.0; 5]);
        assert_eq!(p.uncertainty(), 1.0);
        assert_eq!(p.belief_masses(), vec![0.0; 5]);
        assert!(close(&p.expected_probs(), &[0.2; 5], 1e-15));
        assert!((p.predictive_entropy() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_unit_of_evidence() {
        let p = DirichletPrediction::from_evidence(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.alpha(), vec![2.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(close(&p.belief_masses(), &[1.0 / 6.0, 0.0, 0.0, 0.0, 0.0], 1e-15));
        let sixth = 1.0 / 6.0;
        assert!(close(
            &p.expected_probs(),
            &[1.0 / 3.0, sixth, sixth, sixth, sixth],
            1e-15
        ));
    }

    #[test]
    fn uncertainty_arithmetic() {
        let p = DirichletPrediction::from_alpha(&[5.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.uncertainty(), 0.5);
        let p = DirichletPrediction::from_alpha(&[6.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.strength(), 10.0);
        assert_eq!(p.uncertainty(), 0.5);
        let p = DirichletPrediction::from_alpha(&[10.0, 10.0]).unwrap();
        assert_eq!(p.expected_probs(), vec![0.5, 0.5]);
        assert!((p.predictive_entropy() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_entropy_vanishes() {
        let p = DirichletPrediction::from_evidence(&[1e12, 0.0, 0.0]).unwrap();
        assert!(p.predictive_entropy() < 1e-9);
    }

    #[test]
    fn rejects_bad_evidence() {
        assert!(DirichletPrediction::from_evidence(&[-0.1, 0.0]).is_err());
        assert!(DirichletPrediction::from_evidence(&[f64::NAN]).is_err());
        assert!(DirichletPrediction::from_evidence(&[f64::INFINITY, 0.0]).is_err());
        assert!(DirichletPrediction::from_evidence(&[]).is_err());
        assert!(DirichletPrediction::from_alpha(&[0.5, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn subjective_logic_identity(e in proptest::collection::vec(0.0f64..1e3, 2..10)) {
            let p = DirichletPrediction::from_evidence(&e).unwrap();
            let u = p.uncertainty();
            let b = p.belief_masses();
            prop_assert!(u > 0.0 && u <= 1.0);
            prop_assert!(b.iter().all(|&x| (0.0..1.0).contains(&x)));
            prop_assert!((u + b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let probs = p.expected_probs();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let alpha = p.alpha();
            prop_assert_eq!(argmax(&probs), argmax(&alpha));
            prop_assert_eq!(argmax(&b), argmax(&alpha));
        }
    }
}
