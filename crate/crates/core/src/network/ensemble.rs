use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{train_with_validation, TrainConfig, TrainSet};
use super::{Model, ModelConfig};
use crate::error::{EdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    #[serde(default = "default_members")]
    pub members: usize,
    /// Train each member on a bootstrap resample of the data.
    #[serde(default = "default_bagging")]
    pub bagging: bool,
}

fn default_members() -> usize {
    10
}

fn default_bagging() -> bool {
    true
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: default_members(),
            bagging: default_bagging(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberTrace {
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

/// Independently trained models whose softmax outputs are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Model>,
}

// Member `i` derives its init and training seeds from the base seeds.
fn member_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Ensemble {
    pub fn from_members(members: Vec<Model>) -> Result<Self> {
        if members.len() < 2 {
            return Err(EdlError::Config("an ensemble needs at least two members".into()));
        }
        let first = members[0].config();
        if members.iter().any(|m| {
            m.config().input_dim != first.input_dim || m.config().num_outputs != first.num_outputs
        }) {
            return Err(EdlError::Config("ensemble members disagree on shape".into()));
        }
        Ok(Self { members })
    }

    pub fn train(config: &ModelConfig, data: &TrainSet, tc: &TrainConfig, ec: EnsembleConfig) -> Result<Self> {
        Ok(Self::train_traced(config, data, None, tc, ec)?.0)
    }

    /// Trains every member and also returns each member's per-epoch
    /// training and validation losses.
    pub fn train_traced(
        config: &ModelConfig,
        data: &TrainSet,
        val: Option<&TrainSet>,
        tc: &TrainConfig,
        ec: EnsembleConfig,
    ) -> Result<(Self, Vec<MemberTrace>)> {
        if data.is_empty() {
            return Err(EdlError::EmptyInput("Ensemble::train"));
        }
        if ec.members < 2 {
            return Err(EdlError::Config("an ensemble needs at least two members".into()));
        }
        let n = data.len();
        let mut members = Vec::with_capacity(ec.members);
        let mut traces = Vec::with_capacity(ec.members);
        for i in 0..ec.members {
            let mut cfg = config.clone();
            cfg.seed = member_seed(config.seed, i);
            let mut member_tc = tc.clone();
            member_tc.seed = member_seed(tc.seed, i);
            let resample = if ec.bagging {
                let mut rng = ChaCha8Rng::seed_from_u64(member_seed(tc.seed ^ 0xBA66, i));
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                data.select(&idx)
            } else {
                data.clone()
            };
            let outcome = train_with_validation(&Model::new(cfg)?, &resample, val, &member_tc)?;
            traces.push(MemberTrace {
                epoch_losses: outcome.epoch_losses,
                val_losses: outcome.val_losses,
            });
            members.push(outcome.model);
        }
        Ok((Self { members }, traces))
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    /// Mean of the members' class probabilities.
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.members[0].config().num_outputs];
        for m in &self.members {
            for (a, p) in mean.iter_mut().zip(m.predict_probs(x)?) {
                *a += p;
            }
        }
        let n = self.members.len() as f64;
        mean.iter_mut().for_each(|a| *a /= n);
        Ok(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, LossSpec, Target};
    use crate::network::{train, OutputActivation};

    fn toy() -> TrainSet {
        let inputs = (0..40).map(|i| vec![i as f64 / 20.0 - 1.0, (i % 3) as f64]).collect();
        let targets = (0..40).map(|i| Target::Class(usize::from(i >= 20))).collect();
        TrainSet::new(inputs, targets).unwrap()
    }

    fn base() -> (ModelConfig, TrainConfig) {
        let mut cfg = ModelConfig::new(2, 2, OutputActivation::Softmax);
        cfg.hidden_dims = vec![4];
        let tc = TrainConfig::new(LossSpec::new(LossKind::CeMajority, 0.0).unwrap(), 5);
        (cfg, tc)
    }

    #[test]
    fn identical_members_match_single_model() {
        let (cfg, tc) = base();
        let single = train(&Model::new(cfg.clone()).unwrap(), &toy(), &tc).unwrap().model;
        let ens = Ensemble::from_members(vec![single.clone(), single.clone(), single.clone()]).unwrap();
        let x = [0.3, 1.0];
        let a = ens.predict_probs(&x).unwrap();
        let b = single.predict_probs(&x).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bagged_ensemble_defaults_and_mean() {
        let (cfg, tc) = base();
        let ec = EnsembleConfig::default();
        assert_eq!(ec.members, 10);
        let ens = Ensemble::train(&cfg, &toy(), &tc, ec).unwrap();
        assert_eq!(ens.members().len(), 10);
        assert_ne!(ens.members()[0].params(), ens.members()[1].params());
        let p = ens.predict_probs(&[0.1, 2.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let (cfg, tc) = base();
        let one = EnsembleConfig { members: 1, bagging: true };
        assert!(Ensemble::train(&cfg, &toy(), &tc, one).is_err());
        let empty = TrainSet::new(vec![], vec![]).unwrap();
        assert!(Ensemble::train(&cfg, &empty, &tc, EnsembleConfig::default()).is_err());
    }
}
