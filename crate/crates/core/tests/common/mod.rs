#![allow(dead_code)]

use edl_core::losses::{total_loss, Anneal, LossKind, LossSpec, Target};
use edl_core::network::{Model, ModelConfig, OutputActivation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EVIDENTIAL_ACTIVATIONS: [OutputActivation; 3] = [
    OutputActivation::ReluEvidence,
    OutputActivation::SoftplusEvidence,
    OutputActivation::ExpEvidence,
];

/// Every loss paired with every activation it can train.
pub fn loss_activation_pairs() -> Vec<(LossKind, OutputActivation)> {
    let mut pairs = Vec::new();
    for kind in [LossKind::Edl, LossKind::EdlStarR1, LossKind::EdlStarR2] {
        for act in EVIDENTIAL_ACTIVATIONS {
            pairs.push((kind, act));
        }
    }
    for kind in [LossKind::CeMajority, LossKind::CeMajorityPlus, LossKind::KlSoftLabel] {
        pairs.push((kind, OutputActivation::Softmax));
    }
    pairs
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub instances: usize,
    /// Instances redrawn because a ReLU kink or the exp clamp was too close.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

const H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

fn loss_at(m: &Model, spec: &LossSpec, x: &[f64], target: &Target) -> f64 {
    let cache = m.forward_pass(x, None).unwrap();
    total_loss(spec, &m.loss_input(&cache), target, usize::MAX).unwrap().value
}

fn near_kink(m: &Model, x: &[f64], act: OutputActivation) -> bool {
    let cache = m.forward_pass(x, None).unwrap();
    let hidden = cache
        .hidden_preactivations()
        .iter()
        .flatten()
        .any(|z| z.abs() < KINK_MARGIN);
    let out = cache.logits().iter().any(|&z| match act {
        OutputActivation::ReluEvidence => z.abs() < KINK_MARGIN,
        OutputActivation::ExpEvidence => z.abs() > 9.0,
        _ => false,
    });
    hidden || out
}

/// Compares backprop parameter gradients of the full model-plus-loss
/// against central differences, using the norm-relative error
/// `|a − n| / (|a| + |n|)` per instance.
pub fn gradient_check(kind: LossKind, act: OutputActivation, instances: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut redrawn = 0;
    let mut max_rel_error: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let k = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let mut cfg = ModelConfig::new(d, k, act);
        cfg.hidden_dims = vec![rng.random_range(2..=5)];
        cfg.seed = rng.random();
        let mut m = Model::new(cfg).unwrap();
        for p in m.params_mut() {
            *p = rng.random_range(-1.5..1.5);
        }
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        if near_kink(&m, &x, act) {
            redrawn += 1;
            continue;
        }
        let target = match kind {
            LossKind::Edl | LossKind::CeMajority | LossKind::CeMajorityPlus => {
                Target::Class(rng.random_range(0..k))
            }
            _ => {
                let mut c: Vec<f64> = (0..k).map(|_| f64::from(rng.random_range(0u8..5))).collect();
                if c.iter().all(|&v| v == 0.0) {
                    c[0] = 1.0;
                }
                Target::Counts(c)
            }
        };
        let spec = LossSpec {
            kind,
            lambda: if kind.is_evidential() { rng.random_range(0.0..1.5) } else { 0.0 },
            anneal: Anneal::None,
        };

        let cache = m.forward_pass(&x, None).unwrap();
        let upstream = total_loss(&spec, &m.loss_input(&cache), &target, usize::MAX).unwrap().grad;
        let analytic = m.backward(&cache, &upstream).unwrap();

        let mut numeric = vec![0.0; m.num_params()];
        for i in 0..m.num_params() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + H;
            let up = loss_at(&m, &spec, &x, &target);
            m.params_mut()[i] = orig - H;
            let down = loss_at(&m, &spec, &x, &target);
            m.params_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * H);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic) + norm(&numeric);
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        max_rel_error = max_rel_error.max(rel);
        done += 1;
    }
    GradCheck {
        instances,
        redrawn,
        max_rel_error,
    }
}
