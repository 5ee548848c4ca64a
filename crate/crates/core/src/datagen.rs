//! Seeded synthetic data with controllable label ambiguity.
//!
//! Each example has a latent emotion distribution η drawn from a Dirichlet
//! centred on one class, or on an even blend of two classes for the
//! ambiguous fraction. Features are the η-weighted blend of per-class
//! prototypes plus isotropic noise, and annotator labels are independent
//! categorical draws from η.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, Dataset, Example};
use crate::error::{EdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotators {
    Fixed(usize),
    /// Inclusive range; each example draws its count uniformly.
    Range(usize, usize),
}

impl Annotators {
    fn bounds(self) -> (usize, usize) {
        match self {
            Annotators::Fixed(m) => (m, m),
            Annotators::Range(lo, hi) => (lo, hi),
        }
    }
}

fn default_floor() -> f64 {
    0.5
}

fn default_prototype_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// One vector per class; drawn from N(0, prototype_scale²) when absent.
    #[serde(default)]
    pub prototypes: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_prototype_scale")]
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub num_examples: usize,
    pub annotators: Annotators,
    pub ambiguity_mix: f64,
    pub concentration: f64,
    /// Added to every Dirichlet parameter so off-mode classes keep some mass.
    #[serde(default = "default_floor")]
    pub floor: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 16,
            prototypes: None,
            prototype_scale: default_prototype_scale(),
            noise_sigma: 0.3,
            num_examples: 4000,
            annotators: Annotators::Range(3, 9),
            ambiguity_mix: 0.3,
            concentration: 10.0,
            floor: default_floor(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EdlError::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if self.num_examples == 0 {
            return bad("num_examples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity_mix) {
            return bad(format!("ambiguity_mix {} outside [0, 1]", self.ambiguity_mix));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return bad(format!("concentration must be positive, got {}", self.concentration));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return bad(format!("floor must be positive, got {}", self.floor));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if !(self.prototype_scale.is_finite() && self.prototype_scale > 0.0) {
            return bad(format!("prototype_scale must be positive, got {}", self.prototype_scale));
        }
        let (lo, hi) = self.annotators.bounds();
        if lo == 0 || lo > hi {
            return bad(format!("invalid annotator range [{lo}, {hi}]"));
        }
        if let Some(p) = &self.prototypes {
            if p.len() != self.num_classes || p.iter().any(|v| v.len() != self.feature_dim) {
                return bad(format!(
                    "prototypes must be {} vectors of length {}",
                    self.num_classes, self.feature_dim
                ));
            }
            if p.iter().flatten().any(|x| !x.is_finite()) {
                return bad("prototypes must be finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub truth: Vec<TruthRow>,
}

impl Generated {
    pub fn write(&self, dataset_path: impl AsRef<Path>, truth_path: impl AsRef<Path>) -> Result<()> {
        self.dataset.write_jsonl(dataset_path)?;
        let path = truth_path.as_ref();
        let file = File::create(path).map_err(|e| EdlError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for row in &self.truth {
            writeln!(out, "{}", serde_json::to_string(row)?).map_err(|e| EdlError::io(path, e))?;
        }
        out.flush().map_err(|e| EdlError::io(path, e))
    }
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("validated shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prototypes = match &cfg.prototypes {
        Some(p) => p.clone(),
        None => {
            let normal = Normal::new(0.0, cfg.prototype_scale).expect("validated scale");
            (0..k)
                .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        }
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let (m_lo, m_hi) = cfg.annotators.bounds();
    let width = (cfg.num_examples - 1).to_string().len().max(5);

    let mut examples = Vec::with_capacity(cfg.num_examples);
    let mut truth = Vec::with_capacity(cfg.num_examples);
    for i in 0..cfg.num_examples {
        let c = rng.random_range(0..k);
        let mut mode = vec![0.0; k];
        if rng.random::<f64>() < cfg.ambiguity_mix {
            let other = (c + rng.random_range(1..k)) % k;
            mode[c] = 0.5;
            mode[other] = 0.5;
        } else {
            mode[c] = 1.0;
        }
        let alpha: Vec<f64> = mode.iter().map(|m| cfg.concentration * m + cfg.floor).collect();
        let eta = sample_dirichlet(&mut rng, &alpha);

        let features: Vec<f64> = (0..d)
            .map(|j| {
                let blend: f64 = (0..k).map(|c| eta[c] * prototypes[c][j]).sum();
                blend + noise.sample(&mut rng)
            })
            .collect();

        let m = rng.random_range(m_lo..=m_hi);
        let pick = WeightedIndex::new(&eta)
            .map_err(|e| EdlError::InvalidInput(format!("degenerate η: {e}")))?;
        let labels: Vec<usize> = (0..m).map(|_| pick.sample(&mut rng)).collect();

        let id = format!("ex{i:0width$}");
        examples.push(Example {
            id: id.clone(),
            features,
            annotations: AnnotationSet::new(labels, k)?,
        });
        truth.push(TruthRow { id, eta });
    }
    let names = (0..k).map(|c| format!("class{c}")).collect();
    Ok(Generated {
        dataset: Dataset::new(examples, k, d, names)?,
        truth,
    })
}
