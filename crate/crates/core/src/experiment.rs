//! End-to-end experiments: configuration, the MA/NMA split protocol,
//! training every method, evaluation, sweeps and report comparison.
//!
//! Everything here is a deterministic function of the config and the run
//! seed. Reports hold no timestamps and use ordered maps, so reruns write
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    extra_class_dataset, hold_out, relabel_with_extra_class, split_ma_nma, Dataset, DatasetFormat,
    NMA_HOLDOUT_FRACTION,
};
use crate::datagen::{generate, GenConfig};
use crate::error::{EdlError, Result};
use crate::losses::{Anneal, LossKind, LossSpec};
use crate::metrics::{EvalRecord, MetricsReport, RejectPoint, ReportOptions, Thresholds, DEFAULT_BINS};
use crate::network::{
    mc_dropout_predict, train_with_validation, Ensemble, EnsembleConfig, Model, ModelConfig, Optimizer,
    OutputActivation, TrainConfig, TrainSet, DEFAULT_MC_PASSES,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Fractions of the MA data used for training, validation and test.
pub const MA_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

pub const TIE_RULE: &str = "argmax ties break toward the lowest class index";

const MCDP_DEFAULT_DROPOUT: f64 = 0.5;
const EVIDENTIAL_DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Softmax classifier on majority labels.
    Mle,
    /// Softmax classifier with NMA as an extra class.
    MlePlus,
    /// Softmax fitted to soft labels.
    MleStar,
    /// MLE with Monte Carlo dropout at test time.
    Mcdp,
    /// Bagged ensemble of MLE models.
    Ensemble,
    Edl,
    EdlStarR1,
    EdlStarR2,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Mle,
        Method::MlePlus,
        Method::MleStar,
        Method::Mcdp,
        Method::Ensemble,
        Method::Edl,
        Method::EdlStarR1,
        Method::EdlStarR2,
    ];

    pub fn loss_kind(self) -> LossKind {
        match self {
            Method::Mle | Method::Mcdp | Method::Ensemble => LossKind::CeMajority,
            Method::MlePlus => LossKind::CeMajorityPlus,
            Method::MleStar => LossKind::KlSoftLabel,
            Method::Edl => LossKind::Edl,
            Method::EdlStarR1 => LossKind::EdlStarR1,
            Method::EdlStarR2 => LossKind::EdlStarR2,
        }
    }

    pub fn is_evidential(self) -> bool {
        self.loss_kind().is_evidential()
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mle => "MLE",
            Method::MlePlus => "MLE_PLUS",
            Method::MleStar => "MLE_STAR",
            Method::Mcdp => "MCDP",
            Method::Ensemble => "ENSEMBLE",
            Method::Edl => "EDL",
            Method::EdlStarR1 => "EDL_STAR_R1",
            Method::EdlStarR2 => "EDL_STAR_R2",
        }
    }

    fn default_activation(self) -> OutputActivation {
        if self.is_evidential() {
            OutputActivation::SoftplusEvidence
        } else {
            OutputActivation::Softmax
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic data; the generator seed is offset by the run seed.
    Generator { generator: GenConfig },
    /// One file, split by the experiment.
    File {
        path: PathBuf,
        #[serde(default)]
        format: DatasetFormat,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    /// Pre-split files. MA examples stay in their split; NMA examples from
    /// all three are pooled before the held-out quarter is drawn.
    Splits {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        #[serde(default)]
        format: DatasetFormat,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![256]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    /// Defaults to softmax for the softmax family and softplus evidence for EDL.
    #[serde(default)]
    pub output_activation: Option<OutputActivation>,
    /// Defaults to 0.5 for MCDP and 0 otherwise.
    #[serde(default)]
    pub dropout_rate: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
            output_activation: None,
            dropout_rate: None,
        }
    }
}

fn default_batch_size() -> usize {
    64
}

fn default_learning_rate() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Regulariser weight for the evidential losses; defaults to 0.2.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub anneal: Anneal,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub balanced_sampling: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            lambda: None,
            anneal: Anneal::None,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: Optimizer::default(),
            balanced_sampling: false,
        }
    }
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_mc_passes() -> usize {
    DEFAULT_MC_PASSES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_mc_passes")]
    pub mc_passes: usize,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            thresholds: Thresholds::default(),
            mc_passes: default_mc_passes(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: Method,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// A synthetic-data experiment with default sections.
    pub fn synthetic(method: Method, generator: GenConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            data: DataSource::Generator { generator },
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            seed: 0,
        }
    }

    /// Reads a config file. Relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EdlError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut cfg.data {
            DataSource::Generator { .. } => {}
            DataSource::File { path, .. } => resolve(path),
            DataSource::Splits { train, val, test, .. } => {
                resolve(train);
                resolve(val);
                resolve(test);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn activation(&self) -> OutputActivation {
        self.model
            .output_activation
            .unwrap_or_else(|| self.method.default_activation())
    }

    pub fn dropout_rate(&self) -> f64 {
        self.model.dropout_rate.unwrap_or(if self.method == Method::Mcdp {
            MCDP_DEFAULT_DROPOUT
        } else {
            0.0
        })
    }

    pub fn lambda(&self) -> f64 {
        if self.method.is_evidential() {
            self.train.lambda.unwrap_or(EVIDENTIAL_DEFAULT_LAMBDA)
        } else {
            0.0
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.method.loss_kind(),
            lambda: self.lambda(),
            anneal: self.train.anneal,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(EdlError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let act = self.activation();
        if self.method.is_evidential() != act.is_evidential() {
            let need = if self.method.is_evidential() {
                "an evidence activation (relu_evidence, softplus_evidence or exp_evidence)"
            } else {
                "the softmax activation"
            };
            return Err(EdlError::Config(format!(
                "method {} requires {need}, got {act:?}",
                self.method.name()
            )));
        }
        if !self.method.is_evidential() && self.train.lambda.is_some_and(|l| l != 0.0) {
            return Err(EdlError::Config(format!(
                "lambda applies only to evidential methods, not {}",
                self.method.name()
            )));
        }
        let dropout = self.dropout_rate();
        if self.method == Method::Mcdp && dropout <= 0.0 {
            return Err(EdlError::Config("MCDP requires a positive dropout_rate".into()));
        }
        if self.method == Method::Ensemble && self.eval.ensemble.members < 2 {
            return Err(EdlError::Config("an ensemble needs at least two members".into()));
        }
        if self.eval.bins == 0 {
            return Err(EdlError::Config("eval.bins must be at least 1".into()));
        }
        if self.eval.mc_passes == 0 {
            return Err(EdlError::Config("eval.mc_passes must be at least 1".into()));
        }
        self.eval.thresholds.validate()?;
        if let DataSource::Generator { generator } = &self.data {
            generator.validate()?;
        }
        // shape-independent parts of the model and training configs
        let mut mc = ModelConfig::new(1, 2, act);
        mc.hidden_dims = self.model.hidden_dims.clone();
        mc.dropout_rate = dropout;
        mc.validate()?;
        self.train_config(0).validate()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss_spec(),
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            balanced_sampling: self.train.balanced_sampling,
            seed,
        }
    }

    fn model_config(&self, input_dim: usize, num_outputs: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_outputs,
            output_activation: self.activation(),
            dropout_rate: self.dropout_rate(),
            seed,
        }
    }
}

/// Independent streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub split: u64,
    pub nma_holdout: u64,
    pub init: u64,
    pub train: u64,
    pub mc_dropout: u64,
}

impl RunSeeds {
    pub fn new(run: u64) -> Self {
        let derive = |tag: u64| {
            let mut z = run ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            run,
            split: derive(1),
            nma_holdout: derive(2),
            init: derive(3),
            train: derive(4),
            mc_dropout: derive(5),
        }
    }
}

/// The data partition every method is trained and evaluated on.
#[derive(Debug, Clone)]
pub struct Splits {
    pub ma_train: Dataset,
    pub ma_val: Dataset,
    pub ma_test: Dataset,
    pub nma_all: Dataset,
    /// Three quarters of the NMA data; used for training by MLE+ only.
    pub nma_train: Dataset,
    pub nma_test: Dataset,
}

impl Splits {
    pub fn num_classes(&self) -> usize {
        self.ma_train.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.ma_train.feature_dim()
    }

    pub fn sizes(&self) -> BTreeMap<String, usize> {
        [
            ("ma_train", &self.ma_train),
            ("ma_val", &self.ma_val),
            ("ma_test", &self.ma_test),
            ("nma_all", &self.nma_all),
            ("nma_train", &self.nma_train),
            ("nma_test", &self.nma_test),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_string(), d.len()))
        .collect()
    }
}

fn load_file(path: &Path, format: DatasetFormat, num_classes: Option<usize>) -> Result<Dataset> {
    match format {
        DatasetFormat::Jsonl => Dataset::load_jsonl(path),
        DatasetFormat::Csv => Dataset::load_csv(path, num_classes),
    }
}

/// Loads or generates the data and applies the split protocol: MA is split
/// 70/15/15 and a quarter of the NMA data is held out for testing.
pub fn prepare_splits(cfg: &ExperimentConfig, seeds: RunSeeds) -> Result<Splits> {
    let (ma_train, ma_val, ma_test, nma_all) = match &cfg.data {
        DataSource::Generator { generator } => {
            let gen = GenConfig {
                seed: generator.seed.wrapping_add(seeds.run),
                ..generator.clone()
            };
            split_pooled(&generate(&gen)?.dataset, seeds)
        }
        DataSource::File {
            path,
            format,
            num_classes,
        } => split_pooled(&load_file(path, *format, *num_classes)?, seeds),
        DataSource::Splits {
            train,
            val,
            test,
            format,
            num_classes,
        } => {
            let parts = [train, val, test]
                .iter()
                .map(|p| load_file(p, *format, *num_classes).map(|d| split_ma_nma(&d)))
                .collect::<Result<Vec<_>>>()?;
            let nma = parts[0].1.concat(&parts[1].1)?.concat(&parts[2].1)?;
            (parts[0].0.clone(), parts[1].0.clone(), parts[2].0.clone(), nma)
        }
    };
    if ma_train.is_empty() || ma_test.is_empty() {
        return Err(EdlError::InvalidInput(
            "the MA training and test splits must both be nonempty".into(),
        ));
    }
    if ma_train.num_classes() != ma_test.num_classes() || ma_train.feature_dim() != ma_test.feature_dim() {
        return Err(EdlError::InvalidInput("train and test splits disagree on shape".into()));
    }
    let (nma_train, nma_test) = hold_out(&nma_all, NMA_HOLDOUT_FRACTION, seeds.nma_holdout);
    Ok(Splits {
        ma_train,
        ma_val,
        ma_test,
        nma_all,
        nma_train,
        nma_test,
    })
}

fn split_pooled(d: &Dataset, seeds: RunSeeds) -> (Dataset, Dataset, Dataset, Dataset) {
    let (ma, nma) = split_ma_nma(d);
    let mut parts = ma.shuffle_split(&MA_SPLIT, seeds.split).into_iter();
    let (train, val, test) = (
        parts.next().expect("three parts"),
        parts.next().expect("three parts"),
        parts.next().expect("three parts"),
    );
    (train, val, test, nma)
}

/// A trained model of any method.
#[derive(Debug, Clone)]
pub enum Predictor {
    Model(Model),
    Ensemble(Ensemble),
}

impl Predictor {
    fn first(&self) -> &Model {
        match self {
            Predictor::Model(m) => m,
            Predictor::Ensemble(e) => &e.members()[0],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.first().config().input_dim
    }

    pub fn num_outputs(&self) -> usize {
        self.first().config().num_outputs
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            Predictor::Model(m) => m.to_json(),
            Predictor::Ensemble(e) => e.to_json(),
        }
    }

    /// Reads either a single-model or an ensemble file.
    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        if value.get("members").is_some() {
            Ok(Predictor::Ensemble(Ensemble::from_json(s)?))
        } else {
            Ok(Predictor::Model(Model::from_json(s)?))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| EdlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| EdlError::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub member: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub predictor: Predictor,
    pub trace: Vec<TraceRow>,
}

fn trace_rows<'a>(member: usize, train: &'a [f64], val: &'a [f64]) -> impl Iterator<Item = TraceRow> + 'a {
    train.iter().enumerate().map(move |(epoch, &l)| TraceRow {
        member,
        epoch,
        train_loss: l,
        val_loss: val.get(epoch).copied(),
    })
}

/// Trains `cfg.method`. Every method sees only MA training data except
/// MLE+, which adds three quarters of the NMA data as an extra class.
pub fn train_method(cfg: &ExperimentConfig, splits: &Splits, seeds: RunSeeds) -> Result<Trained> {
    cfg.validate()?;
    let kind = cfg.method.loss_kind();
    let k = splits.num_classes();
    let (train_data, val_data, outputs) = if cfg.method == Method::MlePlus {
        if splits.nma_all.is_empty() {
            return Err(EdlError::InvalidInput(
                "MLE_PLUS trains NMA as an extra class and needs NMA examples, but the dataset has none"
                    .into(),
            ));
        }
        let pooled = splits.ma_train.concat(&splits.nma_all)?;
        let (train, _) = relabel_with_extra_class(&pooled, seeds.nma_holdout);
        (train, extra_class_dataset(&splits.ma_val), k + 1)
    } else {
        (splits.ma_train.clone(), splits.ma_val.clone(), k)
    };
    let train_set = TrainSet::from_dataset(&train_data, kind)?;
    let val_set = if val_data.is_empty() {
        None
    } else {
        Some(TrainSet::from_dataset(&val_data, kind)?)
    };
    let mc = cfg.model_config(splits.feature_dim(), outputs, seeds.init);
    let tc = cfg.train_config(seeds.train);

    if cfg.method == Method::Ensemble {
        let (ens, traces) = Ensemble::train_traced(&mc, &train_set, val_set.as_ref(), &tc, cfg.eval.ensemble)?;
        let trace = traces
            .iter()
            .enumerate()
            .flat_map(|(i, t)| trace_rows(i, &t.epoch_losses, &t.val_losses))
            .collect();
        return Ok(Trained {
            predictor: Predictor::Ensemble(ens),
            trace,
        });
    }
    let outcome = train_with_validation(&Model::new(mc)?, &train_set, val_set.as_ref(), &tc)?;
    let trace = trace_rows(0, &outcome.epoch_losses, &outcome.val_losses).collect();
    Ok(Trained {
        predictor: Predictor::Model(outcome.model),
        trace,
    })
}

struct Scored {
    probs: Vec<f64>,
    confidence: f64,
    uncertainty: f64,
}

fn max_of(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn score(
    cfg: &ExperimentConfig,
    predictor: &Predictor,
    x: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Scored> {
    let probs = match predictor {
        Predictor::Ensemble(e) => e.predict_probs(x)?,
        Predictor::Model(m) if cfg.method == Method::Mcdp => {
            mc_dropout_predict(m, x, cfg.eval.mc_passes, rng)?.mean
        }
        Predictor::Model(m) if cfg.method.is_evidential() => {
            let d = m.predict_dirichlet(x)?;
            let probs = d.expected_probs();
            return Ok(Scored {
                confidence: max_of(&probs),
                uncertainty: d.uncertainty(),
                probs,
            });
        }
        Predictor::Model(m) => m.predict_probs(x)?,
    };
    let confidence = max_of(&probs);
    // MLE+ scores ambiguity with the probability of its NMA class
    let uncertainty = if cfg.method == Method::MlePlus {
        *probs.last().expect("nonempty")
    } else {
        1.0 - confidence
    };
    Ok(Scored {
        probs,
        confidence,
        uncertainty,
    })
}

/// Runs the predictor over a dataset.
pub fn eval_records(
    cfg: &ExperimentConfig,
    predictor: &Predictor,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EvalRecord>> {
    data.examples()
        .iter()
        .map(|ex| {
            let s = score(cfg, predictor, &ex.features, rng)?;
            let majority = ex.annotations.majority();
            Ok(EvalRecord {
                id: ex.id.clone(),
                true_majority: majority.class(),
                counts: ex.annotations.counts(),
                probs: s.probs,
                confidence: s.confidence,
                uncertainty: s.uncertainty,
                is_nma: majority.is_nma(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub seeds: RunSeeds,
    pub tie_rule: String,
    pub split_sizes: BTreeMap<String, usize>,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub uar_missing_classes: Vec<usize>,
    pub curves: crate::metrics::Curves,
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates on the MA test split and on NMA data. MLE+ is scored for
/// detection against the held-out NMA quarter only, since it trained on
/// the rest.
pub fn evaluate(cfg: &ExperimentConfig, predictor: &Predictor, splits: &Splits, seeds: RunSeeds) -> Result<RunReport> {
    cfg.validate()?;
    let k = splits.num_classes();
    let expected_outputs = if cfg.method == Method::MlePlus { k + 1 } else { k };
    if predictor.input_dim() != splits.feature_dim() {
        return Err(EdlError::DimensionMismatch {
            expected: splits.feature_dim(),
            found: predictor.input_dim(),
        });
    }
    if predictor.num_outputs() != expected_outputs {
        return Err(EdlError::DimensionMismatch {
            expected: expected_outputs,
            found: predictor.num_outputs(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.mc_dropout);
    let ma_test = eval_records(cfg, predictor, &splits.ma_test, &mut rng)?;
    let nma_test = eval_records(cfg, predictor, &splits.nma_test, &mut rng)?;
    let nma_all = if cfg.method == Method::MlePlus {
        Vec::new()
    } else {
        eval_records(cfg, predictor, &splits.nma_all, &mut rng)?
    };
    let opts = ReportOptions {
        bins: cfg.eval.bins,
        thresholds: cfg.eval.thresholds.clone(),
        detect_on_all: cfg.method != Method::MlePlus,
        confusion_size: expected_outputs,
    };
    let m = MetricsReport::build(&ma_test, &nma_all, &nma_test, &opts)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        seed: seeds.run,
        seeds,
        tie_rule: TIE_RULE.to_string(),
        split_sizes: splits.sizes(),
        metrics: m.scalars,
        uar_missing_classes: m.uar_missing_classes,
        curves: m.curves,
        confusion: m.confusion,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trained: Trained,
    pub report: RunReport,
}

/// Train and evaluate one seed.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let seeds = RunSeeds::new(seed);
    let splits = prepare_splits(cfg, seeds)?;
    let trained = train_method(cfg, &splits, seeds)?;
    let report = evaluate(cfg, &trained.predictor, &splits, seeds)?;
    Ok(RunOutput { trained, report })
}

/// Seeds used by a `count`-seed run starting at `base`.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Scalar metrics averaged over seeds, with the per-seed values kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Mean over seeds; `None` when any seed lacks the metric.
    pub metrics: BTreeMap<String, Option<f64>>,
    pub per_seed: Vec<BTreeMap<String, Option<f64>>>,
}

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(EdlError::EmptyInput("aggregate"))?;
    let mut metrics = BTreeMap::new();
    for key in first.metrics.keys() {
        let values: Option<Vec<f64>> = reports
            .iter()
            .map(|r| r.metrics.get(key).copied().flatten())
            .collect();
        metrics.insert(
            key.clone(),
            values.map(|v| v.iter().sum::<f64>() / v.len() as f64),
        );
    }
    Ok(AggregateReport {
        schema_version: SCHEMA_VERSION,
        method: first.method,
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
        per_seed: reports.iter().map(|r| r.metrics.clone()).collect(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EdlError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| EdlError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> EdlError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EdlError::io(path, io),
        other => EdlError::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| EdlError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["member", "epoch", "train_loss", "val_loss"],
        trace.iter().map(|r| {
            vec![
                r.member.to_string(),
                r.epoch.to_string(),
                r.train_loss.to_string(),
                opt(r.val_loss),
            ]
        }),
    )
}

fn reject_rows(points: &[RejectPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| vec![p.threshold.to_string(), p.retained.to_string(), opt(p.value)])
        .collect()
}

fn xy_rows(points: &[(f64, f64)]) -> Vec<Vec<String>> {
    points.iter().map(|(x, y)| vec![x.to_string(), y.to_string()]).collect()
}

/// Writes `report.json` and one CSV per curve under `curves/`.
pub fn write_report(dir: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let dir = dir.as_ref();
    let curves = dir.join("curves");
    create_dir(&curves)?;
    write_json(&dir.join("report.json"), report)?;
    let c = &report.curves;
    let reject = ["threshold", "retained", "value"];
    write_csv(&curves.join("reject_accuracy.csv"), &reject, reject_rows(&c.reject_accuracy))?;
    write_csv(&curves.join("reject_nll_ma.csv"), &reject, reject_rows(&c.reject_nll_ma))?;
    write_csv(&curves.join("reject_nll_nma.csv"), &reject, reject_rows(&c.reject_nll_nma))?;
    write_csv(&curves.join("ecdf_uncertainty.csv"), &["x", "y"], xy_rows(&c.ecdf_uncertainty))?;
    write_csv(&curves.join("ecdf_entropy.csv"), &["x", "y"], xy_rows(&c.ecdf_entropy))?;
    write_csv(
        &curves.join("calibration.csv"),
        &["lower", "upper", "count", "accuracy", "confidence"],
        c.calibration.iter().map(|b| {
            vec![
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.accuracy.to_string(),
                b.confidence.to_string(),
            ]
        }),
    )?;
    let size = report.confusion.len();
    let mut header = vec!["true".to_string()];
    header.extend((0..size).map(|j| format!("pred_{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &curves.join("confusion.csv"),
        &header_refs,
        report.confusion.iter().enumerate().map(|(i, row)| {
            std::iter::once(i.to_string())
                .chain(row.iter().map(|c| c.to_string()))
                .collect()
        }),
    )
}

pub fn write_aggregate(dir: impl AsRef<Path>, report: &AggregateReport) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_json(&dir.join("report.json"), report)
}

/// Output directory of one seed: `out` itself for single-seed runs.
pub fn seed_dir(out: &Path, seed: u64, multi: bool) -> PathBuf {
    if multi {
        out.join(format!("seed_{seed}"))
    } else {
        out.to_path_buf()
    }
}

/// Trains each seed and writes `model.json` and `trace.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<Trained>> {
    cfg.validate()?;
    let multi = seeds.len() > 1;
    seeds
        .iter()
        .map(|&s| {
            let run_seeds = RunSeeds::new(s);
            let splits = prepare_splits(cfg, run_seeds)?;
            let trained = train_method(cfg, &splits, run_seeds)?;
            let dir = seed_dir(out, s, multi);
            create_dir(&dir)?;
            trained.predictor.save(dir.join("model.json"))?;
            write_trace(dir.join("trace.csv"), &trained.trace)?;
            Ok(trained)
        })
        .collect()
}

/// Evaluates saved models. `model` overrides the per-seed `model.json`
/// path and is only accepted for single-seed runs.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, seeds: &[u64], model: Option<&Path>) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let multi = seeds.len() > 1;
    if multi && model.is_some() {
        return Err(EdlError::Config("--model cannot be combined with several seeds".into()));
    }
    let reports = seeds
        .iter()
        .map(|&s| {
            let dir = seed_dir(out, s, multi);
            let path = model.map_or_else(|| dir.join("model.json"), Path::to_path_buf);
            let predictor = Predictor::load(&path)?;
            let run_seeds = RunSeeds::new(s);
            let splits = prepare_splits(cfg, run_seeds)?;
            let report = evaluate(cfg, &predictor, &splits, run_seeds)?;
            write_report(&dir, &report)?;
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    if multi {
        write_aggregate(out, &aggregate(&reports)?)?;
    }
    Ok(reports)
}

/// Train, evaluate and write everything for each seed.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let multi = seeds.len() > 1;
    let reports = seeds
        .iter()
        .map(|&s| {
            let r = run(cfg, s)?;
            let dir = seed_dir(out, s, multi);
            create_dir(&dir)?;
            r.trained.predictor.save(dir.join("model.json"))?;
            write_trace(dir.join("trace.csv"), &r.trained.trace)?;
            write_report(&dir, &r.report)?;
            Ok(r.report)
        })
        .collect::<Result<Vec<_>>>()?;
    if multi {
        write_aggregate(out, &aggregate(&reports)?)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Activation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Activation => "activation",
        }
    }
}

pub fn parse_activation(s: &str) -> Result<OutputActivation> {
    match s {
        "softmax" => Ok(OutputActivation::Softmax),
        "relu" | "relu_evidence" => Ok(OutputActivation::ReluEvidence),
        "softplus" | "softplus_evidence" => Ok(OutputActivation::SoftplusEvidence),
        "exp" | "exp_evidence" => Ok(OutputActivation::ExpEvidence),
        other => Err(EdlError::Config(format!("unknown activation {other:?}"))),
    }
}

/// The config for one sweep point.
pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Lambda => {
            let lambda: f64 = value
                .parse()
                .map_err(|_| EdlError::Config(format!("lambda value {value:?} is not a number")))?;
            cfg.train.lambda = Some(lambda);
        }
        SweepAxis::Activation => cfg.model.output_activation = Some(parse_activation(value)?),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub value: String,
    pub reports: Vec<RunReport>,
}

/// One run per axis value, seeded identically, under `out/<axis>_<value>/`,
/// plus `combined.csv` (metric against axis value, averaged over seeds)
/// and pooled ECDF series.
pub fn cmd_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    seeds: &[u64],
) -> Result<Vec<SweepResult>> {
    if values.is_empty() {
        return Err(EdlError::Config("a sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| sweep_point(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.join(format!("{}_{value}", axis.name()));
        let reports = cmd_run(cfg, &dir, seeds)?;
        results.push(SweepResult {
            value: value.clone(),
            reports,
        });
    }
    write_sweep_tables(out, axis, &results)?;
    Ok(results)
}

fn write_sweep_tables(out: &Path, axis: SweepAxis, results: &[SweepResult]) -> Result<()> {
    create_dir(out)?;
    let mut combined = Vec::new();
    let aggregates = results
        .iter()
        .map(|r| aggregate(&r.reports))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<String> = aggregates[0].metrics.keys().cloned().collect();
    for key in &keys {
        for (r, agg) in results.iter().zip(&aggregates) {
            combined.push(vec![
                key.clone(),
                r.value.clone(),
                opt(agg.metrics.get(key).copied().flatten()),
            ]);
        }
    }
    write_csv(&out.join("combined.csv"), &["metric", axis.name(), "value"], combined)?;
    for (name, pick) in [
        ("ecdf_uncertainty.csv", (|c: &crate::metrics::Curves| &c.ecdf_uncertainty) as fn(&_) -> &_),
        ("ecdf_entropy.csv", |c: &crate::metrics::Curves| &c.ecdf_entropy),
    ] {
        let rows = results.iter().flat_map(|r| {
            r.reports.iter().flat_map(move |rep| {
                pick(&rep.curves).iter().map(move |(x, y)| {
                    vec![r.value.clone(), rep.seed.to_string(), x.to_string(), y.to_string()]
                })
            })
        });
        write_csv(&out.join(name), &[axis.name(), "seed", "x", "y"], rows)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReportHead {
    schema_version: u32,
    method: Method,
    metrics: BTreeMap<String, Option<f64>>,
}

/// Aligns the scalar metrics of several reports (single-seed or
/// aggregate) into one CSV table, one row per report.
pub fn cmd_compare(reports: &[PathBuf]) -> Result<String> {
    if reports.len() < 2 {
        return Err(EdlError::Config("compare needs at least two reports".into()));
    }
    let heads = reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| EdlError::io(p, e))?;
            Ok((p, serde_json::from_str::<ReportHead>(&text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (first_path, first) = &heads[0];
    for (p, h) in &heads {
        if h.schema_version != first.schema_version {
            return Err(EdlError::Config(format!(
                "schema_version mismatch: {} has {}, {} has {}",
                first_path.display(),
                first.schema_version,
                p.display(),
                h.schema_version
            )));
        }
        if !h.metrics.keys().eq(first.metrics.keys()) {
            return Err(EdlError::Config(format!(
                "metric keys of {} differ from {}",
                p.display(),
                first_path.display()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "report".to_string()];
    header.extend(first.metrics.keys().cloned());
    let to_err = |e: csv::Error| EdlError::InvalidInput(e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for (p, h) in &heads {
        let mut row = vec![h.method.name().to_string(), p.display().to_string()];
        row.extend(h.metrics.values().map(|v| opt(*v)));
        w.write_record(&row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| EdlError::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EdlError::InvalidInput(e.to_string()))
}
