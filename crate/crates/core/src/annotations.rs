//! Multi-annotator label data: per-example annotation sets, majority
//! resolution, MA/NMA splitting and dataset files.
//!
//! An example is *majority-agreed* (MA) when exactly one class attains the
//! maximum vote count, and *non-majority-agreed* (NMA) on any tie for the
//! maximum. A plurality that is not an absolute majority is still MA.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};

/// Fraction of NMA examples held out for testing when NMA is trained as an
/// extra class.
pub const NMA_HOLDOUT_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    labels: Vec<usize>,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MajorityStatus {
    Agreed(usize),
    Tied,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajorityOutcome {
    pub status: MajorityStatus,
    /// Maximum count divided by the number of annotators.
    pub majority_fraction: f64,
}

impl MajorityOutcome {
    pub fn class(&self) -> Option<usize> {
        match self.status {
            MajorityStatus::Agreed(k) => Some(k),
            MajorityStatus::Tied => None,
        }
    }

    pub fn is_nma(&self) -> bool {
        self.status == MajorityStatus::Tied
    }
}

impl AnnotationSet {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(EdlError::InvalidInput("num_classes must be positive".into()));
        }
        if labels.is_empty() {
            return Err(EdlError::InvalidInput(
                "an annotation set needs at least one label".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(EdlError::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    /// A set holding `count[k]` annotations of each class `k`.
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat_n(k, c as usize))
            .collect();
        Self::new(labels, counts.len())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_annotators(&self) -> usize {
        self.labels.len()
    }

    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Relative frequency of each class among the annotations.
    pub fn soft_label(&self) -> Vec<f64> {
        let m = self.labels.len() as f64;
        self.counts().into_iter().map(|c| c as f64 / m).collect()
    }

    pub fn majority(&self) -> MajorityOutcome {
        let counts = self.counts();
        let max = *counts.iter().max().expect("num_classes > 0");
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let (first, _) = winners.next().expect("max is attained");
        let status = if winners.next().is_some() {
            MajorityStatus::Tied
        } else {
            MajorityStatus::Agreed(first)
        };
        MajorityOutcome {
            status,
            majority_fraction: max as f64 / self.labels.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: Vec<f64>,
    pub annotations: AnnotationSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    feature_dim: usize,
    class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    num_classes: usize,
    feature_dim: usize,
    #[serde(default)]
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    id: String,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        feature_dim: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(EdlError::InvalidInput(
                "num_classes and feature_dim must be positive".into(),
            ));
        }
        if !class_names.is_empty() && class_names.len() != num_classes {
            return Err(EdlError::InvalidInput(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        for ex in &examples {
            if ex.features.len() != feature_dim {
                return Err(EdlError::DimensionMismatch {
                    expected: feature_dim,
                    found: ex.features.len(),
                });
            }
            if ex.annotations.num_classes() != num_classes {
                return Err(EdlError::InvalidInput(format!(
                    "example {} has {} classes, dataset has {num_classes}",
                    ex.id,
                    ex.annotations.num_classes()
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
            class_names,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// An empty dataset with the same shape.
    pub fn empty_like(&self) -> Self {
        Self {
            examples: Vec::new(),
            ..self.clone_shape()
        }
    }

    fn clone_shape(&self) -> Self {
        Self {
            examples: Vec::new(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            class_names: self.class_names.clone(),
        }
    }

    fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            examples,
            ..self.clone_shape()
        }
    }

    /// Concatenation of two datasets with identical shape.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.num_classes != other.num_classes || self.feature_dim != other.feature_dim {
            return Err(EdlError::InvalidInput(
                "cannot concatenate datasets of different shape".into(),
            ));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(self.with_examples(examples))
    }

    /// Splits into consecutive parts after a seeded shuffle. Sizes are
    /// `round(fraction · n)` for all but the last part, which takes the rest.
    pub fn shuffle_split(&self, fractions: &[f64], seed: u64) -> Vec<Dataset> {
        let n = self.examples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i + 1 == fractions.len() {
                n
            } else {
                (start + (f * n as f64).round() as usize).min(n)
            };
            let examples = order[start..end]
                .iter()
                .map(|&j| self.examples[j].clone())
                .collect();
            parts.push(self.with_examples(examples));
            start = end;
        }
        parts
    }

    pub fn load(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Self> {
        match format {
            DatasetFormat::Jsonl => Self::load_jsonl(path),
            DatasetFormat::Csv => Self::load_csv(path, None),
        }
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| EdlError::io(path, e))?;
        let mut lines = BufReader::new(file)
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l));
        let mut header: Option<JsonlHeader> = None;
        let mut examples = Vec::new();
        for (line_no, line) in lines.by_ref() {
            let line = line.map_err(|e| EdlError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let Some(h) = &header else {
                let h: JsonlHeader = serde_json::from_str(&line).map_err(|e| EdlError::Parse {
                    line: line_no,
                    message: format!("bad header: {e}"),
                })?;
                header = Some(h);
                continue;
            };
            let row: JsonlRow = serde_json::from_str(&line).map_err(|e| EdlError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            examples.push(row_to_example(
                line_no,
                row.id,
                row.features,
                row.labels,
                h.num_classes,
                h.feature_dim,
            )?);
        }
        let h = header.ok_or(EdlError::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        Self::new(examples, h.num_classes, h.feature_dim, h.class_names)
    }

    /// Loads the CSV layout `id,f0,…,f{D-1},labels` where `labels` is a
    /// `|`-separated list of class indices. Without `num_classes`, the
    /// number of classes is one more than the largest label seen.
    pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let n_cols = headers.len();
        if n_cols < 3 || &headers[0] != "id" || &headers[n_cols - 1] != "labels" {
            return Err(EdlError::Parse {
                line: 1,
                message: "expected header id,f0,...,labels".into(),
            });
        }
        let feature_dim = n_cols - 2;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let features = (1..=feature_dim)
                .map(|i| {
                    record[i].trim().parse::<f64>().map_err(|e| EdlError::Parse {
                        line,
                        message: format!("feature f{}: {e}", i - 1),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = record[n_cols - 1]
                .split('|')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|e| EdlError::Parse {
                        line,
                        message: format!("labels: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((line, record[0].to_string(), features, labels));
        }
        let k = num_classes.unwrap_or_else(|| {
            rows.iter()
                .flat_map(|r| r.3.iter().copied())
                .max()
                .map_or(1, |m| m + 1)
        });
        let examples = rows
            .into_iter()
            .map(|(line, id, f, l)| row_to_example(line, id, f, l, k, feature_dim))
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples, k, feature_dim, Vec::new())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| EdlError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = JsonlHeader {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            class_names: self.class_names.clone(),
        };
        let mut write_line = |s: String| writeln!(out, "{s}").map_err(|e| EdlError::io(path, e));
        write_line(serde_json::to_string(&header)?)?;
        for ex in &self.examples {
            let row = JsonlRow {
                id: ex.id.clone(),
                features: ex.features.clone(),
                labels: ex.annotations.labels().to_vec(),
            };
            write_line(serde_json::to_string(&row)?)?;
        }
        out.flush().map_err(|e| EdlError::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> EdlError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => return EdlError::io(path, io),
            _ => unreachable!(),
        }
    }
    EdlError::Parse {
        line,
        message: e.to_string(),
    }
}

fn row_to_example(
    line: usize,
    id: String,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_dim: usize,
) -> Result<Example> {
    if features.len() != feature_dim {
        return Err(EdlError::Parse {
            line,
            message: format!(
                "dimension mismatch: expected {feature_dim} features, found {}",
                features.len()
            ),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(EdlError::LabelOutOfRange {
            line,
            label,
            num_classes,
        });
    }
    if labels.is_empty() {
        return Err(EdlError::Parse {
            line,
            message: "example has no labels".into(),
        });
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(EdlError::Parse {
            line,
            message: "non-finite feature".into(),
        });
    }
    Ok(Example {
        id,
        features,
        annotations: AnnotationSet::new(labels, num_classes)?,
    })
}

/// Partitions a dataset by majority status, preserving order.
pub fn split_ma_nma(d: &Dataset) -> (Dataset, Dataset) {
    let (nma, ma): (Vec<Example>, Vec<Example>) = d
        .examples
        .iter()
        .cloned()
        .partition(|ex| ex.annotations.majority().is_nma());
    (d.with_examples(ma), d.with_examples(nma))
}

/// Seeded hold-out of `round(fraction · n)` examples. Returns `(kept, held_out)`.
pub fn hold_out(d: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut parts = d.shuffle_split(&[fraction, 1.0 - fraction], seed);
    let kept = parts.pop().expect("two parts");
    let held = parts.pop().expect("two parts");
    (kept, held)
}

/// Relabels a dataset to `K + 1` classes: MA examples keep their majority
/// label as a single annotation, NMA examples get the new class `K`.
pub fn extra_class_dataset(d: &Dataset) -> Dataset {
    let k = d.num_classes;
    let examples = d
        .examples
        .iter()
        .map(|ex| {
            let label = ex.annotations.majority().class().unwrap_or(k);
            Example {
                id: ex.id.clone(),
                features: ex.features.clone(),
                annotations: AnnotationSet {
                    labels: vec![label],
                    num_classes: k + 1,
                },
            }
        })
        .collect();
    let mut class_names = d.class_names.clone();
    if !class_names.is_empty() {
        class_names.push("nma".into());
    }
    Dataset {
        examples,
        num_classes: k + 1,
        feature_dim: d.feature_dim,
        class_names,
    }
}

/// Holds out a quarter of the NMA examples (seeded) and relabels the rest
/// of the dataset with NMA as an extra class. Returns the `K + 1` class
/// training set and the held-out NMA examples with their original labels.
pub fn relabel_with_extra_class(d: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let (ma, nma) = split_ma_nma(d);
    let (nma_train, nma_test) = hold_out(&nma, NMA_HOLDOUT_FRACTION, seed);
    let train = ma
        .concat(&nma_train)
        .expect("split halves share a shape");
    (extra_class_dataset(&train), nma_test)
}
