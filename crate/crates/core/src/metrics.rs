//! Evaluation: classification, calibration, NMA detection, distribution
//! estimation, reject-option curves and ECDFs.
//!
//! Predicted classes are the argmax of the probability vector with ties
//! broken toward the lowest index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::special::{argmax, entropy};

pub const DEFAULT_BINS: usize = 10;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// One evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// Majority class; `None` for NMA examples.
    pub true_majority: Option<usize>,
    pub counts: Vec<u32>,
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub uncertainty: f64,
    pub is_nma: bool,
}

impl EvalRecord {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn is_correct(&self) -> bool {
        self.true_majority == Some(self.predicted())
    }
}

fn labelled(records: &[EvalRecord]) -> impl Iterator<Item = &EvalRecord> {
    records.iter().filter(|r| r.true_majority.is_some())
}

/// Fraction of majority-labelled records whose argmax matches.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    let (n, correct) = labelled(records).fold((0usize, 0usize), |(n, c), r| {
        (n + 1, c + usize::from(r.is_correct()))
    });
    if n == 0 {
        return Err(EdlError::EmptyInput("accuracy"));
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UarResult {
    pub value: f64,
    /// Classes with no ground-truth support, excluded from the mean.
    pub missing_classes: Vec<usize>,
}

/// Unweighted average recall over the classes present in the ground truth.
pub fn uar(records: &[EvalRecord]) -> Result<UarResult> {
    let k = labelled(records)
        .map(|r| r.counts.len())
        .max()
        .ok_or(EdlError::EmptyInput("uar"))?;
    let mut support = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for r in labelled(records) {
        let t = r.true_majority.expect("filtered");
        support[t] += 1;
        hits[t] += usize::from(r.is_correct());
    }
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    let value = present
        .iter()
        .map(|&c| hits[c] as f64 / support[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok(UarResult {
        value,
        missing_classes: (0..k).filter(|&c| support[c] == 0).collect(),
    })
}

/// Index of the equal-width bin `(q/Q, (q+1)/Q]` holding `conf`; zero goes
/// to the first bin.
fn bin_index(conf: f64, bins: usize) -> usize {
    let q = bins as f64;
    let mut idx = ((conf * q).ceil() as usize).saturating_sub(1).min(bins - 1);
    // correct for rounding in conf·Q at the edges
    if idx > 0 && conf <= idx as f64 / q {
        idx -= 1;
    } else if idx + 1 < bins && conf > (idx + 1) as f64 / q {
        idx += 1;
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin accuracy and mean confidence over majority-labelled records.
pub fn calibration_bins(records: &[EvalRecord], bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(EdlError::InvalidInput("need at least one calibration bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    let mut n = 0;
    for r in labelled(records) {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(EdlError::InvalidInput(format!(
                "confidence {} outside [0, 1]",
                r.confidence
            )));
        }
        let b = bin_index(r.confidence, bins);
        count[b] += 1;
        correct[b] += f64::from(u8::from(r.is_correct()));
        conf[b] += r.confidence;
        n += 1;
    }
    if n == 0 {
        return Err(EdlError::EmptyInput("calibration_bins"));
    }
    Ok((0..bins)
        .map(|b| {
            let c = count[b].max(1) as f64;
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                accuracy: correct[b] / c,
                confidence: conf[b] / c,
            }
        })
        .collect())
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(records: &[EvalRecord], bins: usize) -> Result<f64> {
    let table = calibration_bins(records, bins)?;
    let n: usize = table.iter().map(|b| b.count).sum();
    Ok(table
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Largest calibration gap over the nonempty bins.
pub fn mce(records: &[EvalRecord], bins: usize) -> Result<f64> {
    Ok(calibration_bins(records, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.accuracy - b.confidence).abs())
        .fold(0.0, f64::max))
}

fn check_binary(scores: &[f64], positive: &[bool], name: &'static str) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(EdlError::DimensionMismatch {
            expected: scores.len(),
            found: positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EdlError::InvalidInput(format!("{name}: NaN score")));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EdlError::SingleClass(name));
    }
    Ok((pos, neg))
}

// indices sorted by descending score, grouped into runs of equal score
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve, Mann–Whitney form: the probability that a
/// random positive scores above a random negative, ties counting ½.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, positive, "auroc")?;
    // walk from the lowest score up, counting negatives already passed
    let mut below_neg = 0usize;
    let mut wins = 0.0;
    for group in tie_groups(scores).iter().rev() {
        let gp = group.iter().filter(|&&i| positive[i]).count();
        let gn = group.len() - gp;
        wins += gp as f64 * (below_neg as f64 + 0.5 * gn as f64);
        below_neg += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision–recall curve as average precision over tied
/// score groups in descending order.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, positive, "auprc")?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for group in tie_groups(scores) {
        let gp = group.iter().filter(|&&i| positive[i]).count();
        tp += gp;
        seen += group.len();
        if gp > 0 {
            ap += (tp as f64 / seen as f64) * (gp as f64 / pos as f64);
        }
    }
    Ok(ap)
}

/// Mean per-annotation negative log-likelihood of the annotations under
/// the predicted categorical, −(1/M) Σ ŷ_k ln p_k. When the prediction has
/// extra trailing classes (an NMA output) they are dropped and the rest
/// renormalised.
pub fn multinomial_nll(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EdlError::EmptyInput("multinomial_nll"));
    }
    let total: f64 = records.iter().map(record_nll).collect::<Result<Vec<_>>>()?.iter().sum();
    Ok(total / records.len() as f64)
}

fn record_nll(r: &EvalRecord) -> Result<f64> {
    let k = r.counts.len();
    if r.probs.len() < k {
        return Err(EdlError::DimensionMismatch {
            expected: k,
            found: r.probs.len(),
        });
    }
    let m: u32 = r.counts.iter().sum();
    if m == 0 {
        return Err(EdlError::InvalidInput(format!("record {} has no annotations", r.id)));
    }
    let mass: f64 = r.probs[..k].iter().sum();
    Ok(-r
        .counts
        .iter()
        .zip(&r.probs)
        .filter(|(c, _)| **c > 0)
        .map(|(&c, &p)| f64::from(c) * (p / mass).max(PROB_FLOOR).ln())
        .sum::<f64>()
        / f64::from(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectQuantity {
    Accuracy,
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectPoint {
    pub threshold: f64,
    pub retained: usize,
    /// `None` when no record survives the threshold.
    pub value: Option<f64>,
}

/// Metric over the records whose uncertainty is at most each threshold.
pub fn reject_curve(records: &[EvalRecord], quantity: RejectQuantity, thresholds: &[f64]) -> Result<Vec<RejectPoint>> {
    if records.is_empty() {
        return Err(EdlError::EmptyInput("reject_curve"));
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|t| {
            let kept: Vec<EvalRecord> = records
                .iter()
                .filter(|r| r.uncertainty <= t)
                .filter(|r| quantity == RejectQuantity::Nll || r.true_majority.is_some())
                .cloned()
                .collect();
            let value = if kept.is_empty() {
                None
            } else {
                Some(match quantity {
                    RejectQuantity::Accuracy => accuracy(&kept)?,
                    RejectQuantity::Nll => multinomial_nll(&kept)?,
                })
            };
            Ok(RejectPoint {
                threshold: t,
                retained: kept.len(),
                value,
            })
        })
        .collect()
}

/// Empirical CDF as the sorted points `(x_(i), i/n)`.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(EdlError::EmptyInput("ecdf"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect())
}

/// Rows are true classes, columns predicted classes. The matrix is
/// `size × size`; NMA records count as class `counts.len()` when the
/// predictor has that extra output, and are skipped otherwise.
pub fn confusion_matrix(records: &[EvalRecord], size: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; size]; size];
    for r in records {
        let truth = match r.true_majority {
            Some(t) => t,
            None if r.is_nma && r.counts.len() < size => r.counts.len(),
            None => continue,
        };
        let pred = r.predicted();
        if truth < size && pred < size {
            m[truth][pred] += 1;
        }
    }
    m
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EdlError::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(EdlError::EmptyInput("spearman"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// How reject-curve thresholds are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    Fixed(Vec<f64>),
    /// The `i/n` quantiles of the evaluated uncertainties, `i = 1..=n`, so
    /// the last point always retains every record.
    Quantiles(usize),
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Quantiles(20)
    }
}

impl Thresholds {
    pub fn resolve(&self, uncertainties: &[f64]) -> Vec<f64> {
        match self {
            Thresholds::Fixed(t) => t.clone(),
            Thresholds::Quantiles(n) => {
                let mut sorted = uncertainties.to_vec();
                sorted.sort_by(f64::total_cmp);
                let len = sorted.len();
                let mut out: Vec<f64> = (1..=*n)
                    .filter_map(|i| {
                        let idx = (i * len).div_ceil(*n);
                        idx.checked_sub(1).map(|j| sorted[j])
                    })
                    .collect();
                out.dedup();
                out
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Thresholds::Fixed(t) if t.is_empty() || t.iter().any(|x| !x.is_finite()) => Err(
                EdlError::Config("fixed thresholds must be a nonempty list of finite values".into()),
            ),
            Thresholds::Quantiles(0) => Err(EdlError::Config("need at least one quantile".into())),
            _ => Ok(()),
        }
    }
}

/// Inputs to [`MetricsReport::build`] beyond the records themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub bins: usize,
    /// Uncertainty thresholds for the reject curves.
    pub thresholds: Thresholds,
    /// Whether detection against the full NMA set is meaningful. It is not
    /// when part of the NMA data was used for training.
    pub detect_on_all: bool,
    /// Side of the confusion matrix; `K + 1` when NMA is a predicted class.
    pub confusion_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub reject_accuracy: Vec<RejectPoint>,
    pub reject_nll_ma: Vec<RejectPoint>,
    pub reject_nll_nma: Vec<RejectPoint>,
    pub ecdf_uncertainty: Vec<(f64, f64)>,
    pub ecdf_entropy: Vec<(f64, f64)>,
    pub calibration: Vec<CalibrationBin>,
}

/// Every scalar and curve for one evaluation. Scalars that do not apply
/// to a run are `None` so that reports from different methods share keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scalars: BTreeMap<String, Option<f64>>,
    pub uar_missing_classes: Vec<usize>,
    pub curves: Curves,
    pub confusion: Vec<Vec<usize>>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

fn detection(ma: &[EvalRecord], nma: &[EvalRecord]) -> Result<(Option<f64>, Option<f64>)> {
    if ma.is_empty() || nma.is_empty() {
        return Ok((None, None));
    }
    let scores: Vec<f64> = ma.iter().chain(nma).map(|r| r.uncertainty).collect();
    let labels: Vec<bool> = ma.iter().map(|_| false).chain(nma.iter().map(|_| true)).collect();
    Ok((Some(auroc(&scores, &labels)?), Some(auprc(&scores, &labels)?)))
}

/// Spearman correlation between threshold and metric over the nonempty
/// points of a reject curve.
pub fn reject_trend(curve: &[RejectPoint]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .filter_map(|p| p.value.map(|v| (p.threshold, v)))
        .unzip();
    spearman(&x, &y).ok()
}

impl MetricsReport {
    /// `ma_test` holds majority-agreed test records; `nma_all` and
    /// `nma_test` the full NMA set and its held-out part.
    pub fn build(
        ma_test: &[EvalRecord],
        nma_all: &[EvalRecord],
        nma_test: &[EvalRecord],
        opts: &ReportOptions,
    ) -> Result<Self> {
        if ma_test.is_empty() {
            return Err(EdlError::EmptyInput("MetricsReport::build"));
        }
        let thresholds_for = |r: &[EvalRecord]| {
            let u: Vec<f64> = r.iter().map(|x| x.uncertainty).collect();
            opts.thresholds.resolve(&u)
        };
        let mut scalars = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            scalars.insert(k.to_string(), v);
        };
        let u = uar(ma_test)?;
        put("acc", Some(accuracy(ma_test)?));
        put("uar", Some(u.value));
        put("ece", Some(ece(ma_test, opts.bins)?));
        put("mce", Some(mce(ma_test, opts.bins)?));

        let (roc_all, prc_all) = if opts.detect_on_all {
            detection(ma_test, nma_all)?
        } else {
            (None, None)
        };
        let (roc_test, prc_test) = detection(ma_test, nma_test)?;
        put("auroc_all", roc_all);
        put("auprc_all", prc_all);
        put("auroc_test", roc_test);
        put("auprc_test", prc_test);

        let nll = |r: &[EvalRecord]| -> Result<Option<f64>> {
            if r.is_empty() {
                Ok(None)
            } else {
                multinomial_nll(r).map(Some)
            }
        };
        put("nll_ma", nll(ma_test)?);
        put("nll_nma", nll(nma_test)?);
        put("nll_nma_all", if opts.detect_on_all { nll(nma_all)? } else { None });

        let test: Vec<&EvalRecord> = ma_test.iter().chain(nma_test).collect();
        let entropies: Vec<f64> = test.iter().map(|r| entropy(&r.probs)).collect();
        let uncertainties: Vec<f64> = test.iter().map(|r| r.uncertainty).collect();
        put("mean_uncertainty_ma", mean_of(ma_test.iter().map(|r| r.uncertainty)));
        put("mean_uncertainty_nma", mean_of(nma_test.iter().map(|r| r.uncertainty)));
        put("mean_uncertainty_test", mean_of(uncertainties.iter().copied()));
        put("mean_entropy_test", mean_of(entropies.iter().copied()));

        // NMA data never seen in training: all of it, unless the method
        // trained on part of it
        let unseen_nma = if opts.detect_on_all { nma_all } else { nma_test };
        let reject_nll_nma = if unseen_nma.is_empty() {
            Vec::new()
        } else {
            reject_curve(unseen_nma, RejectQuantity::Nll, &thresholds_for(unseen_nma))?
        };
        put("reject_nll_nma_spearman", reject_trend(&reject_nll_nma));

        if let Some((k, _)) = scalars.iter().find(|(_, v)| v.is_some_and(|x| !x.is_finite())) {
            return Err(EdlError::InvalidInput(format!("metric {k} is not finite")));
        }

        let confusion_records: Vec<EvalRecord> = if opts.confusion_size > ma_test[0].counts.len() {
            ma_test.iter().chain(nma_test).cloned().collect()
        } else {
            ma_test.to_vec()
        };
        Ok(Self {
            scalars,
            uar_missing_classes: u.missing_classes,
            curves: Curves {
                reject_accuracy: reject_curve(ma_test, RejectQuantity::Accuracy, &thresholds_for(ma_test))?,
                reject_nll_ma: reject_curve(ma_test, RejectQuantity::Nll, &thresholds_for(ma_test))?,
                reject_nll_nma,
                ecdf_uncertainty: ecdf(&uncertainties)?,
                ecdf_entropy: ecdf(&entropies)?,
                calibration: calibration_bins(ma_test, opts.bins)?,
            },
            confusion: confusion_matrix(&confusion_records, opts.confusion_size),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(truth: Option<usize>, probs: &[f64], conf: f64) -> EvalRecord {
        EvalRecord {
            id: String::new(),
            true_majority: truth,
            counts: vec![1; probs.len()],
            probs: probs.to_vec(),
            confidence: conf,
            uncertainty: 1.0 - conf,
            is_nma: truth.is_none(),
        }
    }

    #[test]
    fn accuracy_cases() {
        let all = vec![rec(Some(0), &[0.9, 0.1], 0.9), rec(Some(1), &[0.2, 0.8], 0.8)];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let three_of_four = vec![
            rec(Some(0), &[0.9, 0.1], 0.9),
            rec(Some(1), &[0.2, 0.8], 0.8),
            rec(Some(1), &[0.3, 0.7], 0.7),
            rec(Some(1), &[0.6, 0.4], 0.6),
        ];
        assert_eq!(accuracy(&three_of_four).unwrap(), 0.75);
        // tie goes to class 0
        assert_eq!(accuracy(&[rec(Some(0), &[0.5, 0.5], 0.5)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[rec(Some(1), &[0.5, 0.5], 0.5)]).unwrap(), 0.0);
        assert!(accuracy(&[]).is_err());
        assert!(accuracy(&[rec(None, &[0.5, 0.5], 0.5)]).is_err());
    }

    #[test]
    fn uar_cases() {
        let recs = vec![
            rec(Some(0), &[0.9, 0.1], 0.9),
            rec(Some(1), &[0.2, 0.8], 0.8),
            rec(Some(1), &[0.7, 0.3], 0.7),
        ];
        assert_eq!(uar(&recs).unwrap().value, 0.75);
        let perfect = vec![rec(Some(0), &[0.9, 0.1], 0.9), rec(Some(1), &[0.1, 0.9], 0.9)];
        assert_eq!(uar(&perfect).unwrap().value, 1.0);
        let missing = vec![rec(Some(0), &[0.9, 0.1, 0.0], 0.9), rec(Some(2), &[0.1, 0.0, 0.9], 0.9)];
        let u = uar(&missing).unwrap();
        assert_eq!(u.value, 1.0);
        assert_eq!(u.missing_classes, vec![1]);
    }

    #[test]
    fn calibration_hand_case() {
        let recs = vec![
            rec(Some(0), &[0.4, 0.3, 0.3], 0.4),
            rec(Some(0), &[0.4, 0.3, 0.3], 0.4),
            rec(Some(0), &[0.9, 0.05, 0.05], 0.9),
            rec(Some(1), &[0.9, 0.05, 0.05], 0.9),
        ];
        assert!((ece(&recs, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((mce(&recs, 2).unwrap() - 0.6).abs() < 1e-12);
        assert!(ece(&recs, 0).is_err());
    }

    #[test]
    fn perfectly_calibrated_is_zero() {
        // bin (0.7, 0.8]: 10 records at confidence 0.75, 7.5 of 10 can't be
        // hit exactly, so use 0.8 with 4 of 5 correct
        let mut recs = Vec::new();
        for i in 0..5 {
            let truth = if i < 4 { 0 } else { 1 };
            recs.push(rec(Some(truth), &[0.8, 0.2], 0.8));
        }
        for _ in 0..3 {
            recs.push(rec(Some(0), &[1.0, 0.0], 1.0));
        }
        assert!(ece(&recs, 10).unwrap().abs() < 1e-12);
        assert!(mce(&recs, 10).unwrap().abs() < 1e-12);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.51, 2), 1);
    }

    #[test]
    fn auroc_cases() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, true, false, false];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 4], &l).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(EdlError::SingleClass(_))));
    }

    #[test]
    fn auprc_cases() {
        let l = [true, true, false, false];
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        // all tied: precision is the positive rate at full recall
        assert_eq!(auprc(&[0.3; 4], &l).unwrap(), 0.5);
        // ranking n, p, p, n: P@2 = 1/2 for the first positive, P@3 = 2/3
        let ap = auprc(&[0.9, 0.8, 0.7, 0.1], &[false, true, true, false]).unwrap();
        assert!((ap - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!(auprc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn nll_cases() {
        let mut r = rec(Some(0), &[0.5, 0.5], 0.5);
        r.counts = vec![1, 1];
        assert!((multinomial_nll(&[r.clone()]).unwrap() - 2f64.ln()).abs() < 1e-12);
        r.counts = vec![3, 0];
        r.probs = vec![1.0, 0.0];
        assert_eq!(multinomial_nll(&[r.clone()]).unwrap(), 0.0);
        // less mass on the majority class means higher NLL
        r.counts = vec![3, 0];
        let mut last = 0.0;
        for p in [0.9, 0.7, 0.5, 0.3] {
            r.probs = vec![p, 1.0 - p];
            let v = multinomial_nll(&[r.clone()]).unwrap();
            assert!(v > last);
            last = v;
        }
        // an extra NMA output is dropped and the rest renormalised
        r.counts = vec![1, 1];
        r.probs = vec![0.25, 0.25, 0.5];
        assert!((multinomial_nll(&[r]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reject_curve_cases() {
        let mut recs = vec![
            rec(Some(0), &[0.9, 0.1], 0.9),
            rec(Some(1), &[0.6, 0.4], 0.6),
            rec(Some(1), &[0.3, 0.7], 0.7),
        ];
        recs[0].uncertainty = 0.1;
        recs[1].uncertainty = 0.5;
        recs[2].uncertainty = 0.3;
        let curve = reject_curve(&recs, RejectQuantity::Accuracy, &[1.0, 0.05, 0.3, 0.4]).unwrap();
        let thresholds: Vec<f64> = curve.iter().map(|p| p.threshold).collect();
        assert_eq!(thresholds, vec![0.05, 0.3, 0.4, 1.0]);
        assert_eq!(curve[0].retained, 0);
        assert_eq!(curve[0].value, None);
        assert_eq!(curve[1].retained, 2);
        assert_eq!(curve[1].value, Some(1.0));
        assert_eq!(curve[3].value, Some(accuracy(&recs).unwrap()));
        let nll = reject_curve(&recs, RejectQuantity::Nll, &[1.0]).unwrap();
        assert_eq!(nll[0].value, Some(multinomial_nll(&recs).unwrap()));
    }

    #[test]
    fn ecdf_cases() {
        assert_eq!(ecdf(&[0.5]).unwrap(), vec![(0.5, 1.0)]);
        let e = ecdf(&[3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!(e, vec![(1.0, 0.25), (2.0, 0.5), (3.0, 0.75), (4.0, 1.0)]);
        assert!(ecdf(&[]).is_err());
    }

    #[test]
    fn confusion_cases() {
        let perfect = vec![rec(Some(0), &[0.9, 0.1], 0.9), rec(Some(1), &[0.1, 0.9], 0.9)];
        assert_eq!(confusion_matrix(&perfect, 2), vec![vec![1, 0], vec![0, 1]]);
        let all_zero = vec![rec(Some(0), &[0.9, 0.1], 0.9), rec(Some(1), &[0.6, 0.4], 0.6)];
        assert_eq!(confusion_matrix(&all_zero, 2), vec![vec![1, 0], vec![1, 0]]);
        // NMA row for a K+1 output head
        let mut nma = rec(None, &[0.1, 0.2, 0.7], 0.7);
        nma.counts = vec![1, 1];
        let m = confusion_matrix(&[nma], 3);
        assert_eq!(m[2][2], 1);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn auroc_invariant_to_monotone_maps(
            pairs in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((a - auroc(&mapped, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auroc_matches_pairwise_count(
            pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 5.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let (mut wins, mut total) = (0.0, 0.0);
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if labels[i] && !labels[j] {
                        total += 1.0;
                        if scores[i] > scores[j] { wins += 1.0 } else if scores[i] == scores[j] { wins += 0.5 }
                    }
                }
            }
            prop_assert!((auroc(&scores, &labels).unwrap() - wins / total).abs() < 1e-12);
        }

        #[test]
        fn calibration_bounds(
            rows in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
            bins in 1usize..20,
        ) {
            let recs: Vec<EvalRecord> = rows.iter().map(|&(c, ok)| {
                let mut r = rec(Some(if ok { 0 } else { 1 }), &[1.0, 0.0], c);
                r.confidence = c;
                r
            }).collect();
            let e = ece(&recs, bins).unwrap();
            let m = mce(&recs, bins).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(m >= e - 1e-12);
        }

        #[test]
        fn nll_invariant_to_duplicated_counts(
            counts in proptest::collection::vec(0u32..5, 3),
            raw in proptest::collection::vec(0.01f64..1.0, 3),
        ) {
            prop_assume!(counts.iter().sum::<u32>() > 0);
            let s: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / s).collect();
            let mut r = rec(Some(0), &probs, 0.5);
            r.counts = counts.clone();
            let a = multinomial_nll(&[r.clone()]).unwrap();
            r.counts = counts.iter().map(|c| 2 * c).collect();
            prop_assert!((a - multinomial_nll(&[r]).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn reject_at_max_threshold_is_global(
            rows in proptest::collection::vec((0.0f64..1.0, 0.01f64..1.0, 0u32..4, 0u32..4), 1..40)
        ) {
            let recs: Vec<EvalRecord> = rows.iter().map(|&(u, p, a, b)| {
                let mut r = rec(Some(usize::from(a < b)), &[p / (1.0 + p), 1.0 / (1.0 + p)], 0.5);
                r.counts = vec![a + 1, b];
                r.uncertainty = u;
                r
            }).collect();
            let top = recs.iter().map(|r| r.uncertainty).fold(0.0, f64::max);
            let nll = reject_curve(&recs, RejectQuantity::Nll, &[top]).unwrap();
            prop_assert_eq!(nll[0].value, Some(multinomial_nll(&recs).unwrap()));
            let acc = reject_curve(&recs, RejectQuantity::Accuracy, &[top]).unwrap();
            prop_assert_eq!(acc[0].value, Some(accuracy(&recs).unwrap()));
        }
    }

    #[test]
    fn auprc_of_random_scores_is_the_base_rate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
        assert!((auprc(&scores, &labels).unwrap() - 0.3).abs() < 0.05);
        assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn report_keys_and_detection_scope() {
        let mut ma = vec![
            rec(Some(0), &[0.9, 0.1], 0.9),
            rec(Some(1), &[0.2, 0.8], 0.8),
            rec(Some(0), &[0.7, 0.3], 0.7),
        ];
        for (r, u) in ma.iter_mut().zip([0.1, 0.2, 0.3]) {
            r.uncertainty = u;
        }
        let mut nma = rec(None, &[0.5, 0.5], 0.5);
        nma.is_nma = true;
        nma.uncertainty = 0.9;
        let nma_all = vec![nma.clone(), nma.clone()];
        let nma_test = vec![nma];
        let mut opts = ReportOptions {
            bins: 10,
            thresholds: Thresholds::default(),
            detect_on_all: true,
            confusion_size: 2,
        };
        let full = MetricsReport::build(&ma, &nma_all, &nma_test, &opts).unwrap();
        assert_eq!(full.scalars["acc"], Some(1.0));
        assert_eq!(full.scalars["auroc_all"], Some(1.0));
        assert_eq!(full.scalars["auroc_test"], Some(1.0));
        assert_eq!(full.confusion, vec![vec![2, 0], vec![0, 1]]);
        // every NMA record shares one uncertainty, so the curve is a single point
        assert_eq!(full.curves.reject_nll_nma.len(), 1);
        assert_eq!(full.scalars["reject_nll_nma_spearman"], None);

        opts.detect_on_all = false;
        let scoped = MetricsReport::build(&ma, &[], &nma_test, &opts).unwrap();
        assert_eq!(scoped.scalars["auroc_all"], None);
        assert_eq!(scoped.scalars["nll_nma_all"], None);
        assert_eq!(scoped.scalars["auroc_test"], Some(1.0));
        let keys = |r: &MetricsReport| r.scalars.keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&full), keys(&scoped));
        assert!(MetricsReport::build(&[], &nma_all, &nma_test, &opts).is_err());
    }
}
