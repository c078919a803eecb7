//! Threshold-based and ranking-based evaluation of code confidences.
//!
//! A code is predicted when its confidence is at least the threshold.
//! Rankings order codes by confidence, highest first, with ties broken by
//! code index ascending; [`rank_codes`] is the single implementation shared
//! with the server.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{CodeRange, LabelSpace};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction set is empty")]
    EmptyPredictionSet,
    #[error("example {0} has no labels")]
    EmptyLabelSet(usize),
    #[error("example {index} has {found} confidences, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, found: usize },
    #[error("label index {0} outside the code universe")]
    LabelOutOfRange(usize),
    #[error("unknown code or empty range: {0}")]
    UnknownCode(String),
    #[error("gold labels are required for this metric")]
    MissingGold,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub confidences: Vec<f64>,
    /// Label indices in recorded order (primary first), no duplicates.
    pub labels: Vec<usize>,
    pub gold: Option<Vec<usize>>,
    pub primary: Option<usize>,
}

impl Example {
    pub fn new(confidences: Vec<f64>, labels: Vec<usize>) -> Self {
        let primary = labels.first().copied();
        Example {
            confidences,
            labels,
            gold: None,
            primary,
        }
    }

    pub fn with_gold(mut self, gold: Vec<usize>) -> Self {
        self.gold = Some(gold);
        self
    }

    fn has_label(&self, code: usize) -> bool {
        self.labels.contains(&code)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub code_count: usize,
    pub examples: Vec<Example>,
}

impl PredictionSet {
    pub fn new(code_count: usize, examples: Vec<Example>) -> Result<Self, MetricsError> {
        for (index, ex) in examples.iter().enumerate() {
            if ex.confidences.len() != code_count {
                return Err(MetricsError::LengthMismatch {
                    index,
                    expected: code_count,
                    found: ex.confidences.len(),
                });
            }
            let out_of_range = ex.labels.iter().chain(ex.gold.iter().flatten()).find(|&&l| l >= code_count);
            if let Some(&l) = out_of_range {
                return Err(MetricsError::LabelOutOfRange(l));
            }
        }
        Ok(PredictionSet { code_count, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Code indices by confidence descending, ties by index ascending.
pub fn rank_codes(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(confidences, a, b));
    order
}

fn rank_cmp(confidences: &[f64], a: usize, b: usize) -> Ordering {
    confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b))
}

/// Predicted code indices at `threshold`, ascending.
pub fn predicted_codes(confidences: &[f64], threshold: f64) -> Vec<usize> {
    (0..confidences.len()).filter(|&c| confidences[c] >= threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

pub fn per_code_confusion(set: &PredictionSet, threshold: f64) -> Vec<Confusion> {
    let mut out = vec![Confusion::default(); set.code_count];
    for ex in &set.examples {
        for (c, counts) in out.iter_mut().enumerate() {
            match (ex.confidences[c] >= threshold, ex.has_label(c)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    out
}

/// How macro F1 treats codes absent from both labels and predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSupport {
    #[default]
    Exclude,
    CountAsZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

pub fn f1_from_confusion(counts: &[Confusion], zero: ZeroSupport) -> F1Scores {
    let pooled = counts.iter().fold(Confusion::default(), |acc, c| Confusion {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    let included: Vec<f64> = counts
        .iter()
        .filter(|c| zero == ZeroSupport::CountAsZero || !c.is_empty())
        .map(Confusion::f1)
        .collect();
    let macro_ = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    F1Scores { micro: pooled.f1(), macro_ }
}

pub fn f1_scores(set: &PredictionSet, threshold: f64, zero: ZeroSupport) -> F1Scores {
    f1_from_confusion(&per_code_confusion(set, threshold), zero)
}

pub fn exact_match_ratio(set: &PredictionSet, threshold: f64) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let matches = set
        .examples
        .iter()
        .filter(|ex| {
            let mut labels = ex.labels.clone();
            labels.sort_unstable();
            predicted_codes(&ex.confidences, threshold) == labels
        })
        .count();
    matches as f64 / set.len() as f64
}

/// Pooled over (example, label) pairs. Returns 0 when there are no labels.
pub fn recall_at_k(set: &PredictionSet, k: usize) -> f64 {
    let (hits, total) = set.examples.iter().fold((0usize, 0usize), |(h, t), ex| {
        let top = &rank_codes(&ex.confidences)[..k.min(set.code_count)];
        (h + ex.labels.iter().filter(|l| top.contains(l)).count(), t + ex.labels.len())
    });
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn check_labels(set: &PredictionSet) -> Result<(), MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }
    match set.examples.iter().position(|ex| ex.labels.is_empty()) {
        Some(i) => Err(MetricsError::EmptyLabelSet(i)),
        None => Ok(()),
    }
}

/// Mean over examples of precision within the top-|labels| ranked codes.
pub fn precision_at_recall(set: &PredictionSet) -> Result<f64, MetricsError> {
    check_labels(set)?;
    let total: f64 = set
        .examples
        .iter()
        .map(|ex| {
            let r = ex.labels.len();
            let top = &rank_codes(&ex.confidences)[..r.min(set.code_count)];
            ex.labels.iter().filter(|l| top.contains(l)).count() as f64 / r as f64
        })
        .sum();
    Ok(total / set.len() as f64)
}

pub fn average_precision(confidences: &[f64], labels: &[usize]) -> f64 {
    let ranking = rank_codes(confidences);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, code) in ranking.iter().enumerate() {
        if labels.contains(code) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if labels.is_empty() {
        0.0
    } else {
        sum / labels.len() as f64
    }
}

pub fn mean_average_precision(set: &PredictionSet) -> Result<f64, MetricsError> {
    check_labels(set)?;
    let total: f64 = set
        .examples
        .iter()
        .map(|ex| average_precision(&ex.confidences, &ex.labels))
        .sum();
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSearch {
    /// `k / steps` for `k = 1..steps`.
    Grid { steps: u32 },
    /// Midpoints between consecutive distinct confidences.
    Exact,
}

impl Default for ThresholdSearch {
    fn default() -> Self {
        ThresholdSearch::Grid { steps: 100 }
    }
}

fn micro_f1_at(set: &PredictionSet, threshold: f64) -> f64 {
    f1_scores(set, threshold, ZeroSupport::Exclude).micro
}

/// Threshold maximizing micro F1; ties go to the lower threshold.
pub fn tune_threshold(set: &PredictionSet, search: ThresholdSearch) -> Result<f64, MetricsError> {
    if set.is_empty() {
        return Err(MetricsError::EmptyPredictionSet);
    }
    match search {
        ThresholdSearch::Grid { steps } => {
            if steps < 2 {
                return Err(MetricsError::InvalidArgument("grid needs at least 2 steps".into()));
            }
            let mut best = (f64::NEG_INFINITY, 0.0);
            for k in 1..steps {
                let t = k as f64 / steps as f64;
                let f = micro_f1_at(set, t);
                if f > best.0 {
                    best = (f, t);
                }
            }
            Ok(best.1)
        }
        ThresholdSearch::Exact => Ok(exact_threshold(set)),
    }
}

/// Sweeps every cut between distinct confidences in one pass.
fn exact_threshold(set: &PredictionSet) -> f64 {
    let mut scored: Vec<(f64, bool)> = set
        .examples
        .iter()
        .flat_map(|ex| ex.confidences.iter().enumerate().map(move |(c, &s)| (s, ex.has_label(c))))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = scored.iter().filter(|p| p.1).count();
    let f1 = |tp: usize, predicted: usize| {
        let denom = predicted + positives;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    // candidate cuts from high to low thresholds; keep the lowest on ties
    let mut best = (f1(0, 0), (scored[0].0 + 1.0) / 2.0);
    let (mut tp, mut i) = (0usize, 0usize);
    while i < scored.len() {
        let value = scored[i].0;
        while i < scored.len() && scored[i].0 == value {
            tp += scored[i].1 as usize;
            i += 1;
        }
        let lower = if i < scored.len() { scored[i].0 } else { 0.0 };
        let cut = (value + lower) / 2.0;
        let f = f1(tp, i);
        if f >= best.0 {
            best = (f, cut);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRow {
    pub code: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when the code has no labels and no predictions.
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub exact_match_ratio: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_15: f64,
    pub precision_at_recall: f64,
    pub map: f64,
    pub tuned_threshold: f64,
    pub zero_support: ZeroSupport,
    pub per_code: Vec<CodeRow>,
}

pub fn evaluate(
    set: &PredictionSet,
    labels: &LabelSpace,
    threshold: f64,
    zero: ZeroSupport,
) -> Result<EvalReport, MetricsError> {
    if labels.len() != set.code_count {
        return Err(MetricsError::InvalidArgument("label space does not match prediction set".into()));
    }
    let counts = per_code_confusion(set, threshold);
    let f1 = f1_from_confusion(&counts, zero);
    let per_code = counts
        .iter()
        .enumerate()
        .map(|(c, k)| CodeRow {
            code: labels.code(c).to_string(),
            support: k.support(),
            tp: k.tp,
            fp: k.fp,
            fn_: k.fn_,
            f1: (!k.is_empty()).then(|| k.f1()),
        })
        .collect();
    Ok(EvalReport {
        examples: set.len(),
        f1_micro: f1.micro,
        f1_macro: f1.macro_,
        exact_match_ratio: exact_match_ratio(set, threshold),
        recall_at_5: recall_at_k(set, 5),
        recall_at_10: recall_at_k(set, 10),
        recall_at_15: recall_at_k(set, 15),
        precision_at_recall: precision_at_recall(set)?,
        map: mean_average_precision(set)?,
        tuned_threshold: threshold,
        zero_support: zero,
        per_code,
    })
}

/// Writes `code,support,tp,fp,fn,f1,secondary_share`. `secondary_share` is
/// looked up per code; missing values are left empty.
pub fn write_per_code_csv<W: Write>(
    report: &EvalReport,
    secondary_share: impl Fn(&str) -> Option<f64>,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["code", "support", "tp", "fp", "fn", "f1", "secondary_share"])?;
    for row in &report.per_code {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            row.code.clone(),
            row.support.to_string(),
            row.tp.to_string(),
            row.fp.to_string(),
            row.fn_.to_string(),
            opt(row.f1),
            opt(secondary_share(&row.code)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub boundary: f64,
    /// Flagged gold positives over gold positives.
    pub detection_rate: f64,
    pub gold_positives: usize,
    pub flagged: usize,
    /// Flagged cases with no recorded code in the range.
    pub flagged_uncoded: usize,
    /// Gold-positive share among all flagged cases.
    pub precision: f64,
    /// Gold-positive share among flagged uncoded cases.
    pub uncoded_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub range: String,
    pub points: Vec<CalibrationPoint>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Detection of a code (or code range) against gold labels as the decision
/// boundary moves. A case is flagged when its highest confidence among the
/// range's codes reaches the boundary.
pub fn calibrate_per_code(
    set: &PredictionSet,
    labels: &LabelSpace,
    range: &CodeRange,
    boundaries: &[f64],
) -> Result<CalibrationCurve, MetricsError> {
    let codes = labels.indices_in_range(range);
    if codes.is_empty() {
        return Err(MetricsError::UnknownCode(range.to_string()));
    }
    let cases: Vec<(f64, bool, bool)> = set
        .examples
        .iter()
        .map(|ex| {
            let gold = ex.gold.as_ref().ok_or(MetricsError::MissingGold)?;
            let conf = codes.iter().map(|&c| ex.confidences[c]).fold(f64::NEG_INFINITY, f64::max);
            let in_gold = codes.iter().any(|c| gold.contains(c));
            let recorded = codes.iter().any(|&c| ex.has_label(c));
            Ok((conf, in_gold, recorded))
        })
        .collect::<Result<_, MetricsError>>()?;
    let gold_positives = cases.iter().filter(|c| c.1).count();
    let points = boundaries
        .iter()
        .map(|&b| {
            let flagged: Vec<&(f64, bool, bool)> = cases.iter().filter(|c| c.0 >= b).collect();
            let detected = flagged.iter().filter(|c| c.1).count();
            let uncoded: Vec<_> = flagged.iter().filter(|c| !c.2).collect();
            let uncoded_gold = uncoded.iter().filter(|c| c.1).count();
            CalibrationPoint {
                boundary: b,
                detection_rate: ratio(detected, gold_positives),
                gold_positives,
                flagged: flagged.len(),
                flagged_uncoded: uncoded.len(),
                precision: ratio(detected, flagged.len()),
                uncoded_precision: ratio(uncoded_gold, uncoded.len()),
            }
        })
        .collect();
    Ok(CalibrationCurve {
        range: range.to_string(),
        points,
    })
}
