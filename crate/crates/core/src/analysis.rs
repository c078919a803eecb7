//! Per-group breakdowns, code profiles, role-split recall, disagreement
//! mining, scaling curves and reviewer adjudication summaries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{Code, CodeRange, LabelSpace};
use crate::corpusgen::PatientCourse;
use crate::explain::{attingrad, top_features, AttributionMap, TokenScore};
use crate::metrics::{per_code_confusion, rank_codes, EvalReport, PredictionSet};
use crate::model::{CodingModel, ModelError};
use crate::rng::{purpose, stream_rng};
use crate::trainer::LabeledDocument;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown code or empty range: {0}")]
    UnknownCode(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{expected} group keys required, got {found}")]
    GroupMismatch { expected: usize, found: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("adjudication log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn micro_f1(set: &PredictionSet, rows: &[usize], threshold: f64) -> f64 {
    let (mut tp, mut wrong) = (0usize, 0usize);
    for &i in rows {
        let ex = &set.examples[i];
        for (c, &s) in ex.confidences.iter().enumerate() {
            match (s >= threshold, ex.labels.contains(&c)) {
                (true, true) => tp += 1,
                (true, false) | (false, true) => wrong += 1,
                _ => {}
            }
        }
    }
    if 2 * tp + wrong == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + wrong) as f64
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepartmentF1 {
    pub department: String,
    pub examples: usize,
    pub f1_micro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialtyF1 {
    pub specialty: String,
    pub median_f1: f64,
    pub departments: Vec<DepartmentF1>,
}

pub const DEFAULT_MIN_DEPARTMENT_SIZE: usize = 100;

/// Micro F1 per department, then the median across each specialty's
/// departments. Departments with fewer than `min_n` examples are left out.
/// `groups[i]` is `(specialty, department)` of example `i`.
pub fn per_group_f1(
    set: &PredictionSet,
    groups: &[(String, String)],
    threshold: f64,
    min_n: usize,
) -> Result<Vec<SpecialtyF1>, AnalysisError> {
    if groups.len() != set.len() {
        return Err(AnalysisError::GroupMismatch {
            expected: set.len(),
            found: groups.len(),
        });
    }
    let mut by_dept: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, (spec, dept)) in groups.iter().enumerate() {
        by_dept.entry((spec, dept)).or_default().push(i);
    }
    let mut by_specialty: BTreeMap<&str, Vec<DepartmentF1>> = BTreeMap::new();
    for ((spec, dept), rows) in by_dept {
        if rows.len() < min_n {
            continue;
        }
        by_specialty.entry(spec).or_default().push(DepartmentF1 {
            department: dept.to_string(),
            examples: rows.len(),
            f1_micro: micro_f1(set, &rows, threshold),
        });
    }
    Ok(by_specialty
        .into_iter()
        .map(|(spec, departments)| {
            let mut values: Vec<f64> = departments.iter().map(|d| d.f1_micro).collect();
            SpecialtyF1 {
                specialty: spec.to_string(),
                median_f1: median(&mut values).expect("non-empty"),
                departments,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeOccurrence {
    pub count: usize,
    pub secondary: usize,
}

impl CodeOccurrence {
    pub fn secondary_share(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.secondary as f64 / self.count as f64
        }
    }
}

/// Recorded-code occurrence counts; a code is secondary when it is not
/// first in the patient's list.
pub fn code_occurrences(corpus: &[PatientCourse]) -> BTreeMap<Code, CodeOccurrence> {
    let mut out: BTreeMap<Code, CodeOccurrence> = BTreeMap::new();
    for p in corpus {
        for (pos, code) in p.recorded_codes.iter().enumerate() {
            if p.recorded_codes[..pos].contains(code) {
                continue;
            }
            let entry = out.entry(code.clone()).or_insert(CodeOccurrence { count: 0, secondary: 0 });
            entry.count += 1;
            entry.secondary += (pos > 0) as usize;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeProfile {
    pub code: Code,
    pub train_frequency: usize,
    pub secondary_share: f64,
    pub f1: f64,
    pub never_predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeProfiles {
    pub profiles: Vec<CodeProfile>,
    pub never_predicted_fraction: f64,
}

/// Joins training frequencies with test-set per-code results. A code is
/// never predicted when it has no positive prediction in the report.
pub fn code_profiles(train: &[PatientCourse], report: &EvalReport) -> Result<CodeProfiles, AnalysisError> {
    let occurrences = code_occurrences(train);
    let profiles = report
        .per_code
        .iter()
        .map(|row| {
            let code = Code::parse(&row.code).map_err(|_| AnalysisError::UnknownCode(row.code.clone()))?;
            let occ = occurrences.get(&code).copied().unwrap_or(CodeOccurrence { count: 0, secondary: 0 });
            Ok(CodeProfile {
                code,
                train_frequency: occ.count,
                secondary_share: occ.secondary_share(),
                f1: row.f1.unwrap_or(0.0),
                never_predicted: row.tp + row.fp == 0,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let never = profiles.iter().filter(|p| p.never_predicted).count();
    let never_predicted_fraction = if profiles.is_empty() {
        0.0
    } else {
        never as f64 / profiles.len() as f64
    };
    Ok(CodeProfiles {
        profiles,
        never_predicted_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleRecall {
    pub k: usize,
    /// `None` when there are no pairs of that role.
    pub primary: Option<f64>,
    pub secondary: Option<f64>,
    pub primary_pairs: usize,
    pub secondary_pairs: usize,
}

/// Recall@K pooled separately over primary and secondary label pairs.
pub fn recall_by_role(set: &PredictionSet, k: usize) -> RoleRecall {
    let (mut ph, mut pt, mut sh, mut st) = (0usize, 0usize, 0usize, 0usize);
    for ex in &set.examples {
        let top = &rank_codes(&ex.confidences)[..k.min(set.code_count)];
        for &label in &ex.labels {
            let hit = top.contains(&label) as usize;
            if Some(label) == ex.primary {
                ph += hit;
                pt += 1;
            } else {
                sh += hit;
                st += 1;
            }
        }
    }
    let rate = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    RoleRecall {
        k,
        primary: rate(ph, pt),
        secondary: rate(sh, st),
        primary_pairs: pt,
        secondary_pairs: st,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementCase {
    pub patient_id: String,
    pub code: Code,
    pub confidence: f64,
    pub in_recorded: bool,
    pub in_gold: Option<bool>,
    pub top_attributions: Vec<TokenScore>,
}

/// Cases where the model is confident about a code in `range` that the
/// recorded codes lack. The reported code is the range code with the
/// highest confidence. Sorted by confidence descending, then input order.
pub fn mine_disagreements(
    set: &PredictionSet,
    ids: &[String],
    labels: &LabelSpace,
    range: &CodeRange,
    boundary: f64,
) -> Result<Vec<DisagreementCase>, AnalysisError> {
    if !(boundary > 0.0 && boundary < 1.0) {
        return Err(AnalysisError::InvalidArgument(format!("boundary {boundary} outside (0, 1)")));
    }
    if ids.len() != set.len() {
        return Err(AnalysisError::GroupMismatch {
            expected: set.len(),
            found: ids.len(),
        });
    }
    let codes = labels.indices_in_range(range);
    if codes.is_empty() {
        return Err(AnalysisError::UnknownCode(range.to_string()));
    }
    let mut cases = Vec::new();
    for (ex, id) in set.examples.iter().zip(ids) {
        if codes.iter().any(|c| ex.labels.contains(c)) {
            continue;
        }
        let best = codes
            .iter()
            .copied()
            .max_by(|&a, &b| ex.confidences[a].total_cmp(&ex.confidences[b]).then(b.cmp(&a)))
            .expect("non-empty");
        let confidence = ex.confidences[best];
        if confidence >= boundary {
            cases.push(DisagreementCase {
                patient_id: id.clone(),
                code: labels.code(best).clone(),
                confidence,
                in_recorded: false,
                in_gold: ex.gold.as_ref().map(|g| codes.iter().any(|c| g.contains(c))),
                top_attributions: Vec::new(),
            });
        }
    }
    cases.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(cases)
}

/// Fills each case's five strongest attribution tokens.
pub fn attach_attributions(
    cases: &mut [DisagreementCase],
    model: &CodingModel,
    docs: &[LabeledDocument],
    labels: &LabelSpace,
) -> Result<(), AnalysisError> {
    let by_id: HashMap<&str, &LabeledDocument> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    for case in cases.iter_mut() {
        let doc = by_id
            .get(case.patient_id.as_str())
            .ok_or_else(|| AnalysisError::InvalidArgument(format!("no document for {}", case.patient_id)))?;
        let idx = labels
            .index_of(&case.code)
            .ok_or_else(|| AnalysisError::UnknownCode(case.code.to_string()))?;
        let attr = attingrad(model, &doc.doc, idx)?;
        let map = AttributionMap::new(&attr, &doc.doc, &doc.text, labels);
        case.top_attributions = top_features(&map, 5);
    }
    Ok(())
}

/// `n` cases drawn without replacement, kept in their listed order.
pub fn sample_cases(cases: &[DisagreementCase], n: usize, seed: u64) -> Vec<DisagreementCase> {
    if n >= cases.len() {
        return cases.to_vec();
    }
    let mut picked = sample(&mut stream_rng(seed, purpose::SAMPLE_CASES), cases.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cases[i].clone()).collect()
}

/// Share of cases whose code is present in the gold labels.
pub fn gold_precision(cases: &[DisagreementCase]) -> Option<f64> {
    let judged: Vec<bool> = cases.iter().filter_map(|c| c.in_gold).collect();
    (!judged.is_empty()).then(|| judged.iter().filter(|&&g| g).count() as f64 / judged.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub train_size: usize,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub exact_match_ratio: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_15: f64,
    pub precision_at_recall: f64,
    pub map: f64,
}

impl ScalingRow {
    fn metrics(&self) -> [(&'static str, f64); 8] {
        [
            ("f1_micro", self.f1_micro),
            ("f1_macro", self.f1_macro),
            ("exact_match_ratio", self.exact_match_ratio),
            ("recall_at_5", self.recall_at_5),
            ("recall_at_10", self.recall_at_10),
            ("recall_at_15", self.recall_at_15),
            ("precision_at_recall", self.precision_at_recall),
            ("map", self.map),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFlag {
    pub metric: String,
    pub from_size: usize,
    pub to_size: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub epsilon: f64,
    pub rows: Vec<ScalingRow>,
    /// Metric drops larger than `epsilon` between consecutive sizes.
    pub decreases: Vec<ScalingFlag>,
}

impl ScalingCurve {
    pub fn is_monotone(&self, metric: &str) -> bool {
        !self.decreases.iter().any(|f| f.metric == metric)
    }

    /// `train_size,metric,value` rows for plotting.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["train_size", "metric", "value"])?;
        for row in &self.rows {
            for (name, value) in row.metrics() {
                w.write_record([row.train_size.to_string(), name.to_string(), value.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn scaling_curve(entries: &[(usize, EvalReport)], epsilon: f64) -> ScalingCurve {
    let mut sorted: Vec<&(usize, EvalReport)> = entries.iter().collect();
    sorted.sort_by_key(|e| e.0);
    let rows: Vec<ScalingRow> = sorted
        .iter()
        .map(|(size, r)| ScalingRow {
            train_size: *size,
            f1_micro: r.f1_micro,
            f1_macro: r.f1_macro,
            exact_match_ratio: r.exact_match_ratio,
            recall_at_5: r.recall_at_5,
            recall_at_10: r.recall_at_10,
            recall_at_15: r.recall_at_15,
            precision_at_recall: r.precision_at_recall,
            map: r.map,
        })
        .collect();
    let mut decreases = Vec::new();
    for pair in rows.windows(2) {
        for ((name, a), (_, b)) in pair[0].metrics().into_iter().zip(pair[1].metrics()) {
            if b < a - epsilon {
                decreases.push(ScalingFlag {
                    metric: name.into(),
                    from_size: pair[0].train_size,
                    to_size: pair[1].train_size,
                    delta: b - a,
                });
            }
        }
    }
    ScalingCurve {
        epsilon,
        rows,
        decreases,
    }
}

/// Codes whose confidence reaches the threshold in at least one example.
pub fn predicted_code_count(set: &PredictionSet, threshold: f64) -> usize {
    per_code_confusion(set, threshold)
        .iter()
        .filter(|c| c.tp + c.fp > 0)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adjudication {
    pub patient_id: String,
    pub code: Code,
    pub decision: Decision,
    pub reviewer: String,
    pub timestamp: String,
    pub confidence: Option<f64>,
}

pub fn read_adjudications(path: impl AsRef<Path>) -> Result<Vec<Adjudication>, AnalysisError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnalysisError::Log {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// The last decision per (patient, code, reviewer), in first-seen order.
pub fn latest_decisions(log: &[Adjudication]) -> Vec<&Adjudication> {
    let mut slot: HashMap<(&str, &Code, &str), usize> = HashMap::new();
    let mut out: Vec<&Adjudication> = Vec::new();
    for a in log {
        let key = (a.patient_id.as_str(), &a.code, a.reviewer.as_str());
        match slot.get(&key) {
            Some(&i) => out[i] = a,
            None => {
                slot.insert(key, out.len());
                out.push(a);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub accepted: usize,
    pub rejected: usize,
    pub added: usize,
}

impl DecisionCounts {
    /// Accepted over accepted plus rejected.
    pub fn precision(&self) -> Option<f64> {
        let judged = self.accepted + self.rejected;
        (judged > 0).then(|| self.accepted as f64 / judged as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedPrecision {
    pub rows: usize,
    pub decisions: usize,
    pub overall: DecisionCounts,
    pub precision: Option<f64>,
    pub per_code: BTreeMap<Code, DecisionCounts>,
}

/// Reviewer-validated precision of model suggestions from a decision log.
pub fn validated_precision(log: &[Adjudication]) -> ValidatedPrecision {
    let latest = latest_decisions(log);
    let mut overall = DecisionCounts::default();
    let mut per_code: BTreeMap<Code, DecisionCounts> = BTreeMap::new();
    for a in &latest {
        let entry = per_code.entry(a.code.clone()).or_default();
        for counts in [&mut overall, entry] {
            match a.decision {
                Decision::Accept => counts.accepted += 1,
                Decision::Reject => counts.rejected += 1,
                Decision::Add => counts.added += 1,
            }
        }
    }
    ValidatedPrecision {
        rows: log.len(),
        decisions: latest.len(),
        precision: overall.precision(),
        overall,
        per_code,
    }
}
