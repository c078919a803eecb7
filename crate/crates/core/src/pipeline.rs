//! Preprocessing: document assembly, the seven record filters, and
//! patient-level splits.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{Code, CodeSystem};
use crate::corpusgen::{PatientCourse, Split};
use crate::rng::{purpose, stream_rng};

/// Placed between the notes, medications and labs sections.
pub const SECTION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("split would leave the {0} partition empty")]
    DegenerateSplit(&'static str),
    #[error("subsample size {size} exceeds training corpus of {available}")]
    SizeExceedsCorpus { size: usize, available: usize },
    #[error("subsample sizes must be ascending")]
    SizesNotAscending,
}

/// A patient course flattened to one string plus its label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub char_count: usize,
    /// Deduplicated recorded codes; the first is the primary diagnosis.
    pub labels: Vec<Code>,
}

impl Document {
    pub fn primary(&self) -> Option<&Code> {
        self.labels.first()
    }
}

/// Joins the non-empty sections with [`SECTION_SEPARATOR`].
pub fn assemble_document(p: &PatientCourse) -> Document {
    let text = [&p.notes_text, &p.medications_text, &p.labs_text]
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(SECTION_SEPARATOR);
    Document {
        id: p.id.clone(),
        char_count: text.chars().count(),
        text,
        labels: dedup_codes(&p.recorded_codes),
    }
}

pub(crate) fn dedup_codes(codes: &[Code]) -> Vec<Code> {
    let mut seen = HashSet::new();
    codes.iter().filter(|c| seen.insert(*c)).cloned().collect()
}

/// Which corpus the stage-4 category counts are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountBasis {
    /// Survivors of stages 1–3 (the corpus entering stage 4).
    StageInput,
    /// The unfiltered input corpus.
    FullInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub require_codes: bool,
    pub require_discharge_summary: bool,
    /// Text the notes must contain to count as a discharge summary; `None`
    /// accepts any non-empty notes.
    pub discharge_marker: Option<String>,
    pub drop_z_only: bool,
    pub min_category_count: usize,
    pub category_count_basis: CountBasis,
    pub max_chars: usize,
    pub excluded_specialties: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            require_codes: true,
            require_discharge_summary: true,
            discharge_marker: None,
            drop_z_only: true,
            min_category_count: 10,
            category_count_basis: CountBasis::StageInput,
            max_chars: 10_000,
            excluded_specialties: vec!["psychiatry".to_string()],
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.min_category_count < 1 {
            return Err(PipelineError::InvalidConfig("min_category_count must be >= 1".into()));
        }
        if self.max_chars < 1 {
            return Err(PipelineError::InvalidConfig("max_chars must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    MissingCodes,
    MissingDischargeSummary,
    AdministrativeOnly,
    RareCategory,
    InvalidCodes,
    TooLong,
    ExcludedSpecialty,
}

impl FilterStage {
    pub const ALL: [FilterStage; 7] = [
        FilterStage::MissingCodes,
        FilterStage::MissingDischargeSummary,
        FilterStage::AdministrativeOnly,
        FilterStage::RareCategory,
        FilterStage::InvalidCodes,
        FilterStage::TooLong,
        FilterStage::ExcludedSpecialty,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: usize,
    pub name: FilterStage,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub stages: Vec<StageCount>,
    pub survivors: usize,
    /// Individual codes removed at stage 5 from cases that survived.
    pub invalid_codes_dropped: usize,
    pub category_count_basis: CountBasis,
    /// Stage-4 counts are recomputed on every run, so re-filtering a
    /// filtered corpus can remove further cases at that stage.
    pub category_counts_recomputed: bool,
    pub rare_categories: Vec<Code>,
    pub stage5_applied: bool,
}

impl FilterReport {
    pub fn removed_at(&self, stage: FilterStage) -> usize {
        self.stages.iter().find(|s| s.name == stage).map_or(0, |s| s.removed)
    }

    pub fn total_removed(&self) -> usize {
        self.stages.iter().map(|s| s.removed).sum()
    }
}

fn category_counts(corpus: &[PatientCourse]) -> BTreeMap<Code, usize> {
    let mut counts = BTreeMap::new();
    for p in corpus {
        let cats: HashSet<Code> = p.recorded_codes.iter().map(Code::category).collect();
        for c in cats {
            *counts.entry(c).or_default() += 1;
        }
    }
    counts
}

/// Applies the filters in fixed order. Stage 5 runs only when a code system
/// is supplied.
pub fn apply_filters(
    corpus: Vec<PatientCourse>,
    cfg: &FilterConfig,
    code_validity: Option<&CodeSystem>,
) -> Result<(Vec<PatientCourse>, FilterReport), PipelineError> {
    cfg.validate()?;
    let input = corpus.len();
    let full_counts = match cfg.category_count_basis {
        CountBasis::FullInput => Some(category_counts(&corpus)),
        CountBasis::StageInput => None,
    };
    let mut stages = Vec::with_capacity(7);
    let mut current = corpus;
    let mut record = |stage: FilterStage, before: usize, after: usize| {
        stages.push(StageCount {
            stage: stages.len() + 1,
            name: stage,
            removed: before - after,
        });
    };

    let before = current.len();
    if cfg.require_codes {
        current.retain(|p| !p.recorded_codes.is_empty());
    }
    record(FilterStage::MissingCodes, before, current.len());

    let before = current.len();
    if cfg.require_discharge_summary {
        current.retain(|p| {
            !p.notes_text.trim().is_empty()
                && cfg.discharge_marker.as_deref().is_none_or(|m| p.notes_text.contains(m))
        });
    }
    record(FilterStage::MissingDischargeSummary, before, current.len());

    let before = current.len();
    if cfg.drop_z_only {
        current.retain(|p| !p.recorded_codes.iter().all(Code::is_administrative));
    }
    record(FilterStage::AdministrativeOnly, before, current.len());

    let counts = full_counts.unwrap_or_else(|| category_counts(&current));
    let rare: HashSet<Code> = counts
        .iter()
        .filter(|(_, &n)| n < cfg.min_category_count)
        .map(|(c, _)| c.clone())
        .collect();
    let before = current.len();
    current.retain(|p| !p.recorded_codes.iter().any(|c| rare.contains(&c.category())));
    record(FilterStage::RareCategory, before, current.len());

    let before = current.len();
    let mut invalid_codes_dropped = 0;
    if let Some(cs) = code_validity {
        current.retain_mut(|p| {
            let n = p.recorded_codes.len();
            p.recorded_codes.retain(|c| cs.contains(c));
            p.gold_codes.retain(|c| cs.contains(c));
            if p.recorded_codes.is_empty() {
                return false;
            }
            invalid_codes_dropped += n - p.recorded_codes.len();
            true
        });
    }
    record(FilterStage::InvalidCodes, before, current.len());

    let before = current.len();
    current.retain(|p| assemble_document(p).char_count <= cfg.max_chars);
    record(FilterStage::TooLong, before, current.len());

    let before = current.len();
    current.retain(|p| !cfg.excluded_specialties.iter().any(|s| s == &p.specialty));
    record(FilterStage::ExcludedSpecialty, before, current.len());

    let mut rare_categories: Vec<Code> = rare.into_iter().collect();
    rare_categories.sort();
    let report = FilterReport {
        input,
        survivors: current.len(),
        stages,
        invalid_codes_dropped,
        category_count_basis: cfg.category_count_basis,
        category_counts_recomputed: true,
        rare_categories,
        stage5_applied: code_validity.is_some(),
    };
    Ok((current, report))
}

fn partition_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<[usize; 3], PipelineError> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(PipelineError::InvalidFractions(fractions));
    }
    let train = ((a * n as f64).round() as usize).min(n);
    let val = ((b * n as f64).round() as usize).min(n - train);
    let test = n - train - val;
    for (size, name) in [(train, "train"), (val, "validation"), (test, "test")] {
        if size == 0 {
            return Err(PipelineError::DegenerateSplit(name));
        }
    }
    Ok([train, val, test])
}

/// Patient-level partition into train / validation / test. Each output
/// keeps the input's relative order and has its `split` field set.
pub fn split_corpus(
    corpus: Vec<PatientCourse>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<[Vec<PatientCourse>; 3], PipelineError> {
    let sizes = partition_sizes(corpus.len(), fractions)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream_rng(seed, purpose::SPLIT));
    let mut assignment = vec![Split::Unassigned; corpus.len()];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
    }
    let mut parts: [Vec<PatientCourse>; 3] = Default::default();
    for (mut patient, split) in corpus.into_iter().zip(assignment) {
        patient.split = split;
        let slot = match split {
            Split::Train => 0,
            Split::Validation => 1,
            _ => 2,
        };
        parts[slot].push(patient);
    }
    Ok(parts)
}

/// Nested training subsets: every smaller subset is contained in every
/// larger one, so scaling curves compare like with like.
pub fn subsample_training(
    train: &[PatientCourse],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<PatientCourse>>, PipelineError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(PipelineError::SizesNotAscending);
    }
    if let Some(&size) = sizes.iter().find(|&&s| s > train.len()) {
        return Err(PipelineError::SizeExceedsCorpus {
            size,
            available: train.len(),
        });
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(seed, purpose::SUBSAMPLE));
    Ok(sizes
        .iter()
        .map(|&size| {
            let mut chosen = order[..size].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| train[i].clone()).collect()
        })
        .collect())
}
