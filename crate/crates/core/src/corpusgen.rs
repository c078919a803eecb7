//! Synthetic patient courses with known ground-truth codes.
//!
//! Each patient gets one primary condition and a random set of secondary
//! conditions. Notes are rendered from evidence phrases and condition-neutral
//! filler, medications and labs from the condition profiles. `gold_codes` is
//! the truth by construction; `recorded_codes` is what a human coder wrote
//! down and starts out equal to gold until [`inject_undercoding`] removes
//! secondary codes.
//!
//! # Sampling model
//!
//! With prevalence `p_i` and secondary share `s_i`, the primary condition is
//! drawn with probability `pi_i = p_i (1 - s_i) / S` where
//! `S = sum_j p_j (1 - s_j)`, and every other condition is added as a
//! secondary diagnosis independently with probability
//! `q_i = p_i s_i / (1 - pi_i)`. When `S = 1` the marginal presence of each
//! code is exactly `p_i` and its secondary share exactly `s_i`;
//! [`expected_frequencies`] gives the exact values for any profile set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::Code;
use crate::rng::{purpose, stream_rng};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("profile set is empty")]
    EmptyProfileSet,
    #[error("invalid profile {code}: {reason}")]
    InvalidProfile { code: String, reason: String },
    #[error("no profile can be a primary diagnosis (all secondary_share = 1 or prevalence 0)")]
    NoPrimaryCandidate,
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("under-coding policy references code {0} absent from the corpus")]
    PolicyReferencesUnknownCode(String),
    #[error("patient {0}: recorded codes already differ from gold codes")]
    AlreadyInjected(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("schema violation on line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabPattern {
    pub test_name: String,
    pub low: f64,
    pub high: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionProfile {
    pub code: Code,
    pub evidence_phrases: Vec<String>,
    #[serde(default)]
    pub medication_names: Vec<String>,
    #[serde(default)]
    pub lab_patterns: Vec<LabPattern>,
    pub base_prevalence: f64,
    pub secondary_share: f64,
    pub specialties: Vec<String>,
}

impl ConditionProfile {
    fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: &str| {
            Err(CorpusError::InvalidProfile {
                code: self.code.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.code.level() != 3 {
            return fail("profile codes must be level-3 categories");
        }
        if self.evidence_phrases.is_empty() || self.evidence_phrases.iter().any(|p| p.trim().is_empty()) {
            return fail("evidence_phrases must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.base_prevalence) || !(0.0..=1.0).contains(&self.secondary_share) {
            return fail("probabilities must lie in [0, 1]");
        }
        if self.specialties.is_empty() {
            return fail("at least one specialty is required");
        }
        if self.lab_patterns.iter().any(|l| !(l.low <= l.high)) {
            return fail("lab value range must satisfy low <= high");
        }
        Ok(())
    }
}

/// A profile set as stored on disk: one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub profiles: Vec<ConditionProfile>,
}

impl ProfileSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::SchemaViolation {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).expect("profiles serialize");
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

/// One patient's concatenated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientCourse {
    pub id: String,
    pub specialty: String,
    pub notes_text: String,
    pub medications_text: String,
    pub labs_text: String,
    pub gold_codes: Vec<Code>,
    pub recorded_codes: Vec<Code>,
    pub split: Split,
}

impl PatientCourse {
    /// Synthetic site prefix of the id (`S3-000042` → `S3`).
    pub fn site(&self) -> &str {
        self.id.split_once('-').map(|(site, _)| site).unwrap_or("")
    }

    /// Department key: specialty at a given site.
    pub fn department(&self) -> String {
        format!("{}@{}", self.specialty, self.site())
    }
}

/// How many conditions a patient carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multimorbidity {
    /// One primary plus independent secondaries (see module docs); honours
    /// configured prevalences and secondary shares.
    Independent,
    /// Draw the total number of conditions `k` from these weights over
    /// `1..=len` (at most 8), then fill `k - 1` secondary slots without
    /// replacement, weighted by `p_i s_i`. Prevalences become relative weights.
    Counts(Vec<f64>),
}

impl Multimorbidity {
    /// Counts-mode distribution with median two conditions per patient.
    pub fn default_counts() -> Self {
        Multimorbidity::Counts(vec![0.30, 0.30, 0.18, 0.10, 0.06, 0.03, 0.02, 0.01])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub multimorbidity: Multimorbidity,
    pub seed: u64,
    /// Target total document length (notes + medications + labs), characters.
    pub min_chars: usize,
    pub max_chars: usize,
    /// Fraction of condition occurrences documented only through a medication.
    pub indirect_fraction: f64,
    /// Chance a directly documented condition also lists a medication.
    pub medication_rate: f64,
    /// Chance a present condition with lab patterns contributes a lab line.
    pub lab_rate: f64,
    pub n_sites: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            multimorbidity: Multimorbidity::Independent,
            seed: 0,
            min_chars: 500,
            max_chars: 12_000,
            indirect_fraction: 0.0,
            medication_rate: 0.6,
            lab_rate: 0.5,
            n_sites: 4,
        }
    }
}

const EVIDENCE_TEMPLATES: &[&str] = &[
    "The patient has known {}.",
    "Findings are consistent with {}.",
    "History of {} was noted.",
    "Assessment documented {}.",
    "Admitted with {}.",
    "Ongoing management of {}.",
    "Clinical picture of {}.",
];

/// Sentences that carry no diagnostic information.
pub const FILLER_SENTENCES: &[&str] = &[
    "The patient was seen on the morning ward round.",
    "Vital signs were recorded every four hours.",
    "Relatives were informed about the plan.",
    "The patient slept well overnight.",
    "Mobilised with assistance from the physiotherapist.",
    "Eating and drinking without problems.",
    "No allergies are registered in the record.",
    "Lives at home with a partner and is independent.",
    "Follow up in the outpatient clinic is arranged.",
    "The general practitioner will receive a copy of this letter.",
    "Observation continued without new concerns.",
    "The nursing staff reported a quiet shift.",
    "Peripheral venous catheter was removed before leaving.",
    "Informed consent was obtained and documented.",
    "Transport home was organised by the department.",
    "The patient expressed satisfaction with the care received.",
    "Discussed at the multidisciplinary conference.",
    "A social worker assessed the home situation.",
    "The team reviewed the medication list together with the patient.",
    "Temperature remained within normal limits.",
    "Written information was handed out in the native language.",
    "The interpreter attended the conversation by telephone.",
    "Bed rest was not required during the stay.",
    "Appointment letters will be sent by post.",
    "The patient asked questions which were answered.",
    "No changes were made after the evening review.",
    "Fluid balance was monitored and found acceptable.",
    "The stay was otherwise uneventful.",
    "Contact details for the ward were provided.",
    "The attending consultant agreed with the plan.",
];

const DOSES: &[u32] = &[5, 10, 20, 40, 100, 250, 500];

fn profile(
    code: &str,
    primary_weight: f64,
    secondary_share: f64,
    phrases: &[&str],
    meds: &[&str],
    labs: &[(&str, f64, f64, &str)],
    specialties: &[&str],
) -> ConditionProfile {
    // prevalence chosen so this condition is primary with `primary_weight`
    let base_prevalence = if secondary_share < 1.0 {
        primary_weight / (1.0 - secondary_share)
    } else {
        primary_weight
    };
    ConditionProfile {
        code: Code::parse(code).expect("builtin code"),
        evidence_phrases: phrases.iter().map(|s| s.to_string()).collect(),
        medication_names: meds.iter().map(|s| s.to_string()).collect(),
        lab_patterns: labs
            .iter()
            .map(|&(t, lo, hi, u)| LabPattern {
                test_name: t.to_string(),
                low: lo,
                high: hi,
                unit: u.to_string(),
            })
            .collect(),
        base_prevalence,
        secondary_share,
        specialties: specialties.iter().map(|s| s.to_string()).collect(),
    }
}

/// Twenty conditions covering the case-study codes. Primary weights sum to
/// one, so prevalences and secondary shares are honoured exactly. X60 is
/// secondary-only with prevalence 0.05.
pub fn default_profiles() -> Vec<ConditionProfile> {
    vec![
        profile("I10", 0.02, 0.896, &["essential hypertension", "elevated blood pressure"], &["amlodipine", "ramipril", "losartan"], &[("systolic", 150.0, 190.0, "mmhg")], &["cardiology", "internal medicine"]),
        profile("E66", 0.015, 0.869, &["obesity", "overweight with raised bmi"], &["orlistat", "semaglutide"], &[("bmi", 31.0, 45.0, "kg/m2")], &["endocrinology", "internal medicine"]),
        profile("N18", 0.015, 0.85, &["chronic kidney disease", "reduced renal function"], &["sevelamer"], &[("egfr", 15.0, 55.0, "ml/min")], &["nephrology"]),
        profile("F10", 0.01, 0.85, &["alcohol dependence", "harmful alcohol use"], &["thiamine", "disulfiram"], &[("ggt", 90.0, 400.0, "u/l")], &["internal medicine", "gastroenterology"]),
        profile("D50", 0.01, 0.8, &["iron deficiency anaemia", "microcytic anaemia"], &["ferrous sulfate"], &[("ferritin", 3.0, 12.0, "ug/l")], &["internal medicine", "gastroenterology"]),
        profile("E11", 0.03, 0.7, &["type 2 diabetes", "non insulin dependent diabetes"], &["metformin", "sitagliptin"], &[("hba1c", 55.0, 95.0, "mmol/mol")], &["endocrinology", "internal medicine"]),
        profile("I50", 0.06, 0.6, &["heart failure", "reduced ejection fraction", "cardiac decompensation"], &["furosemide", "spironolactone"], &[("probnp", 900.0, 6000.0, "ng/l")], &["cardiology"]),
        profile("I48", 0.04, 0.65, &["atrial fibrillation", "irregularly irregular rhythm"], &["apixaban", "warfarin", "digoxin"], &[], &["cardiology", "emergency medicine"]),
        profile("I21", 0.09, 0.2, &["acute myocardial infarction", "st elevation on ecg"], &["ticagrelor", "clopidogrel"], &[("troponin", 80.0, 3000.0, "ng/l")], &["cardiology", "emergency medicine"]),
        profile("J44", 0.06, 0.5, &["chronic obstructive pulmonary disease", "copd exacerbation"], &["tiotropium", "salbutamol"], &[], &["pulmonology"]),
        profile("J18", 0.12, 0.3, &["pneumonia", "consolidation on chest radiograph"], &["amoxicillin", "cefuroxime"], &[("crp", 60.0, 300.0, "mg/l")], &["pulmonology", "infectious diseases", "emergency medicine"]),
        profile("N39", 0.06, 0.4, &["urinary tract infection", "cystitis with dysuria"], &["nitrofurantoin", "pivmecillinam"], &[("leukocyturia", 2.0, 3.0, "plus")], &["infectious diseases", "gynecology"]),
        profile("K35", 0.09, 0.05, &["acute appendicitis", "inflamed appendix"], &["metronidazole"], &[], &["surgery", "emergency medicine"]),
        profile("S72", 0.09, 0.1, &["fracture of the femoral neck", "hip fracture"], &["enoxaparin"], &[], &["orthopedics"]),
        profile("C50", 0.08, 0.3, &["breast carcinoma", "mammary tumour"], &["tamoxifen", "letrozole"], &[], &["oncology", "gynecology"]),
        profile("G40", 0.05, 0.5, &["epilepsy", "tonic clonic seizure"], &["levetiracetam", "lamotrigine"], &[], &["neurology", "child and adolescent psychiatry"]),
        profile("J45", 0.04, 0.6, &["asthma", "episodic wheezing"], &["budesonide", "montelukast"], &[], &["pulmonology"]),
        profile("F32", 0.03, 0.7, &["depressive episode", "persistent low mood"], &["sertraline", "mirtazapine"], &[], &["psychiatry", "child and adolescent psychiatry", "internal medicine"]),
        profile("K29", 0.09, 0.5, &["gastritis", "epigastric burning"], &["omeprazole", "pantoprazole"], &[], &["gastroenterology"]),
        profile("X60", 0.05, 1.0, &["suicide attempt", "intentional overdose"], &[], &[("paracetamol", 150.0, 900.0, "mg/l")], &["emergency medicine"]),
    ]
}

/// Exact expected per-code (presence frequency, secondary share) under
/// [`Multimorbidity::Independent`].
pub fn expected_frequencies(profiles: &[ConditionProfile]) -> Vec<(f64, f64)> {
    let weights = primary_weights(profiles);
    let total: f64 = weights.iter().sum();
    profiles
        .iter()
        .zip(&weights)
        .map(|(p, &w)| {
            let pi = if total > 0.0 { w / total } else { 0.0 };
            let q = secondary_probability(p, pi);
            let m = pi + (1.0 - pi) * q;
            let share = if m > 0.0 { (1.0 - pi) * q / m } else { 0.0 };
            (m, share)
        })
        .collect()
}

fn primary_weights(profiles: &[ConditionProfile]) -> Vec<f64> {
    profiles
        .iter()
        .map(|p| p.base_prevalence * (1.0 - p.secondary_share))
        .collect()
}

fn secondary_probability(p: &ConditionProfile, primary_prob: f64) -> f64 {
    if primary_prob >= 1.0 {
        return 0.0;
    }
    (p.base_prevalence * p.secondary_share / (1.0 - primary_prob)).clamp(0.0, 1.0)
}

fn validate_config(profiles: &[ConditionProfile], cfg: &GeneratorConfig) -> Result<(), CorpusError> {
    if profiles.is_empty() {
        return Err(CorpusError::EmptyProfileSet);
    }
    let mut seen = HashSet::new();
    for p in profiles {
        p.validate()?;
        if !seen.insert(p.code.clone()) {
            return Err(CorpusError::InvalidProfile {
                code: p.code.to_string(),
                reason: "duplicate profile code".into(),
            });
        }
    }
    if cfg.n_patients == 0 {
        return Err(CorpusError::InvalidConfig("n_patients must be at least 1".into()));
    }
    if cfg.min_chars > cfg.max_chars {
        return Err(CorpusError::InvalidConfig("min_chars exceeds max_chars".into()));
    }
    if cfg.n_sites == 0 {
        return Err(CorpusError::InvalidConfig("n_sites must be at least 1".into()));
    }
    for (name, v) in [
        ("indirect_fraction", cfg.indirect_fraction),
        ("medication_rate", cfg.medication_rate),
        ("lab_rate", cfg.lab_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CorpusError::InvalidConfig(format!("{name} must lie in [0, 1]")));
        }
    }
    if let Multimorbidity::Counts(w) = &cfg.multimorbidity {
        if w.is_empty() || w.len() > 8 || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CorpusError::InvalidConfig(
                "multimorbidity counts need 1..=8 non-negative weights with positive sum".into(),
            ));
        }
    }
    Ok(())
}

/// Generates `cfg.n_patients` courses. Deterministic in `(profiles, cfg)`;
/// patients are generated in parallel from per-index random streams.
pub fn generate_corpus(
    profiles: &[ConditionProfile],
    cfg: &GeneratorConfig,
) -> Result<Vec<PatientCourse>, CorpusError> {
    validate_config(profiles, cfg)?;
    let weights = primary_weights(profiles);
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(CorpusError::NoPrimaryCandidate);
    }
    let primary_dist = WeightedIndex::new(&weights).map_err(|_| CorpusError::NoPrimaryCandidate)?;
    let primary_probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let count_dist = match &cfg.multimorbidity {
        Multimorbidity::Counts(w) => Some(WeightedIndex::new(w).expect("validated weights")),
        Multimorbidity::Independent => None,
    };

    let corpus = (0..cfg.n_patients)
        .into_par_iter()
        .map(|idx| {
            let mut rng = stream_rng(cfg.seed, idx as u64);
            let primary = primary_dist.sample(&mut rng);
            let mut present = vec![primary];
            match &count_dist {
                None => {
                    for (j, p) in profiles.iter().enumerate() {
                        if j != primary && rng.random_bool(secondary_probability(p, primary_probs[j])) {
                            present.push(j);
                        }
                    }
                }
                Some(dist) => {
                    let k = dist.sample(&mut rng) + 1;
                    let mut candidates: Vec<(usize, f64)> = profiles
                        .iter()
                        .enumerate()
                        .filter(|&(j, p)| j != primary && p.base_prevalence * p.secondary_share > 0.0)
                        .map(|(j, p)| (j, p.base_prevalence * p.secondary_share))
                        .collect();
                    while present.len() < k && !candidates.is_empty() {
                        let pick = WeightedIndex::new(candidates.iter().map(|c| c.1))
                            .expect("positive weights")
                            .sample(&mut rng);
                        present.push(candidates.swap_remove(pick).0);
                    }
                }
            }
            // secondaries in profile order after the primary
            present[1..].sort_unstable();
            render_patient(idx, &present, profiles, cfg, &mut rng)
        })
        .collect();
    Ok(corpus)
}

fn render_patient(
    idx: usize,
    present: &[usize],
    profiles: &[ConditionProfile],
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> PatientCourse {
    let primary = &profiles[present[0]];
    let specialty = primary
        .specialties
        .choose(rng)
        .expect("validated non-empty")
        .clone();
    let site = rng.random_range(1..=cfg.n_sites);

    let mut sentences = Vec::new();
    let mut medications = Vec::new();
    let mut labs = Vec::new();
    for &j in present {
        let p = &profiles[j];
        let indirect = !p.medication_names.is_empty() && rng.random_bool(cfg.indirect_fraction);
        if indirect {
            medications.push(medication_line(p, rng));
        } else {
            let phrase = p.evidence_phrases.choose(rng).expect("non-empty");
            let template = EVIDENCE_TEMPLATES.choose(rng).expect("non-empty");
            sentences.push(template.replace("{}", phrase));
            if !p.medication_names.is_empty() && rng.random_bool(cfg.medication_rate) {
                medications.push(medication_line(p, rng));
            }
        }
        if !p.lab_patterns.is_empty() && rng.random_bool(cfg.lab_rate) {
            let lab = p.lab_patterns.choose(rng).expect("non-empty");
            let value = if lab.high > lab.low {
                rng.random_range(lab.low..=lab.high)
            } else {
                lab.low
            };
            labs.push(format!("{} {:.1} {}", lab.test_name, value, lab.unit));
        }
    }
    let medications_text = medications.join("; ");
    let labs_text = labs.join("; ");

    let target = rng.random_range(cfg.min_chars..=cfg.max_chars);
    let fixed = medications_text.len() + labs_text.len() + 2 * crate::pipeline::SECTION_SEPARATOR.len();
    let mut notes_len: usize = sentences.iter().map(|s| s.len() + 1).sum();
    while fixed + notes_len < target {
        let filler = FILLER_SENTENCES.choose(rng).expect("non-empty");
        notes_len += filler.len() + 1;
        sentences.push(filler.to_string());
    }
    sentences.shuffle(rng);
    let notes_text = format!("Discharge summary. {}", sentences.join(" "));

    let gold_codes: Vec<Code> = present.iter().map(|&j| profiles[j].code.clone()).collect();
    PatientCourse {
        id: format!("S{site}-{idx:06}"),
        specialty,
        notes_text,
        medications_text,
        labs_text,
        recorded_codes: gold_codes.clone(),
        gold_codes,
        split: Split::Unassigned,
    }
}

fn medication_line(p: &ConditionProfile, rng: &mut impl Rng) -> String {
    let name = p.medication_names.choose(rng).expect("non-empty");
    let dose = DOSES.choose(rng).expect("non-empty");
    format!("{name} {dose} mg daily")
}

/// Per-code dropout of secondary diagnoses from the recorded codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndercodingPolicy {
    pub per_code_drop: BTreeMap<Code, f64>,
    #[serde(default = "always_true")]
    pub never_drop_primary: bool,
}

fn always_true() -> bool {
    true
}

impl UndercodingPolicy {
    pub fn single(code: Code, drop: f64) -> Self {
        UndercodingPolicy {
            per_code_drop: BTreeMap::from([(code, drop)]),
            never_drop_primary: true,
        }
    }
}

/// Removes each secondary occurrence of code `c` from `recorded_codes`
/// independently with probability `per_code_drop[c]`. Primaries stay.
pub fn inject_undercoding(
    mut corpus: Vec<PatientCourse>,
    policy: &UndercodingPolicy,
    seed: u64,
) -> Result<Vec<PatientCourse>, CorpusError> {
    let known: BTreeSet<&Code> = corpus.iter().flat_map(|p| p.gold_codes.iter()).collect();
    for (code, &drop) in &policy.per_code_drop {
        if !known.contains(code) {
            return Err(CorpusError::PolicyReferencesUnknownCode(code.to_string()));
        }
        if !(0.0..=1.0).contains(&drop) {
            return Err(CorpusError::InvalidConfig(format!("drop probability for {code} outside [0, 1]")));
        }
    }
    if let Some(p) = corpus.iter().find(|p| p.recorded_codes != p.gold_codes) {
        return Err(CorpusError::AlreadyInjected(p.id.clone()));
    }
    corpus.par_iter_mut().enumerate().for_each(|(idx, patient)| {
        let mut rng = stream_rng(seed, purpose::UNDERCODING + idx as u64);
        let mut kept = Vec::with_capacity(patient.recorded_codes.len());
        for (pos, code) in patient.recorded_codes.iter().enumerate() {
            let drop = policy.per_code_drop.get(code).copied().unwrap_or(0.0);
            // one draw per secondary position keeps streams aligned across policies
            let roll: f64 = if pos > 0 { rng.random() } else { 1.0 };
            if pos == 0 || roll >= drop {
                kept.push(code.clone());
            }
        }
        patient.recorded_codes = kept;
    });
    Ok(corpus)
}

pub fn write_corpus(corpus: &[PatientCourse], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for patient in corpus {
        serde_json::to_writer(&mut out, patient).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<PatientCourse>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let patient = serde_json::from_str(&line).map_err(|e| CorpusError::SchemaViolation {
            line: idx + 1,
            message: e.to_string(),
        })?;
        corpus.push(patient);
    }
    Ok(corpus)
}
