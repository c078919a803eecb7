//! End-to-end helpers shared by the command line and experiments: build a
//! vocabulary and label space from training data, fit, tune and evaluate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{Code, LabelSpace};
use crate::corpusgen::PatientCourse;
use crate::metrics::{
    evaluate, tune_threshold, EvalReport, Example, MetricsError, PredictionSet, ThresholdSearch, ZeroSupport,
};
use crate::model::{Checkpoint, CodingModel, ModelConfig, ModelError};
use crate::pipeline::assemble_document;
use crate::textprep::{TextError, TokenizerConfig, Vocabulary, DEFAULT_MAX_TOKENS, DEFAULT_WINDOW};
use crate::trainer::{predict_set, prepare_documents, train_with_observer, EpochRecord, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training corpus has no recorded codes")]
    NoLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub window: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed_dim: 64,
            encoder_layers: 2,
            attention_heads: 4,
            feedforward_dim: 128,
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub min_count: usize,
    pub max_tokens: usize,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            architecture: Architecture::default(),
            vocab_size: 20_000,
            min_count: 2,
            max_tokens: DEFAULT_MAX_TOKENS,
            train: TrainConfig::default(),
        }
    }
}

/// Every recorded code of the training set.
pub fn label_space(train: &[PatientCourse]) -> LabelSpace {
    LabelSpace::new(train.iter().flat_map(|p| p.recorded_codes.iter().cloned()))
}

/// Trains a fresh model; the returned checkpoint holds the best epoch.
pub fn fit(
    train: &[PatientCourse],
    val: &[PatientCourse],
    cfg: &FitConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory), WorkflowError> {
    let texts: Vec<String> = train.iter().map(|p| assemble_document(p).text).collect();
    let vocabulary = Vocabulary::build(texts.iter().map(String::as_str), cfg.vocab_size, cfg.min_count)?;
    let labels = label_space(train);
    if labels.is_empty() {
        return Err(WorkflowError::NoLabels);
    }
    let tokenizer = TokenizerConfig {
        window: cfg.architecture.window,
        max_tokens: cfg.max_tokens,
    };
    let a = &cfg.architecture;
    let model = CodingModel::init(ModelConfig {
        vocab_size: vocabulary.len(),
        embed_dim: a.embed_dim,
        encoder_layers: a.encoder_layers,
        attention_heads: a.attention_heads,
        feedforward_dim: a.feedforward_dim,
        window: a.window,
        label_count: labels.len(),
        seed: cfg.train.seed,
    })?;
    let train_docs = prepare_documents(train, &vocabulary, &labels, tokenizer);
    let val_docs = prepare_documents(val, &vocabulary, &labels, tokenizer);
    let (model, history) = train_with_observer(model, &train_docs, &val_docs, &cfg.train, observer)?;
    Ok((
        Checkpoint {
            model,
            vocabulary,
            labels,
            tokenizer,
        },
        history,
    ))
}

/// Confidences of a checkpoint on a corpus.
pub fn predictions(ck: &Checkpoint, corpus: &[PatientCourse]) -> Result<PredictionSet, WorkflowError> {
    let docs = prepare_documents(corpus, &ck.vocabulary, &ck.labels, ck.tokenizer);
    Ok(predict_set(&ck.model, &docs)?)
}

/// Collapses codes to their level-3 categories, taking the highest
/// confidence within each category.
pub fn to_categories(set: &PredictionSet, labels: &LabelSpace) -> (PredictionSet, LabelSpace) {
    let categories = LabelSpace::new(labels.codes().iter().map(Code::category));
    let map: Vec<usize> = labels
        .codes()
        .iter()
        .map(|c| categories.index_of(&c.category()).expect("category present"))
        .collect();
    let remap = |idx: &[usize]| {
        let mut out: Vec<usize> = Vec::new();
        for &i in idx {
            if !out.contains(&map[i]) {
                out.push(map[i]);
            }
        }
        out
    };
    let examples = set
        .examples
        .iter()
        .map(|ex| {
            let mut conf = vec![f64::NEG_INFINITY; categories.len()];
            for (i, &s) in ex.confidences.iter().enumerate() {
                conf[map[i]] = conf[map[i]].max(s);
            }
            let mut out = Example::new(conf, remap(&ex.labels));
            out.primary = ex.primary.map(|p| map[p]);
            out.gold = ex.gold.as_deref().map(remap);
            out
        })
        .collect();
    (
        PredictionSet {
            code_count: categories.len(),
            examples,
        },
        categories,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdChoice {
    /// Tuned on the validation set for micro F1.
    Auto(ThresholdSearch),
    Fixed(f64),
}

pub struct Evaluation {
    pub threshold: f64,
    pub report: EvalReport,
    pub test: PredictionSet,
    pub labels: LabelSpace,
    /// Indices of the evaluated test cases; cases without any code from the
    /// label space are left out.
    pub kept: Vec<usize>,
}

/// Tunes (or fixes) the threshold on `val`, then evaluates on `test`.
/// With `level == 3` codes are collapsed to categories first.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    val: &[PatientCourse],
    test: &[PatientCourse],
    threshold: ThresholdChoice,
    level: u8,
    zero: ZeroSupport,
) -> Result<Evaluation, WorkflowError> {
    let collapse = |set: PredictionSet| {
        if level == 3 {
            to_categories(&set, &ck.labels)
        } else {
            (set, ck.labels.clone())
        }
    };
    let (mut test_set, labels) = collapse(predictions(ck, test)?);
    let kept: Vec<usize> = (0..test_set.len()).filter(|&i| !test_set.examples[i].labels.is_empty()).collect();
    test_set.examples.retain(|ex| !ex.labels.is_empty());
    let threshold = match threshold {
        ThresholdChoice::Fixed(t) => t,
        ThresholdChoice::Auto(search) => tune_threshold(&collapse(predictions(ck, val)?).0, search)?,
    };
    let report = evaluate(&test_set, &labels, threshold, zero)?;
    Ok(Evaluation {
        threshold,
        report,
        test: test_set,
        labels,
        kept,
    })
}
