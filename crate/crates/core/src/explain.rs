//! Token attributions: label-wise attention weighted by input-times-gradient
//! of the code's logit, normalized to sum to one per code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{Code, LabelSpace};
use crate::model::{Checkpoint, CodingModel, ForwardTrace, ModelError};
use crate::textprep::{tokenize, TokenizedDocument};

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("code {0} is not in the model's label space")]
    UnknownCode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `g[t] = |∇_{x_t} z_c · x_t|` for each non-PAD token input `x_t`.
pub fn input_gradient(model: &CodingModel, trace: &ForwardTrace, code: usize) -> Vec<f64> {
    let mut dlogits = vec![0.0; model.config.label_count];
    dlogits[code] = 1.0;
    let dinputs = model.backward(trace, &dlogits, None);
    dinputs
        .rows()
        .into_iter()
        .zip(trace.inputs.rows())
        .map(|(g, x)| g.dot(&x).abs())
        .collect()
}

/// Per-token scores for one code, aligned with the document's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub code: usize,
    /// Index into `TokenizedDocument::token_ids` of every scored token.
    pub token_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn attingrad_from_trace(model: &CodingModel, trace: &ForwardTrace, code: usize) -> Attribution {
    let grads = input_gradient(model, trace, code);
    let raw: Vec<f64> = grads
        .iter()
        .enumerate()
        .map(|(t, g)| trace.attention[[code, t]] * g)
        .collect();
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    let scores = if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n; raw.len()]
    };
    let window = model.config.window;
    Attribution {
        code,
        token_indices: trace.positions.iter().map(|&(w, off)| w * window + off).collect(),
        scores,
    }
}

pub fn attingrad(model: &CodingModel, doc: &TokenizedDocument, code: usize) -> Result<Attribution, ModelError> {
    Ok(attingrad_from_trace(model, &model.predict(doc)?, code))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Wire form: `{code, tokens: [{text, start, end, score}], normalization}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub code: Code,
    /// Document order.
    pub tokens: Vec<TokenScore>,
    pub normalization: String,
}

pub const NORMALIZATION: &str = "sum1";

impl AttributionMap {
    pub fn new(attr: &Attribution, doc: &TokenizedDocument, text: &str, labels: &LabelSpace) -> Self {
        let tokens = attr
            .token_indices
            .iter()
            .zip(&attr.scores)
            .map(|(&i, &score)| {
                let (start, end) = doc.char_spans[i];
                TokenScore {
                    text: text[start..end].to_string(),
                    start,
                    end,
                    score,
                }
            })
            .collect();
        AttributionMap {
            code: labels.code(attr.code).clone(),
            tokens,
            normalization: NORMALIZATION.into(),
        }
    }
}

/// The `k` highest-scoring tokens; ties go to the earlier span.
pub fn top_features(map: &AttributionMap, k: usize) -> Vec<TokenScore> {
    let mut tokens = map.tokens.clone();
    tokens.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
    tokens.truncate(k);
    tokens
}

/// Tokenizes `text` with the checkpoint's settings and explains `code`.
pub fn explain_text(ck: &Checkpoint, text: &str, code: &Code) -> Result<AttributionMap, ExplainError> {
    let idx = ck
        .labels
        .index_of(code)
        .ok_or_else(|| ExplainError::UnknownCode(code.to_string()))?;
    let doc = tokenize(text, &ck.vocabulary, ck.tokenizer);
    let attr = attingrad(&ck.model, &doc, idx)?;
    Ok(AttributionMap::new(&attr, &doc, text, &ck.labels))
}
