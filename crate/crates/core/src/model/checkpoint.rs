//! JSON checkpoint: configuration, vocabulary, label space and named tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CodingModel, ModelConfig, Parameters};
use crate::codesystem::LabelSpace;
use crate::textprep::{TokenizerConfig, Vocabulary};

pub const CHECKPOINT_FORMAT: &str = "medcode-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("tensor manifest mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vocabulary hash mismatch: stored {stored}, computed {computed}")]
    VocabularyHash { stored: String, computed: String },
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    schema_version: u32,
    config: ModelConfig,
    tokenizer: TokenizerConfig,
    vocabulary_hash: String,
    vocabulary: Vec<String>,
    labels: LabelSpace,
    tensors: Vec<StoredTensor>,
}

/// A trained model with everything needed to score raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CodingModel,
    pub vocabulary: Vocabulary,
    pub labels: LabelSpace,
    pub tokenizer: TokenizerConfig,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            schema_version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            tokenizer: self.tokenizer,
            vocabulary_hash: self.vocabulary.content_hash(),
            vocabulary: self.vocabulary.tokens().to_vec(),
            labels: self.labels.clone(),
            tensors: self
                .model
                .params
                .tensors()
                .into_iter()
                .map(|t| StoredTensor {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&stored).expect("checkpoint serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CheckpointError> {
        let stored: StoredCheckpoint = serde_json::from_str(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if stored.format != CHECKPOINT_FORMAT || stored.schema_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format {} v{}",
                stored.format, stored.schema_version
            )));
        }
        let vocabulary =
            Vocabulary::from_token_list(stored.vocabulary).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let computed = vocabulary.content_hash();
        if computed != stored.vocabulary_hash {
            return Err(CheckpointError::VocabularyHash {
                stored: stored.vocabulary_hash,
                computed,
            });
        }
        let config = stored.config;
        config.validate().map_err(|e| CheckpointError::Format(e.to_string()))?;
        if config.vocab_size != vocabulary.len() || config.label_count != stored.labels.len() {
            return Err(CheckpointError::ShapeMismatch(
                "configuration disagrees with vocabulary or label space".into(),
            ));
        }
        if config.window != stored.tokenizer.window {
            return Err(CheckpointError::ShapeMismatch("tokenizer window differs from model window".into()));
        }

        let mut params = Parameters::zeros(&config);
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != stored.tensors.len() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                stored.tensors.len()
            )));
        }
        for ((name, shape), (dst, src)) in expected.iter().zip(params.tensors_mut().into_iter().zip(&stored.tensors)) {
            if &src.name != name || &src.shape != shape || src.data.len() != dst.data.len() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    src.name, src.shape, name, shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(Checkpoint {
            model: CodingModel { config, params },
            vocabulary,
            labels: stored.labels,
            tokenizer: stored.tokenizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
