#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use medcode::codesystem::CodeSystem;
use medcode::corpusgen::{default_profiles, generate_corpus, GeneratorConfig, PatientCourse};
use medcode::model::{Checkpoint, CodingModel, ModelConfig};
use medcode::pipeline::assemble_document;
use medcode::textprep::{TokenizerConfig, Vocabulary};
use medcode::workflow::label_space;
use medcode_server::http::{self, AppState, ServerConfig};
use tokio::net::TcpListener;

pub fn corpus(n: usize, seed: u64) -> Vec<PatientCourse> {
    let cfg = GeneratorConfig {
        n_patients: n,
        seed,
        min_chars: 150,
        max_chars: 400,
        ..GeneratorConfig::default()
    };
    generate_corpus(&default_profiles(), &cfg).unwrap()
}

/// An untrained checkpoint over the corpus vocabulary and codes.
pub fn checkpoint(corpus: &[PatientCourse], seed: u64) -> Checkpoint {
    let texts: Vec<String> = corpus.iter().map(|p| assemble_document(p).text).collect();
    let vocabulary = Vocabulary::build(texts.iter().map(String::as_str), 2000, 1).unwrap();
    let labels = label_space(corpus);
    let model = CodingModel::init(ModelConfig {
        vocab_size: vocabulary.len(),
        embed_dim: 8,
        encoder_layers: 1,
        attention_heads: 2,
        feedforward_dim: 16,
        window: 32,
        label_count: labels.len(),
        seed,
    })
    .unwrap();
    Checkpoint {
        model,
        vocabulary,
        labels,
        tokenizer: TokenizerConfig {
            window: 32,
            max_tokens: 2000,
        },
    }
}

pub fn config(checkpoint: Option<Checkpoint>, corpus: Vec<PatientCourse>, log_path: PathBuf) -> ServerConfig {
    ServerConfig {
        checkpoint,
        code_system: Some(CodeSystem::builtin()),
        corpus,
        queue_ranges: Vec::new(),
        boundary: http::DEFAULT_BOUNDARY,
        log_path,
    }
}

/// Starts the service on an ephemeral port and returns its base URL.
pub async fn spawn(state: AppState) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(http::serve(listener, Arc::new(state), std::future::pending()));
    format!("http://{addr}")
}
