//! Windowed encoder with a label-wise attention head.
//!
//! Every window of `W` tokens is encoded independently by a small post-norm
//! transformer (positions reset per window). The label-wise attention layer
//! then attends over all non-PAD token embeddings of the document with one
//! learned query per code:
//!
//! ```text
//! alpha[c, t] = softmax_t(q_c · h_t / sqrt(d))
//! v_c         = sum_t alpha[c, t] h_t
//! z_c         = w_c · v_c + b_c,     s_c = sigmoid(z_c)
//! ```
//!
//! PAD positions are never computed: they are masked as attention keys
//! everywhere and their outputs are discarded, so skipping them is exact.

mod checkpoint;
mod layers;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{purpose, stream_rng};
use crate::textprep::{TokenizedDocument, PAD_ID};

pub use checkpoint::{Checkpoint, CheckpointError};
use layers::{add_matmul, encoder_backward, encoder_forward, softmax_rows, softmax_rows_backward, LayerCache};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("document has no attendable (non-PAD) token")]
    AllPadDocument,
    #[error("document window {found} does not match model window {expected}")]
    WindowMismatch { expected: usize, found: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_dim: usize,
    pub window: usize,
    pub label_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: d = 64, two layers, four heads, feed-forward 128, W = 128.
    pub fn new(vocab_size: usize, label_count: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            encoder_layers: 2,
            attention_heads: 4,
            feedforward_dim: 128,
            window: crate::textprep::DEFAULT_WINDOW,
            label_count,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("attention_heads", self.attention_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("window", self.window),
            ("label_count", self.label_count),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocabulary needs PAD and UNK".into()));
        }
        if self.embed_dim % self.attention_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Role of a tensor, used to select which ones receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Norm,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f64],
}

/// Every trainable tensor. The same type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    pub label_queries: Array2<f64>,
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
}

macro_rules! layer_tensors {
    ($layer:expr, $push:ident) => {{
        let l = $layer;
        $push!("wq", ParamKind::Weight, l.wq);
        $push!("bq", ParamKind::Bias, l.bq);
        $push!("wk", ParamKind::Weight, l.wk);
        $push!("bk", ParamKind::Bias, l.bk);
        $push!("wv", ParamKind::Weight, l.wv);
        $push!("bv", ParamKind::Bias, l.bv);
        $push!("wo", ParamKind::Weight, l.wo);
        $push!("bo", ParamKind::Bias, l.bo);
        $push!("ln1_gamma", ParamKind::Norm, l.ln1_gamma);
        $push!("ln1_beta", ParamKind::Norm, l.ln1_beta);
        $push!("w1", ParamKind::Weight, l.w1);
        $push!("b1", ParamKind::Bias, l.b1);
        $push!("w2", ParamKind::Weight, l.w2);
        $push!("b2", ParamKind::Bias, l.b2);
        $push!("ln2_gamma", ParamKind::Norm, l.ln2_gamma);
        $push!("ln2_beta", ParamKind::Norm, l.ln2_beta);
    }};
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.embed_dim, cfg.feedforward_dim);
        let layer = || EncoderLayer {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
        };
        Parameters {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.window, d)),
            layers: (0..cfg.encoder_layers).map(|_| layer()).collect(),
            label_queries: Array2::zeros((cfg.label_count, d)),
            output_weights: Array2::zeros((cfg.label_count, d)),
            output_bias: Array1::zeros(cfg.label_count),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.data.fill(0.0));
        out
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        macro_rules! push_named {
            ($prefix:expr, $name:expr, $kind:expr, $arr:expr) => {
                out.push(TensorRef {
                    name: format!("{}{}", $prefix, $name),
                    kind: $kind,
                    shape: $arr.shape().to_vec(),
                    data: $arr.as_slice().expect("standard layout"),
                })
            };
        }
        push_named!("", "token_embedding", ParamKind::Embedding, self.token_embedding);
        push_named!("", "position_embedding", ParamKind::Embedding, self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("encoder.{i}.");
            macro_rules! push {
                ($name:expr, $kind:expr, $arr:expr) => {
                    push_named!(prefix, $name, $kind, $arr)
                };
            }
            layer_tensors!(layer, push);
        }
        push_named!("", "label_queries", ParamKind::Weight, self.label_queries);
        push_named!("", "output_weights", ParamKind::Weight, self.output_weights);
        push_named!("", "output_bias", ParamKind::Bias, self.output_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        macro_rules! push_named {
            ($prefix:expr, $name:expr, $kind:expr, $arr:expr) => {
                out.push(TensorMut {
                    name: format!("{}{}", $prefix, $name),
                    kind: $kind,
                    data: $arr.as_slice_mut().expect("standard layout"),
                })
            };
        }
        push_named!("", "token_embedding", ParamKind::Embedding, self.token_embedding);
        push_named!("", "position_embedding", ParamKind::Embedding, self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("encoder.{i}.");
            macro_rules! push {
                ($name:expr, $kind:expr, $arr:expr) => {
                    push_named!(prefix, $name, $kind, $arr)
                };
            }
            layer_tensors!(&mut *layer, push);
        }
        push_named!("", "label_queries", ParamKind::Weight, self.label_queries);
        push_named!("", "output_weights", ParamKind::Weight, self.output_weights);
        push_named!("", "output_bias", ParamKind::Bias, self.output_bias);
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.data.iter_mut().zip(src.data).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

/// Token embeddings of one document, PAD positions removed.
#[derive(Debug, Clone)]
pub struct EncodedDocument {
    /// `[T × d]`, document order.
    pub embeddings: Array2<f64>,
    /// `(window, offset)` of each row; PAD slots are absent.
    pub positions: Vec<(usize, usize)>,
}

struct WindowCache {
    tokens: Vec<u32>,
    offsets: Vec<usize>,
    rows: std::ops::Range<usize>,
    layers: Vec<LayerCache>,
}

/// Result of [`CodingModel::predict`], kept for backward passes and explanations.
pub struct ForwardTrace {
    /// Input vectors (token + position embedding) per non-PAD token `[T × d]`.
    pub inputs: Array2<f64>,
    /// Final token embeddings `[T × d]`.
    pub embeddings: Array2<f64>,
    pub positions: Vec<(usize, usize)>,
    /// Label-wise attention `[C × T]`; rows sum to one.
    pub attention: Array2<f64>,
    /// Per-code context vectors `[C × d]`.
    pub contexts: Array2<f64>,
    pub logits: Array1<f64>,
    pub confidences: Array1<f64>,
    windows: Vec<WindowCache>,
}

impl ForwardTrace {
    pub fn token_count(&self) -> usize {
        self.positions.len()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid kept strictly inside (0, 1) even when the logit saturates.
pub fn confidence(z: f64) -> f64 {
    sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

fn uniform(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    uniform(rng, (fan_in, fan_out), (6.0 / (fan_in + fan_out) as f64).sqrt())
}

impl CodingModel {
    /// Deterministic initialization: scaled-uniform weights, layer-norm
    /// scales 1, all biases and offsets 0. Output weights start small so
    /// initial confidences sit near 0.5.
    pub fn init(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, purpose::INIT);
        let (d, f, c) = (cfg.embed_dim, cfg.feedforward_dim, cfg.label_count);
        let mut params = Parameters::zeros(&cfg);
        params.token_embedding = uniform(&mut rng, (cfg.vocab_size, d), 0.8);
        params.position_embedding = uniform(&mut rng, (cfg.window, d), 0.2);
        for layer in &mut params.layers {
            layer.wq = xavier(&mut rng, d, d);
            layer.wk = xavier(&mut rng, d, d);
            layer.wv = xavier(&mut rng, d, d);
            layer.wo = xavier(&mut rng, d, d);
            layer.w1 = xavier(&mut rng, d, f);
            layer.w2 = xavier(&mut rng, f, d);
            layer.ln1_gamma.fill(1.0);
            layer.ln2_gamma.fill(1.0);
        }
        params.label_queries = uniform(&mut rng, (c, d), (1.0 / d as f64).sqrt());
        params.output_weights = uniform(&mut rng, (c, d), 0.1 * (3.0 / d as f64).sqrt());
        Ok(CodingModel { config: cfg, params })
    }

    fn check_document(&self, doc: &TokenizedDocument) -> Result<(), ModelError> {
        if doc.window != self.config.window || doc.windows.iter().any(|w| w.len() != self.config.window) {
            return Err(ModelError::WindowMismatch {
                expected: self.config.window,
                found: doc.window,
            });
        }
        if let Some(&bad) = doc.windows.iter().flatten().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    fn encode_windows(&self, doc: &TokenizedDocument) -> (Array2<f64>, Array2<f64>, Vec<(usize, usize)>, Vec<WindowCache>) {
        let d = self.config.embed_dim;
        let heads = self.config.attention_heads;
        let total: usize = doc.windows.iter().flatten().filter(|&&t| t != PAD_ID).count();
        let mut inputs = Array2::zeros((total, d));
        let mut embeddings = Array2::zeros((total, d));
        let mut positions = Vec::with_capacity(total);
        let mut caches = Vec::new();
        let mut row = 0;
        for (w, window) in doc.windows.iter().enumerate() {
            let (offsets, tokens): (Vec<usize>, Vec<u32>) = window
                .iter()
                .enumerate()
                .filter(|(_, &t)| t != PAD_ID)
                .map(|(i, &t)| (i, t))
                .unzip();
            if tokens.is_empty() {
                continue;
            }
            let n = tokens.len();
            let mut x = Array2::zeros((n, d));
            for (i, (&tok, &off)) in tokens.iter().zip(&offsets).enumerate() {
                let mut r = x.row_mut(i);
                r.assign(&self.params.token_embedding.row(tok as usize));
                r += &self.params.position_embedding.row(off);
            }
            inputs.slice_mut(s![row..row + n, ..]).assign(&x);
            let mut layer_caches = Vec::with_capacity(self.params.layers.len());
            for layer in &self.params.layers {
                let (out, cache) = encoder_forward(layer, x, heads);
                layer_caches.push(cache);
                x = out;
            }
            embeddings.slice_mut(s![row..row + n, ..]).assign(&x);
            positions.extend(offsets.iter().map(|&o| (w, o)));
            caches.push(WindowCache {
                tokens,
                offsets,
                rows: row..row + n,
                layers: layer_caches,
            });
            row += n;
        }
        (inputs, embeddings, positions, caches)
    }

    /// Token embeddings with windows encoded independently.
    pub fn encode(&self, doc: &TokenizedDocument) -> Result<EncodedDocument, ModelError> {
        self.check_document(doc)?;
        let (_, embeddings, positions, _) = self.encode_windows(doc);
        Ok(EncodedDocument { embeddings, positions })
    }

    pub fn predict(&self, doc: &TokenizedDocument) -> Result<ForwardTrace, ModelError> {
        self.check_document(doc)?;
        let (inputs, embeddings, positions, windows) = self.encode_windows(doc);
        if positions.is_empty() {
            return Err(ModelError::AllPadDocument);
        }
        let scale = 1.0 / (self.config.embed_dim as f64).sqrt();
        let scores = self.params.label_queries.dot(&embeddings.t()) * scale;
        let attention = softmax_rows(scores);
        let contexts = attention.dot(&embeddings);
        let logits = (&contexts * &self.params.output_weights).sum_axis(Axis(1)) + &self.params.output_bias;
        let confidences = logits.mapv(confidence);
        Ok(ForwardTrace {
            inputs,
            embeddings,
            positions,
            attention,
            contexts,
            logits,
            confidences,
            windows,
        })
    }

    pub fn confidences(&self, doc: &TokenizedDocument) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict(doc)?.confidences.to_vec())
    }

    /// Backpropagates `dlogits` (gradient of some scalar w.r.t. each logit)
    /// through the trace. Parameter gradients are accumulated into `grads`
    /// when given. Returns the gradient w.r.t. each token's input vector.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], mut grads: Option<&mut Parameters>) -> Array2<f64> {
        assert_eq!(dlogits.len(), self.config.label_count, "one gradient per code");
        let dz = Array1::from(dlogits.to_vec());
        let scale = 1.0 / (self.config.embed_dim as f64).sqrt();
        let dz_col = dz.view().insert_axis(Axis(1));
        if let Some(g) = grads.as_deref_mut() {
            g.output_bias += &dz;
            g.output_weights += &(&trace.contexts * &dz_col);
        }
        let dctx = &self.params.output_weights * &dz_col;
        let dattn = dctx.dot(&trace.embeddings.t());
        let mut dh = trace.attention.t().dot(&dctx);
        let dscores = softmax_rows_backward(&trace.attention, &dattn) * scale;
        if let Some(g) = grads.as_deref_mut() {
            add_matmul(&mut g.label_queries, &dscores.view(), &trace.embeddings.view());
        }
        add_matmul(&mut dh, &dscores.t(), &self.params.label_queries.view());

        let heads = self.config.attention_heads;
        let mut dinputs = Array2::zeros(trace.inputs.raw_dim());
        for window in &trace.windows {
            let mut dx = dh.slice(s![window.rows.clone(), ..]).to_owned();
            for (l, cache) in window.layers.iter().enumerate().rev() {
                let layer_grads = grads.as_deref_mut().map(|g| &mut g.layers[l]);
                dx = encoder_backward(&self.params.layers[l], cache, &dx, heads, layer_grads);
            }
            if let Some(g) = grads.as_deref_mut() {
                for (i, (&tok, &off)) in window.tokens.iter().zip(&window.offsets).enumerate() {
                    let row = dx.row(i);
                    let mut e = g.token_embedding.row_mut(tok as usize);
                    e += &row;
                    let mut p = g.position_embedding.row_mut(off);
                    p += &row;
                }
            }
            dinputs.slice_mut(s![window.rows.clone(), ..]).assign(&dx);
        }
        dinputs
    }
}
