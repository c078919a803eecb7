//! Binary cross-entropy training with AdamW, a linear learning-rate schedule
//! and early stopping on validation MAP.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codesystem::{Code, LabelSpace};
use crate::corpusgen::PatientCourse;
use crate::metrics::{mean_average_precision, Example, MetricsError, PredictionSet};
use crate::model::{sigmoid, CodingModel, ModelError, ParamKind, Parameters};
use crate::pipeline::assemble_document;
use crate::rng::{purpose, stream_rng};
use crate::textprep::{tokenize, TokenizedDocument, TokenizerConfig, Vocabulary};

/// Examples per gradient accumulator. Fixed so that the reduction order,
/// and therefore every bit of the result, does not depend on thread count.
const GRADIENT_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite gradient or loss at step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Learning rate reached at the final step.
    pub final_learning_rate: f64,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Also decay biases and layer-norm parameters.
    pub decay_bias_and_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 5e-5,
            batch_size: 128,
            warmup_steps: 0,
            final_learning_rate: 0.0,
            early_stop_patience: 2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            decay_bias_and_norm: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=self.learning_rate).contains(&self.final_learning_rate) {
            return bad("final_learning_rate must lie in [0, learning_rate]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("AdamW betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used at optimizer step `step` (0-based) of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.final_learning_rate + (self.learning_rate - self.final_learning_rate) * (1.0 - progress)
    }
}

/// A tokenized document with label indices into the model's label space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDocument {
    pub id: String,
    pub text: String,
    pub doc: TokenizedDocument,
    /// Recorded codes in order, primary first.
    pub labels: Vec<usize>,
    pub gold: Option<Vec<usize>>,
}

fn indices(codes: &[Code], labels: &LabelSpace) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(codes.len());
    for idx in codes.iter().filter_map(|c| labels.index_of(c)) {
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out
}

/// Tokenizes patient courses. Codes outside `labels` are dropped.
pub fn prepare_documents(
    patients: &[PatientCourse],
    vocab: &Vocabulary,
    labels: &LabelSpace,
    tokenizer: TokenizerConfig,
) -> Vec<LabeledDocument> {
    patients
        .par_iter()
        .map(|p| {
            let document = assemble_document(p);
            LabeledDocument {
                id: p.id.clone(),
                doc: tokenize(&document.text, vocab, tokenizer),
                text: document.text,
                labels: indices(&p.recorded_codes, labels),
                gold: Some(indices(&p.gold_codes, labels)),
            }
        })
        .collect()
}

/// Model confidences for every document, in input order.
pub fn predict_set(model: &CodingModel, docs: &[LabeledDocument]) -> Result<PredictionSet, ModelError> {
    let examples = docs
        .par_iter()
        .map(|d| {
            let confidences = model.confidences(&d.doc)?;
            let mut ex = Example::new(confidences, d.labels.clone());
            ex.gold = d.gold.clone();
            Ok(ex)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(PredictionSet {
        code_count: model.config.label_count,
        examples,
    })
}

/// Stable `-[y ln σ(z) + (1-y) ln(1-σ(z))]`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over codes, from logits.
pub fn bce_from_logits(logits: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    logits.iter().zip(targets).map(|(&z, &y)| bce_with_logit(z, y)).sum::<f64>() / logits.len() as f64
}

/// Mean binary cross-entropy over codes for confidences in (0, 1).
pub fn bce_loss(confidences: &[f64], targets: &[f64]) -> f64 {
    let logits: Vec<f64> = confidences.iter().map(|&s| (s / (1.0 - s)).ln()).collect();
    bce_from_logits(&logits, targets)
}

fn targets(labels: &[usize], count: usize) -> Vec<f64> {
    let mut y = vec![0.0; count];
    labels.iter().for_each(|&l| y[l] = 1.0);
    y
}

/// Mean loss over `docs` and its exact gradient for every parameter.
pub fn batch_gradient(model: &CodingModel, docs: &[&LabeledDocument]) -> Result<(f64, Parameters), ModelError> {
    let c = model.config.label_count;
    let scale = 1.0 / (docs.len() as f64 * c as f64);
    let partials = docs
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut grads = Parameters::zeros(&model.config);
            let mut loss = 0.0;
            for d in chunk {
                let trace = model.predict(&d.doc)?;
                let y = targets(&d.labels, c);
                let logits = trace.logits.as_slice().expect("contiguous");
                loss += bce_from_logits(logits, &y);
                let dlogits: Vec<f64> = logits.iter().zip(&y).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect();
                model.backward(&trace, &dlogits, Some(&mut grads));
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap_or_else(|| (0.0, Parameters::zeros(&model.config)));
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss / docs.len().max(1) as f64, grads))
}

/// Mean loss without gradients.
pub fn batch_loss(model: &CodingModel, docs: &[&LabeledDocument]) -> Result<f64, ModelError> {
    let c = model.config.label_count;
    let losses = docs
        .par_iter()
        .map(|d| {
            let trace = model.predict(&d.doc)?;
            Ok(bce_from_logits(trace.logits.as_slice().expect("contiguous"), &targets(&d.labels, c)))
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / docs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub decay_bias_and_norm: bool,
}

impl From<&TrainConfig> for AdamW {
    fn from(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            decay_bias_and_norm: cfg.decay_bias_and_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut Parameters, grads: &Parameters, state: &mut AdamState, lr: f64, opt: &AdamW) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let decays = opt.decay_bias_and_norm || !matches!(p.kind, ParamKind::Bias | ParamKind::Norm);
        let shrink = if decays { 1.0 - lr * opt.weight_decay } else { 1.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * gi;
            v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * gi * gi;
            let update = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + opt.epsilon);
            p.data[i] = p.data[i] * shrink - lr * update;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_map: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step.
    pub learning_rates: Vec<f64>,
    pub stopped_early: bool,
    /// 1-based epoch of the retained model.
    pub best_epoch: usize,
    pub best_validation_map: f64,
}

pub fn train(
    model: CodingModel,
    train_docs: &[LabeledDocument],
    val_docs: &[LabeledDocument],
    cfg: &TrainConfig,
) -> Result<(CodingModel, TrainHistory), TrainError> {
    train_with_observer(model, train_docs, val_docs, cfg, |_| {})
}

/// Like [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    mut model: CodingModel,
    train_docs: &[LabeledDocument],
    val_docs: &[LabeledDocument],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(CodingModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_docs.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let opt = AdamW::from(cfg);
    let steps_per_epoch = train_docs.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut state = AdamState::new(&model.params);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        learning_rates: Vec::with_capacity(total_steps),
        stopped_early: false,
        best_epoch: 0,
        best_validation_map: f64::NEG_INFINITY,
    };
    let mut best = model.params.clone();
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, purpose::SHUFFLE + epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let docs: Vec<&LabeledDocument> = batch.iter().map(|&i| &train_docs[i]).collect();
            let (loss, grads) = batch_gradient(&model, &docs)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteGradient { step });
            }
            let lr = cfg.learning_rate_at(step, total_steps);
            adamw_step(&mut model.params, &grads, &mut state, lr, &opt);
            history.learning_rates.push(lr);
            loss_sum += loss * docs.len() as f64;
            step += 1;
        }
        let validation_map = mean_average_precision(&predict_set(&model, val_docs)?)?;
        let improved = validation_map > history.best_validation_map;
        if improved {
            history.best_validation_map = validation_map;
            history.best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_docs.len() as f64,
            validation_map,
            improved,
        };
        observer(&record);
        history.epochs.push(record);
        if stale >= cfg.early_stop_patience.max(1) {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.params = best;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Checkpoint, ModelConfig};
    use crate::textprep::PAD_ID;

    fn tiny_model() -> CodingModel {
        CodingModel::init(ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            encoder_layers: 1,
            attention_heads: 2,
            feedforward_dim: 12,
            window: 4,
            label_count: 3,
            seed: 11,
        })
        .unwrap()
    }

    fn labeled(ids: Vec<u32>, labels: Vec<usize>, window: usize) -> LabeledDocument {
        LabeledDocument {
            id: String::new(),
            text: String::new(),
            doc: TokenizedDocument::from_ids(ids, window),
            labels,
            gold: None,
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(&[0.5, 0.5], &[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_from_logits(&[40.0, -40.0], &[1.0, 0.0]) < 1e-15);
        let a = bce_loss(&[0.2, 0.7], &[1.0, 0.0]);
        let b = bce_loss(&[0.8, 0.3], &[0.0, 1.0]);
        assert!((a - b).abs() < 1e-12);
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
    }

    #[test]
    fn finite_difference_gradient_check() {
        let model = tiny_model();
        let doc = labeled(vec![3, 7, 2, 9, 11, 5], vec![0, 2], 4);
        let docs = [&doc];
        let (_, analytic) = batch_gradient(&model, &docs).unwrap();
        let eps = 1e-5;
        let mut probe = model.clone();
        let names: Vec<String> = model.params.tensors().into_iter().map(|t| t.name).collect();
        let grads = analytic.tensors();
        for (ti, name) in names.iter().enumerate() {
            for i in 0..grads[ti].data.len() {
                let original = probe.params.tensors()[ti].data[i];
                probe.params.tensors_mut()[ti].data[i] = original + eps;
                let plus = batch_loss(&probe, &docs).unwrap();
                probe.params.tensors_mut()[ti].data[i] = original - eps;
                let minus = batch_loss(&probe, &docs).unwrap();
                probe.params.tensors_mut()[ti].data[i] = original;
                let fd = (plus - minus) / (2.0 * eps);
                let a = grads[ti].data[i];
                let rel = (a - fd).abs() / a.abs().max(1.0);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn zero_head_bias_gradient() {
        let mut model = tiny_model();
        model.params.output_weights.fill(0.0);
        model.params.output_bias = ndarray::arr1(&[0.3, -0.2, 0.0]);
        let a = labeled(vec![3, 4], vec![0], 4);
        let b = labeled(vec![5, 6, 7], vec![0, 1], 4);
        let (_, g) = batch_gradient(&model, &[&a, &b]).unwrap();
        let c = 3.0;
        for (code, y) in [[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]].iter().enumerate() {
            let s = sigmoid(model.params.output_bias[code]);
            let expected = ((s - y[0]) + (s - y[1])) / 2.0 / c;
            assert!((g.output_bias[code] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn pad_slots_receive_no_gradient() {
        let model = tiny_model();
        let doc = labeled(vec![3, 4], vec![1], 4);
        let (_, g) = batch_gradient(&model, &[&doc]).unwrap();
        assert!(g.position_embedding.row(2).iter().all(|&v| v == 0.0));
        assert!(g.position_embedding.row(3).iter().all(|&v| v == 0.0));
        assert!(g.token_embedding.row(PAD_ID as usize).iter().all(|&v| v == 0.0));
        assert!(g.position_embedding.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_is_independent_of_chunking() {
        let model = tiny_model();
        let docs: Vec<LabeledDocument> = (0..19u32)
            .map(|i| labeled(vec![2 + i % 17, 3 + (i * 5) % 16, 4], vec![(i % 3) as usize], 4))
            .collect();
        let refs: Vec<&LabeledDocument> = docs.iter().collect();
        let (l1, g1) = batch_gradient(&model, &refs).unwrap();
        let (l2, g2) = batch_gradient(&model, &refs).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (l3, g3) = pool.install(|| batch_gradient(&model, &refs)).unwrap();
        assert_eq!(l1, l3);
        assert_eq!(g1, g3);
    }

    fn scalar_params(w: f64, kind_bias: bool) -> (Parameters, Parameters) {
        let cfg = ModelConfig {
            vocab_size: 2,
            embed_dim: 1,
            encoder_layers: 0,
            attention_heads: 1,
            feedforward_dim: 1,
            window: 1,
            label_count: 1,
            seed: 0,
        };
        let mut p = Parameters::zeros(&cfg);
        if kind_bias {
            p.output_bias[0] = w;
        } else {
            p.output_weights[[0, 0]] = w;
        }
        let g = p.zeros_like();
        (p, g)
    }

    #[test]
    fn adamw_closed_forms() {
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            decay_bias_and_norm: false,
        };
        let (mut p, mut g) = scalar_params(0.0, false);
        g.output_weights[[0, 0]] = 1.0;
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, &opt);
        assert!((p.output_weights[[0, 0]] + 0.1).abs() < 1e-8);

        let (mut p, g) = scalar_params(0.7, false);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, &opt);
        assert_eq!(p, before);

        let decay = AdamW { weight_decay: 0.01, ..opt };
        let (mut p, g) = scalar_params(2.0, false);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, &decay);
        assert!((p.output_weights[[0, 0]] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);

        let (mut p, g) = scalar_params(2.0, true);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, &decay);
        assert_eq!(p.output_bias[0], 2.0);
    }

    #[test]
    fn linear_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0, 4), 1.0);
        assert_eq!(cfg.learning_rate_at(2, 4), 0.5);
        assert_eq!(cfg.learning_rate_at(3, 4), 0.25);
        let warm = TrainConfig {
            warmup_steps: 2,
            ..cfg.clone()
        };
        assert_eq!(warm.learning_rate_at(0, 6), 0.5);
        assert_eq!(warm.learning_rate_at(2, 6), 1.0);
        assert!(TrainConfig { epochs: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn descent_on_frozen_batch() {
        let mut model = tiny_model();
        let docs: Vec<LabeledDocument> = (0..6u32)
            .map(|i| labeled(vec![2 + i, 9, 3 + 2 * i, 12], vec![(i % 3) as usize], 4))
            .collect();
        let refs: Vec<&LabeledDocument> = docs.iter().collect();
        let opt = AdamW::from(&TrainConfig::default());
        let mut st = AdamState::new(&model.params);
        let mut last = batch_loss(&model, &refs).unwrap();
        for _ in 0..3 {
            let (_, g) = batch_gradient(&model, &refs).unwrap();
            adamw_step(&mut model.params, &g, &mut st, 1e-3, &opt);
            let now = batch_loss(&model, &refs).unwrap();
            assert!(now <= last, "{now} > {last}");
            last = now;
        }
    }

    /// Code `c` fires when token `5 + c` appears somewhere in the document.
    fn toy_task(n: usize, seed: u32) -> Vec<LabeledDocument> {
        (0..n as u32)
            .map(|i| {
                let k = i.wrapping_mul(2654435761).wrapping_add(seed);
                let mut ids: Vec<u32> = (0..10).map(|j| 2 + (k >> (j % 8)) % 3).collect();
                let mut labels = Vec::new();
                for c in 0..3u32 {
                    if (k >> (c + 3)) & 1 == 1 {
                        ids[(3 * c + (k >> c) % 3) as usize] = 5 + c;
                        labels.push(c as usize);
                    }
                }
                labeled(ids, labels, 4)
            })
            .filter(|d| !d.labels.is_empty())
            .collect()
    }

    #[test]
    fn learns_toy_task_and_checkpoint_reproduces_map() {
        let model = tiny_model();
        let train_docs = toy_task(160, 1);
        let val_docs = toy_task(40, 77);
        let cfg = TrainConfig {
            epochs: 12,
            learning_rate: 1e-2,
            batch_size: 16,
            early_stop_patience: 3,
            seed: 3,
            ..TrainConfig::default()
        };
        let (best, history) = train(model.clone(), &train_docs, &val_docs, &cfg).unwrap();
        assert!(history.best_validation_map > 0.95, "{history:?}");
        let max = history.epochs.iter().map(|e| e.validation_map).fold(f64::MIN, f64::max);
        assert_eq!(history.best_validation_map, max);
        assert_eq!(history.epochs[history.best_epoch - 1].validation_map, max);

        let (_, again) = train(model, &train_docs, &val_docs, &cfg).unwrap();
        assert_eq!(history, again);

        let vocab = Vocabulary::from_token_list(
            ["[PAD]", "[UNK]"].iter().map(|s| s.to_string()).chain((2..20).map(|i| format!("t{i}"))).collect(),
        )
        .unwrap();
        let labels = LabelSpace::new(["A01", "B01", "C01"].iter().map(|c| Code::parse(c).unwrap()));
        let ck = Checkpoint {
            model: best,
            vocabulary: vocab,
            labels,
            tokenizer: TokenizerConfig {
                window: 4,
                max_tokens: 100,
            },
        };
        let restored = Checkpoint::from_json(&ck.to_json()).unwrap();
        let map = mean_average_precision(&predict_set(&restored.model, &val_docs).unwrap()).unwrap();
        assert!((map - history.best_validation_map).abs() < 1e-9);
    }

    #[test]
    fn zero_patience_stops_after_first_non_improving_epoch() {
        let model = tiny_model();
        let docs = toy_task(20, 2);
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 1e-9,
            batch_size: 4,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let (_, history) = train(model, &docs, &docs, &cfg).unwrap();
        let first_bad = history.epochs.iter().position(|e| !e.improved).unwrap();
        assert_eq!(history.epochs.len(), first_bad + 1);
        assert!(history.stopped_early);
    }
}
