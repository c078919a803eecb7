//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,6` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use medcode::analysis::{gold_precision, mine_disagreements, scaling_curve};
use medcode::codesystem::{Code, CodeRange, CodeSystem};
use medcode::corpusgen::{
    default_profiles, generate_corpus, inject_undercoding, read_corpus, ConditionProfile, GeneratorConfig,
    PatientCourse, UndercodingPolicy,
};
use medcode::explain::{attingrad, AttributionMap};
use medcode::metrics::{
    calibrate_per_code, exact_match_ratio, f1_scores, mean_average_precision, precision_at_recall, rank_codes,
    recall_at_k, Example, PredictionSet, ThresholdSearch, ZeroSupport,
};
use medcode::model::{Checkpoint, CodingModel, ModelConfig};
use medcode::pipeline::{apply_filters, subsample_training, FilterConfig, FilterStage};
use medcode::textprep::{tokenize, TokenizedDocument};
use medcode::trainer::{batch_gradient, batch_loss, prepare_documents, LabeledDocument, TrainConfig};
use medcode::workflow::{evaluate_checkpoint, fit, predictions, Architecture, Evaluation, FitConfig, ThresholdChoice};
use medcode_server::http::{self, AppState, ServerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("1", "metric oracle equivalence", criterion_1),
        ("2", "gradient correctness", criterion_2),
        ("3", "separable-task convergence", criterion_3),
        ("4", "under-coding phenomenon", criterion_4),
        ("5", "scaling trend", criterion_5),
        ("6", "pipeline golden test", criterion_6),
        ("7", "explanation sanity", criterion_7),
        ("8", "offline/online parity", criterion_8),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------------------
// 1. Metrics against brute-force references.

/// Position of `code` in the ranking: codes strictly more confident, or
/// equally confident with a lower index, come first.
fn position(conf: &[f64], code: usize) -> usize {
    (0..conf.len())
        .filter(|&j| conf[j] > conf[code] || (conf[j] == conf[code] && j < code))
        .count()
}

struct Reference {
    micro: f64,
    macro_excluding: f64,
    macro_counting_zero: f64,
    exact_match: f64,
}

fn reference_threshold_metrics(conf: &[Vec<f64>], labels: &[Vec<usize>], codes: usize, t: f64) -> Reference {
    let predicted = |i: usize, c: usize| conf[i][c] >= t;
    let actual = |i: usize, c: usize| labels[i].contains(&c);
    let f1 = |tp: f64, fp: f64, fn_: f64| if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let (mut sum_excl, mut n_excl, mut sum_all) = (0.0, 0.0, 0.0);
    for c in 0..codes {
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for i in 0..conf.len() {
            match (predicted(i, c), actual(i, c)) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => d += 1.0,
                _ => {}
            }
        }
        tp += a;
        fp += b;
        fn_ += d;
        sum_all += f1(a, b, d);
        if a + b + d > 0.0 {
            sum_excl += f1(a, b, d);
            n_excl += 1.0;
        }
    }
    let exact = (0..conf.len())
        .filter(|&i| (0..codes).all(|c| predicted(i, c) == actual(i, c)))
        .count();
    Reference {
        micro: f1(tp, fp, fn_),
        macro_excluding: if n_excl > 0.0 { sum_excl / n_excl } else { 0.0 },
        macro_counting_zero: sum_all / codes as f64,
        exact_match: exact as f64 / conf.len() as f64,
    }
}

fn reference_recall_at(conf: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (c, l) in conf.iter().zip(labels) {
        for &code in l {
            total += 1;
            hits += (position(c, code) < k) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn reference_precision_at_recall(conf: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    let per: Vec<f64> = conf
        .iter()
        .zip(labels)
        .map(|(c, l)| l.iter().filter(|&&code| position(c, code) < l.len()).count() as f64 / l.len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn reference_map(conf: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    let per: Vec<f64> = conf
        .iter()
        .zip(labels)
        .map(|(c, l)| {
            let ap: f64 = l
                .iter()
                .map(|&code| {
                    let p = position(c, code);
                    let above = l.iter().filter(|&&other| position(c, other) <= p).count();
                    above as f64 / (p + 1) as f64
                })
                .sum();
            ap / l.len() as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut comparisons = 0usize;
    for instance in 0..200 {
        let codes = rng.random_range(1..=8);
        let n = rng.random_range(1..=100);
        // a coarse grid in half the instances produces many ties
        let coarse = instance % 2 == 0;
        let conf: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..codes)
                    .map(|_| {
                        if coarse {
                            rng.random_range(0..=10) as f64 / 10.0
                        } else {
                            rng.random::<f64>()
                        }
                    })
                    .collect()
            })
            .collect();
        let labels: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut l: Vec<usize> = (0..codes).filter(|_| rng.random_bool(0.35)).collect();
                if l.is_empty() {
                    l.push(rng.random_range(0..codes));
                }
                // recorded order need not be sorted
                if l.len() > 1 && rng.random_bool(0.5) {
                    l.reverse();
                }
                l
            })
            .collect();
        let set = PredictionSet::new(
            codes,
            conf.iter().zip(&labels).map(|(c, l)| Example::new(c.clone(), l.clone())).collect(),
        )
        .map_err(|e| e.to_string())?;
        let mut compare = |name: &str, ours: f64, reference: f64| -> Result<(), String> {
            let diff = (ours - reference).abs();
            worst = worst.max(diff);
            comparisons += 1;
            if diff > TOL {
                return Err(format!("instance {instance}: {name} {ours} vs reference {reference}"));
            }
            Ok(())
        };
        for t in [0.5, 0.3, rng.random::<f64>(), 1.0] {
            let r = reference_threshold_metrics(&conf, &labels, codes, t);
            compare("f1_micro", f1_scores(&set, t, ZeroSupport::Exclude).micro, r.micro)?;
            compare("f1_macro", f1_scores(&set, t, ZeroSupport::Exclude).macro_, r.macro_excluding)?;
            compare("f1_macro_zero", f1_scores(&set, t, ZeroSupport::CountAsZero).macro_, r.macro_counting_zero)?;
            compare("exact_match_ratio", exact_match_ratio(&set, t), r.exact_match)?;
        }
        for k in 1..=codes + 1 {
            compare("recall_at_k", recall_at_k(&set, k), reference_recall_at(&conf, &labels, k))?;
        }
        compare(
            "precision_at_recall",
            precision_at_recall(&set).map_err(|e| e.to_string())?,
            reference_precision_at_recall(&conf, &labels),
        )?;
        compare(
            "mean_average_precision",
            mean_average_precision(&set).map_err(|e| e.to_string())?,
            reference_map(&conf, &labels),
        )?;
    }
    Ok(format!("200 instances, {comparisons} comparisons, max |diff| {worst:.2e} (tol {TOL:.0e})"))
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients against central finite differences.

fn criterion_2() -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let window = 4;
    let model = CodingModel::init(ModelConfig {
        vocab_size: 12,
        embed_dim: 8,
        encoder_layers: 1,
        attention_heads: 2,
        feedforward_dim: 16,
        window,
        label_count: 3,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let doc = LabeledDocument {
        id: "fd".into(),
        text: String::new(),
        doc: TokenizedDocument::from_ids(vec![3, 7, 2, 9, 11, 5, 7], window),
        labels: vec![2, 0],
        gold: None,
    };
    if doc.doc.windows.len() != 2 {
        return Err(format!("expected 2 windows, got {}", doc.doc.windows.len()));
    }
    let docs = [&doc];
    let (_, analytic) = batch_gradient(&model, &docs).map_err(|e| e.to_string())?;
    let grads = analytic.tensors();
    let mut probe = model.clone();
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for (ti, g) in grads.iter().enumerate() {
        for i in 0..g.data.len() {
            let original = probe.params.tensors()[ti].data[i];
            probe.params.tensors_mut()[ti].data[i] = original + EPS;
            let plus = batch_loss(&probe, &docs).map_err(|e| e.to_string())?;
            probe.params.tensors_mut()[ti].data[i] = original - EPS;
            let minus = batch_loss(&probe, &docs).map_err(|e| e.to_string())?;
            probe.params.tensors_mut()[ti].data[i] = original;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = g.data[i];
            // the floor keeps exact zeros (unused embeddings) from dividing by zero
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{i}]", g.name);
            }
        }
    }
    check(
        worst < TOL,
        format!("{checked} parameters, max relative error {worst:.2e} at {worst_at} (tol {TOL:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// 3. Convergence on a separable task; the model is reused by 7 and 8.

struct Trained {
    checkpoint: Checkpoint,
    test: Vec<PatientCourse>,
    evaluation: Evaluation,
    epochs: usize,
}

fn compact(embed_dim: usize, heads: usize) -> Architecture {
    Architecture {
        embed_dim,
        encoder_layers: 1,
        attention_heads: heads,
        feedforward_dim: 2 * embed_dim,
        window: 128,
    }
}

fn fit_config(architecture: Architecture, seed: u64) -> FitConfig {
    FitConfig {
        architecture,
        vocab_size: 5000,
        min_count: 2,
        train: TrainConfig {
            epochs: 10,
            learning_rate: 2e-3,
            batch_size: 16,
            early_stop_patience: 2,
            seed,
            ..TrainConfig::default()
        },
        ..FitConfig::default()
    }
}

fn corpus(profiles: &[ConditionProfile], n: usize, max_chars: usize, seed: u64) -> Vec<PatientCourse> {
    let cfg = GeneratorConfig {
        n_patients: n,
        seed,
        min_chars: 200,
        max_chars,
        ..GeneratorConfig::default()
    };
    generate_corpus(profiles, &cfg).expect("generator config is valid")
}

fn separable_model() -> &'static Result<Trained, String> {
    static MODEL: OnceLock<Result<Trained, String>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = corpus(&default_profiles(), 2700, 800, 1);
        let (val, rest) = data.split_at(200);
        let (test, train) = rest.split_at(500);
        let (checkpoint, history) =
            fit(train, val, &fit_config(compact(64, 4), 1), |_| {}).map_err(|e| e.to_string())?;
        let evaluation = evaluate_checkpoint(
            &checkpoint,
            val,
            test,
            ThresholdChoice::Auto(ThresholdSearch::default()),
            5,
            ZeroSupport::Exclude,
        )
        .map_err(|e| e.to_string())?;
        Ok(Trained {
            checkpoint,
            test: test.to_vec(),
            evaluation,
            epochs: history.epochs.len(),
        })
    })
}

fn criterion_3() -> Outcome {
    let m = separable_model().as_ref().map_err(Clone::clone)?;
    let r = &m.evaluation.report;
    check(
        r.f1_micro >= 0.90 && r.recall_at_10 >= 0.98 && m.epochs <= 10,
        format!(
            "test F1-micro {:.4} (>= 0.90), Recall@10 {:.4} (>= 0.98), {} epochs (<= 10), threshold {:.2}, {} test cases",
            r.f1_micro, r.recall_at_10, m.epochs, m.evaluation.threshold, r.examples
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Lowering the boundary recovers an under-coded secondary diagnosis.

fn criterion_4() -> Outcome {
    let x60 = Code::parse("X60").expect("valid code");
    let mut profiles = default_profiles();
    for p in profiles.iter_mut().filter(|p| p.code == x60) {
        p.base_prevalence = 0.15;
    }
    let data = corpus(&profiles, 10_000, 1200, 1);
    let data = inject_undercoding(data, &UndercodingPolicy::single(x60.clone(), 0.6), 9).map_err(|e| e.to_string())?;
    let (val, rest) = data.split_at(200);
    let (test, pool) = rest.split_at(1500);
    let train = &pool[..8000];
    let (ck, _) = fit(train, val, &fit_config(compact(32, 4), 1), |_| {}).map_err(|e| e.to_string())?;
    let set = predictions(&ck, test).map_err(|e| e.to_string())?;
    let range = CodeRange::single(&x60);
    let curve = calibrate_per_code(&set, &ck.labels, &range, &[0.05, 0.5]).map_err(|e| e.to_string())?;
    let (low, high) = (curve.points[0].detection_rate, curve.points[1].detection_rate);
    let ids: Vec<String> = test.iter().map(|p| p.id.clone()).collect();
    let cases = mine_disagreements(&set, &ids, &ck.labels, &range, 0.1).map_err(|e| e.to_string())?;
    let precision = gold_precision(&cases).unwrap_or(0.0);
    let uncoded_gold = set
        .examples
        .iter()
        .filter(|ex| {
            let i = ck.labels.index_of(&x60).expect("X60 in label space");
            ex.gold.as_ref().is_some_and(|g| g.contains(&i)) && !ex.labels.contains(&i)
        })
        .count();
    check(
        low - high >= 0.20 && precision >= 0.70,
        format!(
            "detection {:.3} at 0.05 vs {:.3} at 0.5 (gain {:.1} pp, need >= 20); mined {} cases at 0.1 with gold precision {:.3} (>= 0.70); {} uncoded gold X60 cases in test",
            low,
            high,
            100.0 * (low - high),
            cases.len(),
            precision,
            uncoded_gold
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. More training data helps, and helps rare codes more.

fn criterion_5() -> Outcome {
    const EPSILON: f64 = 0.02;
    let data = corpus(&default_profiles(), 8700, 1200, 1);
    let (val, rest) = data.split_at(200);
    let (test, pool) = rest.split_at(500);
    let subsets = subsample_training(pool, &[500, 2000, 8000], 3).map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for subset in &subsets {
        let (ck, _) = fit(subset, val, &fit_config(compact(32, 4), 1), |_| {}).map_err(|e| e.to_string())?;
        let eval = evaluate_checkpoint(
            &ck,
            val,
            test,
            ThresholdChoice::Auto(ThresholdSearch::default()),
            5,
            ZeroSupport::Exclude,
        )
        .map_err(|e| e.to_string())?;
        entries.push((subset.len(), eval.report));
    }
    let curve = scaling_curve(&entries, EPSILON);
    let rows = &curve.rows;
    let micro_gain = rows[2].f1_micro - rows[0].f1_micro;
    let macro_gain = rows[2].f1_macro - rows[0].f1_macro;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{}: micro {:.3} macro {:.3}", r.train_size, r.f1_micro, r.f1_macro))
        .collect();
    check(
        curve.is_monotone("f1_micro") && macro_gain > micro_gain,
        format!(
            "{}; micro gain {micro_gain:.3}, macro gain {macro_gain:.3}; non-decreasing within {EPSILON}: {}",
            summary.join(", "),
            curve.is_monotone("f1_micro")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. One removal per filter stage on a hand-built fixture.

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline").join(name)
}

fn read_value(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).expect("fixture exists")).expect("fixture is JSON")
}

fn criterion_6() -> Outcome {
    let input = read_corpus(fixture("corpus.jsonl")).map_err(|e| e.to_string())?;
    let cfg: FilterConfig = serde_json::from_value(read_value("filter.json")).map_err(|e| e.to_string())?;
    let cs = CodeSystem::builtin();
    let (survivors, report) = apply_filters(input.clone(), &cfg, Some(&cs)).map_err(|e| e.to_string())?;
    let expected_survivors = read_corpus(fixture("expected_survivors.jsonl")).map_err(|e| e.to_string())?;
    let report_json = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    if input.len() != 20 {
        return Err(format!("fixture has {} patients", input.len()));
    }
    if report_json != read_value("expected_report.json") {
        return Err(format!("report differs from golden file: {report_json}"));
    }
    if survivors != expected_survivors {
        return Err("survivors differ from golden file".into());
    }
    let per_stage: Vec<usize> = FilterStage::ALL.iter().map(|&s| report.removed_at(s)).collect();
    if per_stage != vec![1; 7] {
        return Err(format!("removals per stage {per_stage:?}"));
    }
    // leaving out the patient meant for a stage must leave that stage idle
    let removals: BTreeMap<String, String> = serde_json::from_value(read_value("expected_removals.json")).map_err(|e| e.to_string())?;
    for &stage in &FilterStage::ALL {
        let key = serde_json::to_value(stage).map_err(|e| e.to_string())?;
        let id = &removals[key.as_str().expect("stage names are strings")];
        let without: Vec<PatientCourse> = input.iter().filter(|p| &p.id != id).cloned().collect();
        let (_, r) = apply_filters(without, &cfg, Some(&cs)).map_err(|e| e.to_string())?;
        if r.removed_at(stage) != 0 || r.total_removed() != 6 {
            return Err(format!("removing {id} did not isolate stage {key}"));
        }
    }
    Ok(format!(
        "7 stages x 1 removal, {} survivors and report match golden files",
        survivors.len()
    ))
}

// ---------------------------------------------------------------------------
// 7. Attributions land on the generator's evidence phrases.

fn top_token_in_phrase(text: &str, span: (usize, usize), phrases: &[String]) -> bool {
    let lower = text.to_lowercase();
    phrases.iter().any(|p| {
        lower
            .match_indices(&p.to_lowercase())
            .any(|(i, m)| i <= span.0 && span.1 <= i + m.len())
    })
}

fn criterion_7() -> Outcome {
    let m = separable_model().as_ref().map_err(Clone::clone)?;
    let ck = &m.checkpoint;
    let profiles = default_profiles();
    let docs = prepare_documents(&m.test, &ck.vocabulary, &ck.labels, ck.tokenizer);
    let threshold = m.evaluation.threshold;
    let mut per_code = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for code in ["E11", "I50", "J44", "C50", "G40"] {
        let code = Code::parse(code).expect("valid code");
        let idx = ck.labels.index_of(&code).ok_or(format!("{code} not in label space"))?;
        let phrases = &profiles.iter().find(|p| p.code == code).expect("profile").evidence_phrases;
        let (mut h, mut t) = (0usize, 0usize);
        for d in &docs {
            let trace = ck.model.predict(&d.doc).map_err(|e| e.to_string())?;
            if trace.confidences[idx] < threshold || !d.labels.contains(&idx) {
                continue;
            }
            t += 1;
            let a = attingrad(&ck.model, &d.doc, idx).map_err(|e| e.to_string())?;
            let best = (0..a.scores.len())
                .max_by(|&x, &y| a.scores[x].total_cmp(&a.scores[y]).then(y.cmp(&x)))
                .expect("non-empty document");
            h += top_token_in_phrase(&d.text, d.doc.char_spans[a.token_indices[best]], phrases) as usize;
        }
        per_code.push(format!("{code} {h}/{t}"));
        hits += h;
        total += t;
    }
    let rate = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    check(
        rate >= 0.80,
        format!("top-1 on evidence phrase in {hits}/{total} = {rate:.3} (>= 0.80); {}", per_code.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 8. The HTTP service returns exactly what the library computes.

fn criterion_8() -> Outcome {
    const TOL: f64 = 1e-9;
    let m = separable_model().as_ref().map_err(Clone::clone)?;
    let ck = m.checkpoint.clone();
    let documents = corpus(&default_profiles(), 50, 800, 77);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let state = AppState::new(ServerConfig {
        checkpoint: Some(ck.clone()),
        code_system: Some(CodeSystem::builtin()),
        corpus: Vec::new(),
        queue_ranges: Vec::new(),
        boundary: http::DEFAULT_BOUNDARY,
        log_path: dir.path().join("log.jsonl"),
    })
    .map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        tokio::spawn(http::serve(listener, Arc::new(state), std::future::pending()));
        let client = reqwest::Client::new();
        let post = |path: &'static str, body: Value| {
            let client = client.clone();
            let url = format!("{base}{path}");
            async move {
                let resp = client.post(url).json(&body).send().await.map_err(|e| e.to_string())?;
                if !resp.status().is_success() {
                    return Err(format!("{path} returned {}", resp.status()));
                }
                resp.json::<Value>().await.map_err(|e| e.to_string())
            }
        };
        let c = ck.labels.len();
        let (mut worst_conf, mut worst_attr, mut explained) = (0.0f64, 0.0f64, 0usize);
        for p in &documents {
            let text = medcode::pipeline::assemble_document(p).text;
            let doc = tokenize(&text, &ck.vocabulary, ck.tokenizer);
            let offline = ck.model.confidences(&doc).map_err(|e| e.to_string())?;
            let order = rank_codes(&offline);
            let online = post("/predict", json!({"text": text, "top_k": c})).await?;
            let suggestions = online["suggestions"].as_array().ok_or("no suggestions")?;
            if suggestions.len() != c {
                return Err(format!("{} suggestions for {c} codes", suggestions.len()));
            }
            for (rank, s) in suggestions.iter().enumerate() {
                let idx = order[rank];
                if s["code"] != ck.labels.code(idx).as_str() || s["rank"] != rank + 1 {
                    return Err(format!("{}: ranking differs at rank {}", p.id, rank + 1));
                }
                worst_conf = worst_conf.max((s["confidence"].as_f64().ok_or("confidence")? - offline[idx]).abs());
            }
            let mut codes = vec![order[0]];
            codes.extend(p.recorded_codes.iter().filter_map(|code| ck.labels.index_of(code)));
            codes.dedup();
            for idx in codes {
                let offline = AttributionMap::new(
                    &attingrad(&ck.model, &doc, idx).map_err(|e| e.to_string())?,
                    &doc,
                    &text,
                    &ck.labels,
                );
                let online = post("/explain", json!({"text": text, "code": ck.labels.code(idx).as_str()})).await?;
                let tokens = online["tokens"].as_array().ok_or("no tokens")?;
                if tokens.len() != offline.tokens.len() || online["normalization"] != offline.normalization {
                    return Err(format!("{}: explanation shape differs", p.id));
                }
                for (t, o) in tokens.iter().zip(&offline.tokens) {
                    if t["start"] != o.start || t["end"] != o.end || t["text"] != o.text.as_str() {
                        return Err(format!("{}: span differs", p.id));
                    }
                    worst_attr = worst_attr.max((t["score"].as_f64().ok_or("score")? - o.score).abs());
                }
                explained += 1;
            }
        }
        check(
            worst_conf <= TOL && worst_attr <= TOL,
            format!(
                "50 documents, {explained} explanations; max |diff| confidence {worst_conf:.1e}, attribution {worst_attr:.1e} (tol {TOL:.0e})"
            ),
        )
    })
}
