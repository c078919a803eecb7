use std::collections::HashSet;

use medcode::analysis::{code_occurrences, mine_disagreements, recall_by_role};
use medcode::codesystem::{Code, CodeRange, LabelSpace};
use medcode::corpusgen::{
    default_profiles, expected_frequencies, generate_corpus, inject_undercoding, GeneratorConfig, PatientCourse,
    UndercodingPolicy,
};
use medcode::explain::attingrad;
use medcode::metrics::{
    f1_scores, per_code_confusion, recall_at_k, tune_threshold, Example, PredictionSet, ThresholdSearch, ZeroSupport,
};
use medcode::model::{CodingModel, ModelConfig};
use medcode::pipeline::{apply_filters, assemble_document, split_corpus, FilterConfig, FilterStage};
use medcode::textprep::{TokenizedDocument, PAD_ID};
use medcode::trainer::{batch_gradient, LabeledDocument};
use proptest::prelude::*;

fn small_corpus(n: usize, seed: u64) -> Vec<PatientCourse> {
    let cfg = GeneratorConfig {
        n_patients: n,
        seed,
        min_chars: 100,
        max_chars: 600,
        ..GeneratorConfig::default()
    };
    generate_corpus(&default_profiles(), &cfg).unwrap()
}

fn tiny(seed: u64, window: usize) -> CodingModel {
    CodingModel::init(ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        encoder_layers: 1,
        attention_heads: 2,
        feedforward_dim: 8,
        window,
        label_count: 3,
        seed,
    })
    .unwrap()
}

fn prediction_set() -> impl Strategy<Value = PredictionSet> {
    (1usize..=8).prop_flat_map(|codes| {
        let example = (
            prop::collection::vec(0u8..=20, codes),
            prop::collection::vec(any::<bool>(), codes),
        )
            .prop_map(move |(conf, mask)| {
                let mut labels: Vec<usize> = (0..codes).filter(|&c| mask[c]).collect();
                if labels.is_empty() {
                    labels.push(codes - 1);
                }
                Example::new(conf.into_iter().map(|v| v as f64 / 20.0).collect(), labels)
            });
        prop::collection::vec(example, 1..=60).prop_map(move |ex| PredictionSet::new(codes, ex).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recorded_codes_are_gold_subsets(seed in 0u64..1000, drop in 0.0f64..=1.0) {
        let corpus = small_corpus(60, seed);
        let x60 = Code::parse("X60").unwrap();
        let policy = UndercodingPolicy::single(x60, drop);
        let Ok(injected) = inject_undercoding(corpus, &policy, seed) else {
            // no patient carries X60
            return Ok(());
        };
        for p in &injected {
            prop_assert!(p.recorded_codes.iter().all(|c| p.gold_codes.contains(c)));
            prop_assert!(p.recorded_codes.contains(&p.gold_codes[0]));
        }
    }

    #[test]
    fn generation_is_pure(seed in 0u64..1000) {
        prop_assert_eq!(small_corpus(20, seed), small_corpus(20, seed));
    }

    #[test]
    fn conditions_carry_an_evidence_phrase(seed in 0u64..1000) {
        let profiles = default_profiles();
        for p in small_corpus(30, seed) {
            for code in &p.gold_codes {
                let profile = profiles.iter().find(|pr| &pr.code == code).unwrap();
                prop_assert!(profile.evidence_phrases.iter().any(|ph| p.notes_text.contains(ph.as_str())));
            }
        }
    }

    #[test]
    fn refiltering_only_touches_rare_categories(seed in 0u64..1000) {
        let cfg = FilterConfig { min_category_count: 3, max_chars: 500, ..FilterConfig::default() };
        let (once, _) = apply_filters(small_corpus(80, seed), &cfg, None).unwrap();
        let (_, report) = apply_filters(once, &cfg, None).unwrap();
        prop_assert!(report.category_counts_recomputed);
        for stage in FilterStage::ALL {
            if stage != FilterStage::RareCategory {
                prop_assert_eq!(report.removed_at(stage), 0);
            }
        }
    }

    #[test]
    fn splits_partition_the_corpus(seed in 0u64..1000, n in 10usize..80) {
        let corpus = small_corpus(n, seed);
        let ids: HashSet<String> = corpus.iter().map(|p| p.id.clone()).collect();
        let parts = split_corpus(corpus, (0.6, 0.2, 0.2), seed).unwrap();
        let mut seen = HashSet::new();
        for part in &parts {
            for p in part {
                prop_assert!(seen.insert(p.id.clone()));
            }
        }
        prop_assert_eq!(seen, ids);
    }

    #[test]
    fn confidences_are_open_unit_and_deterministic(seed in 0u64..50, ids in prop::collection::vec(1u32..20, 1..20)) {
        let model = tiny(seed, 4);
        let doc = TokenizedDocument::from_ids(ids, 4);
        let a = model.predict(&doc).unwrap();
        let b = model.predict(&doc).unwrap();
        prop_assert_eq!(&a.confidences, &b.confidences);
        prop_assert!(a.confidences.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn windows_are_encoded_independently(ids in prop::collection::vec(1u32..20, 5..12), replacement in 1u32..20) {
        let model = tiny(3, 4);
        let doc = TokenizedDocument::from_ids(ids.clone(), 4);
        let mut edited_ids = ids;
        edited_ids[0] = replacement;
        let edited = TokenizedDocument::from_ids(edited_ids, 4);
        let a = model.encode(&doc).unwrap();
        let b = model.encode(&edited).unwrap();
        for (t, &(w, _)) in a.positions.iter().enumerate() {
            if w > 0 {
                prop_assert_eq!(a.embeddings.row(t), b.embeddings.row(t));
            }
        }
    }

    #[test]
    fn attributions_skip_pad_and_sum_to_one(ids in prop::collection::vec(1u32..20, 1..15), code in 0usize..3) {
        let model = tiny(7, 4);
        let doc = TokenizedDocument::from_ids(ids, 4);
        let padded = doc.windows.iter().flatten().filter(|&&t| t == PAD_ID).count();
        let a = attingrad(&model, &doc, code).unwrap();
        prop_assert_eq!(a.scores.len() + padded, doc.windows.len() * 4);
        prop_assert!(a.token_indices.iter().all(|&i| doc.token_ids[i] != PAD_ID));
        prop_assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_accumulation_is_order_independent(seed in 0u64..20, rotate in 1usize..5) {
        let model = tiny(seed, 4);
        let docs: Vec<LabeledDocument> = (0..6u32)
            .map(|i| LabeledDocument {
                id: i.to_string(),
                text: String::new(),
                doc: TokenizedDocument::from_ids((0..3 + i).map(|t| 1 + (t * 7 + i) % 19).collect(), 4),
                labels: vec![(i % 3) as usize],
                gold: None,
            })
            .collect();
        let refs: Vec<&LabeledDocument> = docs.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rotate);
        let (la, ga) = batch_gradient(&model, &refs).unwrap();
        let (lb, gb) = batch_gradient(&model, &rotated).unwrap();
        prop_assert!((la - lb).abs() <= 1e-12);
        for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
            for (p, q) in x.data.iter().zip(y.data) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recall_at_k_is_monotone(set in prediction_set()) {
        let values: Vec<f64> = (1..=set.code_count + 1).map(|k| recall_at_k(&set, k)).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(values[set.code_count - 1], 1.0);
    }

    #[test]
    fn tuned_threshold_beats_one_half(set in prediction_set()) {
        let t = tune_threshold(&set, ThresholdSearch::default()).unwrap();
        let tuned = f1_scores(&set, t, ZeroSupport::Exclude).micro;
        prop_assert!(tuned >= f1_scores(&set, 0.5, ZeroSupport::Exclude).micro);
        let exact = tune_threshold(&set, ThresholdSearch::Exact).unwrap();
        prop_assert!(f1_scores(&set, exact, ZeroSupport::Exclude).micro >= tuned - 1e-12);
    }

    #[test]
    fn confusion_counts_are_consistent(set in prediction_set(), t in 0.0f64..=1.0) {
        let counts = per_code_confusion(&set, t);
        for (c, k) in counts.iter().enumerate() {
            let support = set.examples.iter().filter(|ex| ex.labels.contains(&c)).count();
            prop_assert_eq!(k.tp + k.fn_, support);
        }
        let pooled_tp: usize = set
            .examples
            .iter()
            .map(|ex| ex.labels.iter().filter(|&&c| ex.confidences[c] >= t).count())
            .sum();
        prop_assert_eq!(counts.iter().map(|k| k.tp).sum::<usize>(), pooled_tp);
    }

    #[test]
    fn role_recalls_pool_to_overall(set in prediction_set(), k in 1usize..10) {
        let roles = recall_by_role(&set, k);
        let hits = roles.primary.unwrap_or(0.0) * roles.primary_pairs as f64
            + roles.secondary.unwrap_or(0.0) * roles.secondary_pairs as f64;
        let pooled = hits / (roles.primary_pairs + roles.secondary_pairs) as f64;
        prop_assert!((pooled - recall_at_k(&set, k)).abs() < 1e-12);
    }
}

#[test]
fn secondary_shares_match_configuration() {
    let profiles = default_profiles();
    let n = 4000;
    let corpus = small_corpus(n, 11);
    let occ = code_occurrences(&corpus);
    for (profile, (freq, share)) in profiles.iter().zip(expected_frequencies(&profiles)) {
        let o = occ[&profile.code];
        let presence = o.count as f64 / n as f64;
        let sigma = (freq * (1.0 - freq) / n as f64).sqrt();
        assert!((presence - freq).abs() <= 3.0 * sigma + 1e-12, "{}: presence {presence} vs {freq}", profile.code);
        let sigma = (share * (1.0 - share) / o.count as f64).sqrt();
        assert!(
            (o.secondary_share() - share).abs() <= 3.0 * sigma + 1e-12,
            "{}: share {} vs {share}",
            profile.code,
            o.secondary_share()
        );
    }
}

#[test]
fn mining_is_reproducible() {
    let corpus = small_corpus(50, 5);
    let labels = LabelSpace::new(default_profiles().into_iter().map(|p| p.code));
    let set_for = |seed: u64| {
        let model = CodingModel::init(ModelConfig {
            vocab_size: 2,
            embed_dim: 8,
            encoder_layers: 1,
            attention_heads: 2,
            feedforward_dim: 8,
            window: 16,
            label_count: labels.len(),
            seed,
        })
        .unwrap();
        let examples = corpus
            .iter()
            .map(|p| {
                let n = assemble_document(p).text.split_whitespace().count().max(1);
                let doc = TokenizedDocument::from_ids(vec![1; n.min(40)], 16);
                let labels: Vec<usize> = p.recorded_codes.iter().filter_map(|c| labels.index_of(c)).collect();
                Example::new(model.confidences(&doc).unwrap(), labels)
            })
            .collect();
        PredictionSet::new(labels.len(), examples).unwrap()
    };
    let ids: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
    let range: CodeRange = "I10-I50".parse().unwrap();
    let a = mine_disagreements(&set_for(4), &ids, &labels, &range, 0.3).unwrap();
    let b = mine_disagreements(&set_for(4), &ids, &labels, &range, 0.3).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].confidence >= w[1].confidence));
}
