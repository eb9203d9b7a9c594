use attconv::gradcheck::grad_check;
use attconv::model::with_view;
use attconv::text::{build_embeddings, make_batches, Batch, EncodedExample, Vocabulary, PAD};
use attconv::{ContextMode, Graph, MatchMethod, Model, ModelConfig, SelfMode, TrainConfig, Variant};
use proptest::prelude::*;

const VOCAB: usize = 12;

fn vocab(separator: bool) -> Vocabulary {
    let mut v = Vocabulary::new();
    for i in 0..VOCAB {
        v.insert(&format!("w{i}"));
    }
    if separator {
        v.ensure_separator();
    }
    v
}

fn model_with(config: ModelConfig) -> Model {
    let v = vocab(config.context_mode == ContextMode::MultiConc);
    let emb = build_embeddings(&v, None, config.d, config.seed).unwrap();
    let labels = (0..config.num_classes).map(|k| format!("c{k}")).collect();
    Model::new(config, v, labels, emb).unwrap()
}

fn model(variant: Variant, mode: ContextMode, d: usize, seed: u64) -> Model {
    let mut c = ModelConfig::new(variant, mode, d, 3);
    c.seed = seed;
    model_with(c)
}

fn ids(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..2 + VOCAB, len)
}

fn multi_example() -> impl Strategy<Value = EncodedExample> {
    (ids(1..7), prop::collection::vec(ids(1..6), 3), 0usize..3).prop_map(|(text, contexts, label)| EncodedExample {
        text,
        contexts,
        label,
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn context_wise_ignores_order_and_duplicates(ex in multi_example(), seed in 0u64..1000) {
        for variant in Variant::ALL {
            let m = model(variant, ContextMode::MultiWise, 4, seed);
            let base = bits(&m.predict(&ex).unwrap());
            let mut reversed = ex.clone();
            reversed.contexts.reverse();
            prop_assert_eq!(&bits(&m.predict(&reversed).unwrap()), &base);
            let mut dup = ex.clone();
            dup.contexts.push(ex.contexts[1].clone());
            dup.contexts.insert(0, ex.contexts[2].clone());
            prop_assert_eq!(&bits(&m.predict(&dup).unwrap()), &base);
        }
    }

    #[test]
    fn concatenation_order_keeps_attentive_context(ex in multi_example(), seed in 0u64..1000) {
        let m = model(Variant::Light, ContextMode::MultiConc, 4, seed);
        let contexts = |e: &EncodedExample| {
            with_view(e, |v| {
                let mut g = Graph::new(&m.store);
                let enc = m.encode(&mut g, v).unwrap();
                g.value(enc.attention[0].attended.context).as_matrix()
            })
        };
        let mut rotated = ex.clone();
        rotated.contexts.rotate_left(1);
        prop_assert!(contexts(&ex).max_abs_diff(&contexts(&rotated)) <= 1e-12);
    }

    #[test]
    fn every_variant_outputs_a_distribution(ex in multi_example(), seed in 0u64..1000) {
        for variant in Variant::ALL {
            for mode in [ContextMode::Intra, ContextMode::Single, ContextMode::MultiWise, ContextMode::MultiConc] {
                let m = model(variant, mode, 3, seed);
                let mut e = ex.clone();
                match mode {
                    ContextMode::Intra => e.contexts.clear(),
                    ContextMode::Single => e.contexts.truncate(1),
                    _ => {}
                }
                let p = m.predict(&e).unwrap();
                prop_assert_eq!(p.len(), 3);
                prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batches_partition_the_shuffled_corpus(n in 1usize..80, size in 1usize..20, seed in any::<u64>()) {
        let corpus: Vec<EncodedExample> = (0..n)
            .map(|i| EncodedExample { text: vec![2 + i % 5; 1 + i % 4], contexts: vec![], label: i % 2 })
            .collect();
        let batches = make_batches(&corpus, size, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        prop_assert!(batches.iter().all(|b| b.len() <= size && !b.is_empty()));
        for b in &batches {
            for (r, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.example(r).text, &corpus[i].text[..]);
            }
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn vocabulary_round_trips(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
        let mut v = Vocabulary::new();
        for w in &words {
            v.insert(w);
        }
        let encoded = v.encode(&words);
        prop_assert!(encoded.iter().all(|&i| i >= 2));
        prop_assert_eq!(v.decode(&encoded), words);
    }
}

#[test]
fn padded_context_positions_get_no_attention() {
    let m = model(Variant::Light, ContextMode::Single, 4, 2);
    let examples = vec![
        EncodedExample {
            text: vec![2, 3, 4],
            contexts: vec![vec![5, 6]],
            label: 0,
        },
        EncodedExample {
            text: vec![7, 8],
            contexts: vec![vec![9, 10, 11, 12, 13]],
            label: 1,
        },
    ];
    let batch = Batch::from_examples(&examples, &[0, 1]);
    let view = batch.example(0);
    assert_eq!(view.contexts[0].0.len(), 5);
    let mut g = Graph::new(&m.store);
    let enc = m.encode(&mut g, &view).unwrap();
    let w = g.value(enc.attention[0].attended.weights).as_matrix();
    for i in 0..w.rows() {
        assert_eq!(&w.row(i)[2..], &[0.0, 0.0, 0.0]);
        assert!((w.row(i)[0] + w.row(i)[1] - 1.0).abs() < 1e-12);
    }
    let padded = m.probabilities(&view).unwrap();
    assert_eq!(bits(&padded), bits(&m.predict(&examples[0]).unwrap()));
}

#[test]
fn pad_row_stays_zero_through_training() {
    let mut m = model(Variant::Advanced, ContextMode::Single, 4, 9);
    let data: Vec<EncodedExample> = (0..24)
        .map(|i| EncodedExample {
            text: (0..1 + i % 5).map(|k| 2 + (i + k) % VOCAB).collect(),
            contexts: vec![(0..1 + i % 3).map(|k| 2 + (3 * i + k) % VOCAB).collect()],
            label: i % 3,
        })
        .collect();
    let config = TrainConfig {
        batch_size: 5,
        epochs: 4,
        ..TrainConfig::default()
    };
    attconv::train(&mut m, &data, None, &config, |_| {}).unwrap();
    let table = m.store.get(m.embedding);
    assert!(table.row(PAD).iter().all(|&v| v == 0.0));
    assert!(table.row(2).iter().any(|&v| v != 0.0));
}

fn check(config: ModelConfig, ex: &EncodedExample) {
    let m = model_with(config.clone());
    let report = grad_check(
        &m.store,
        |g| with_view(ex, |v| m.example_loss(g, v).map(|(l, _)| l)),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(
        report.passed(),
        "{:?} {:?}: {} at {}",
        config.variant,
        config.context_mode,
        report.max_rel_error(),
        report.worst().unwrap().name
    );
}

#[test]
fn gradients_match_finite_differences_for_every_configuration() {
    let ex = EncodedExample {
        text: vec![2, 5, 3, 9, 4],
        contexts: vec![vec![6, 2, 11, 7, 3, 8], vec![10, 4, 12, 5, 2, 13]],
        label: 1,
    };
    for variant in Variant::ALL {
        for mode in [
            ContextMode::Intra,
            ContextMode::Single,
            ContextMode::MultiWise,
            ContextMode::MultiConc,
        ] {
            let mut e = ex.clone();
            match mode {
                ContextMode::Intra => e.contexts.clear(),
                ContextMode::Single => e.contexts.truncate(1),
                _ => {}
            }
            let mut c = ModelConfig::new(variant, mode, 3, 3);
            c.seed = 17;
            check(c, &e);
        }
    }
}

#[test]
fn gradients_match_for_every_matching_method_and_self_mode() {
    let ex = EncodedExample {
        text: vec![2, 5, 3, 9, 4, 7],
        contexts: vec![],
        label: 2,
    };
    for variant in [Variant::Light, Variant::Advanced, Variant::NoConv] {
        for method in [MatchMethod::Dot, MatchMethod::Bilinear, MatchMethod::Additive] {
            for self_mode in [SelfMode::IncludeSelf, SelfMode::ExcludeSelf] {
                let mut c = ModelConfig::new(variant, ContextMode::Intra, 3, 3);
                c.match_method = method;
                c.self_mode = self_mode;
                c.seed = 5;
                check(c, &ex);
            }
        }
    }
}
