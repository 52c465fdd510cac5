//! Property tests for tokenization, annotation, the synthetic generator,
//! hard top-k, VH-word subsampling, checkpoints and config hashing.

use proptest::prelude::*;
use vawi::cli::RunConfig;
use vawi::encoders::{checkpoint, ParamGroup, ParameterPartition};
use vawi::extraction::{extract_sbs, subsample_selection, top_k_hard, VhSelection};
use vawi::rng::{Purpose, RngStream, StreamKey};
use vawi::tensor::Tensor;
use vawi::text::{annotate, content_words, generate_synthetic, tokenize, Lexicon, PosTag, Stopwords, SyntheticTaskSpec};

/// Argsort oracle, independent of `top_k_hard`'s sort: repeatedly take the
/// first maximum among the remaining candidates.
fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in (0..scores.len()).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        out.push(best.unwrap());
    }
    out.sort_unstable();
    out
}

proptest! {
    #[test]
    fn tokenized_fields_align(raw in "[a-zA-Z0-9 .,!?'é-]{0,60}") {
        let t = annotate(&tokenize(&raw), &Lexicon::bundled(), &Stopwords::bundled());
        prop_assert_eq!(t.tokens.len(), t.offsets.len());
        prop_assert_eq!(t.tokens.len(), t.pos_tags.len());
        prop_assert_eq!(t.tokens.len(), t.stopword_flags.len());
        for w in t.offsets.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        for i in 0..t.len() {
            let (s, e) = t.offsets[i];
            prop_assert!(s < e);
            prop_assert_eq!(t.surface(i).to_lowercase(), t.tokens[i].clone());
        }
    }

    #[test]
    fn sbs_is_exactly_the_content_filter(raw in "[a-z ]{0,50}") {
        let t = annotate(&tokenize(&raw), &Lexicon::bundled(), &Stopwords::bundled());
        let sel = extract_sbs(&t);
        let expected: Vec<usize> = (0..t.len())
            .filter(|&i| (t.pos_tags[i] == PosTag::Noun || t.pos_tags[i] == PosTag::Adj) && !t.stopword_flags[i])
            .collect();
        prop_assert_eq!(&sel.indices, &expected);
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(sel.words.len(), sel.indices.len());
    }

    #[test]
    fn top_k_matches_oracle(scores in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.5]), 1..12), k in 1usize..14) {
        let got = top_k_hard(&scores, k).unwrap();
        prop_assert_eq!(&got, &top_k_oracle(&scores, k));
        prop_assert_eq!(got.len(), k.min(scores.len()));
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn subsampling_keeps_rounded_count_in_order(n in 0usize..12, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let sel = VhSelection {
            indices: (0..n).map(|i| 2 * i).collect(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            ..VhSelection::default()
        };
        let mut rng = RngStream::new(seed, StreamKey::once(Purpose::Subsample(0)));
        let kept = subsample_selection(&sel, fraction, &mut rng).unwrap();
        prop_assert_eq!(kept.len(), (fraction * n as f64).round() as usize);
        prop_assert!(kept.indices.windows(2).all(|w| w[0] < w[1]));
        for (i, w) in kept.indices.iter().zip(&kept.words) {
            prop_assert_eq!(w.clone(), format!("w{}", i / 2));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(values in prop::collection::vec(-10.0f64..10.0, 1..20), rows in 1usize..4) {
        let cols = values.len();
        let mut p = ParameterPartition::new();
        p.insert("a.weight", ParamGroup::Plm, Tensor::new(vec![1, cols], values.clone()).unwrap()).unwrap();
        p.insert("b.bias", ParamGroup::Ref, Tensor::full(&[rows, 2], 0.25)).unwrap();
        p.set_trainable(ParamGroup::Vlp, false);
        let first = checkpoint::to_bytes(&p).unwrap();
        let loaded = checkpoint::from_bytes(&first).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), first);
        for (a, b) in loaded.get("a.weight").unwrap().data().iter().zip(&values) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn config_hash_ignores_key_order(k in 1usize..8, lr in 1e-5f64..1e-1, epochs in 0usize..20) {
        let forward = format!(r#"{{"injection": {{"k": {k}, "strategy": "vabs"}}, "train": {{"lr": {lr}, "epochs": {epochs}}}}}"#);
        let backward = format!(r#"{{"train": {{"epochs": {epochs}, "lr": {lr}}}, "injection": {{"strategy": "vabs", "k": {k}}}}}"#);
        let a: RunConfig = serde_json::from_str(&forward).unwrap();
        let b: RunConfig = serde_json::from_str(&backward).unwrap();
        prop_assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_splits_are_disjoint_and_labels_valid(seed in any::<u64>()) {
        let spec = SyntheticTaskSpec { train_size: 60, test_size: 30, ..SyntheticTaskSpec::default() };
        let task = generate_synthetic(&spec, seed).unwrap();
        prop_assert!(task.train_vocab.is_disjoint(&task.test_vocab));
        for ex in &task.test {
            for w in content_words(ex) {
                prop_assert!(!task.train_vocab.contains(w), "{w} leaked into test");
            }
        }
        for ex in task.train.iter().chain(&task.test) {
            prop_assert!(ex.label.class().unwrap() < spec.attribute_class_count);
            prop_assert_eq!(ex.text.len(), spec.words_per_sentence);
        }
    }
}
