//! Extraction, augmentation, injection and task-forward contracts checked
//! against independent oracles.

mod common;

use common::{forward, item, model, task, top_k_oracle};
use vawi::augmentation::{
    apply_soft_weights, compose_prefix, encode_aligned, random_noise_source, reformulate, AugmentationSource,
};
use vawi::autodiff::Tape;
use vawi::diagnostics::{check_lbs_extractor, check_reformulation, GRADCHECK_TOLERANCE};
use vawi::encoders::{ParamGroup, ParameterPartition};
use vawi::extraction::{
    eos_attention_scores, extract_sbs, extract_vabs, extractor_scores, names as extractor, select_lbs, Strategy,
    VhSelection, WeightMode,
};
use vawi::gradcheck::{finite_diff_check, GradCheckOptions};
use vawi::injection::{
    evaluate, inject_embeddings, train, InjectionConfig, InsertionPosition, Regime, StepKey, TrainConfig, HEAD_B,
    HEAD_W,
};
use vawi::rng::{Purpose, RngStream, StreamKey};
use vawi::tensor::Tensor;
use vawi::text::{annotate, tokenize, Label, LabeledExample, Lexicon, Stopwords, TaskKind};

fn example(raw: &str, label: Label) -> LabeledExample {
    LabeledExample::new(raw, label, &Lexicon::bundled(), &Stopwords::bundled())
}

fn train_step() -> StepKey {
    StepKey::Train { epoch: 0, batch: 0 }
}

#[test]
fn vabs_scores_match_reaveraged_attention_maps() {
    let t = task(50, 0, 3);
    let m = model(&t, 3, true);
    for ex in &t.train {
        let sel = extract_vabs(&ex.text, &m.vl, &m.params, 3).unwrap();
        let out = m.vl.encode(&m.params, &ex.text.tokens).unwrap();
        let eos = out.attention_maps[0][0].rows() - 1;
        let maps: Vec<&Tensor> = out.attention_maps.iter().flatten().collect();
        let oracle: Vec<f64> = (0..ex.text.len())
            .map(|j| maps.iter().map(|a| a.get(eos, j)).sum::<f64>() / maps.len() as f64)
            .collect();
        let scores = sel.scores.as_ref().unwrap();
        for (s, o) in scores.iter().zip(&oracle) {
            assert!((s - o).abs() <= 1e-12);
        }
        assert_eq!(sel.indices, top_k_oracle(&oracle, 3));
    }
}

#[test]
fn vabs_single_token_and_k_contracts() {
    let t = task(10, 0, 0);
    let m = model(&t, 0, true);
    let text = annotate(&tokenize("apple"), &Lexicon::bundled(), &Stopwords::bundled());
    let sel = extract_vabs(&text, &m.vl, &m.params, 1).unwrap();
    assert_eq!(sel.indices, vec![0]);
    // the only non-EOS key holds the whole non-EOS share
    let out = m.vl.encode(&m.params, &text.tokens).unwrap();
    let raw = eos_attention_scores(&out, 2);
    let share = raw[0] / raw[..1].iter().sum::<f64>();
    assert_eq!(share, 1.0);
    assert!((raw[0] + raw[1] - 1.0).abs() < 1e-9);
    assert_eq!(sel.scores.unwrap()[0], raw[0]);

    assert!(extract_vabs(&text, &m.vl, &m.params, 0).unwrap_err().is_usage());
    let long = annotate(&tokenize("red apple on the round table"), &Lexicon::bundled(), &Stopwords::bundled());
    assert_eq!(extract_vabs(&long, &m.vl, &m.params, 2).unwrap().len(), 2);
    assert_eq!(extract_vabs(&long, &m.vl, &m.params, 10).unwrap().len(), long.len());
}

#[test]
fn sbs_reference_examples() {
    let sel = extract_sbs(&example("He is eating a green apple", Label::Class(0)).text);
    assert_eq!(sel.words, ["green", "apple"]);
    assert!(extract_sbs(&example("it is on the", Label::Class(0)).text).is_empty());
    assert_eq!(extract_sbs(&example("red red red", Label::Class(0)).text).indices, [0, 1, 2]);
}

#[test]
fn lbs_near_zero_temperature_is_hard_top_k() {
    let mut draw = RngStream::new(9, StreamKey::once(Purpose::Check(1)));
    for trial in 0..1000u32 {
        let n = 1 + draw.below(12);
        let k = 1 + draw.below(5);
        let scores = draw.normal_tensor(&[n, 1], 1.0);
        let text = tokenize(&vec!["w"; n].join(" "));
        let tape = Tape::new();
        let s = tape.constant(scores.clone());
        let mut rng = RngStream::new(trial as u64, StreamKey::once(Purpose::Gumbel(trial)));
        let g = select_lbs(&text, &s, k, 1e-8, WeightMode::StraightThrough, &mut rng).unwrap();
        assert_eq!(g.selection.indices, top_k_oracle(scores.data(), k), "trial {trial}");
        let hard: Vec<f64> = (0..n).map(|i| g.selection.indices.contains(&i) as u8 as f64).collect();
        assert_eq!(g.weights.value().data(), &hard[..]);
    }
}

#[test]
fn lbs_zero_temperature_is_deterministic() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![4, 1], vec![0.3, -1.0, 2.0, 0.3]).unwrap());
    let text = tokenize("a b c d");
    let picks: Vec<Vec<usize>> = (0..5)
        .map(|seed| {
            let mut rng = RngStream::new(seed, StreamKey::once(Purpose::Gumbel(0)));
            select_lbs(&text, &s, 2, 0.0, WeightMode::Relaxed, &mut rng).unwrap().selection.indices
        })
        .collect();
    assert!(picks.iter().all(|p| p == &[0, 2]));
}

#[test]
fn rewarding_a_token_pushes_its_score_up() {
    let t = task(10, 0, 1);
    let m = model(&t, 1, true);
    let ex = &t.train[0];
    let n = ex.text.len();
    let ids: Vec<usize> = [extractor::W1, extractor::B1, extractor::W2, extractor::B2]
        .iter()
        .map(|name| m.params.id(name).unwrap())
        .collect();

    let score_of = |values: &[Tensor]| -> Vec<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let overrides: Vec<_> = ids.iter().copied().zip(leaves.iter().copied()).collect();
        let bound = m.params.bind_with(&tape, &overrides);
        let plm = m.plm.forward(&bound, &ex.text.tokens).unwrap().final_states;
        let vl = m.vl.forward(&bound, &ex.text.tokens).unwrap().final_states.slice_rows(0, n).unwrap();
        let scores = extractor_scores(&bound, &plm, &vl).unwrap();
        let values = scores.value().data().to_vec();
        values
    };
    let values: Vec<Tensor> = ids.iter().map(|&i| m.params.entries()[i].tensor.clone()).collect();
    let scores = score_of(&values);
    // reward a token outside the current top-2
    let chosen = top_k_oracle(&scores, 2);
    let j = (0..n).find(|i| !chosen.contains(i)).unwrap();

    // analytic gradient of L = -w_j through the relaxed weights
    let tape = Tape::new();
    let leaves: Vec<_> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let overrides: Vec<_> = ids.iter().copied().zip(leaves.iter().copied()).collect();
    let bound = m.params.bind_with(&tape, &overrides);
    let plm = m.plm.forward(&bound, &ex.text.tokens).unwrap().final_states;
    let vl = m.vl.forward(&bound, &ex.text.tokens).unwrap().final_states.slice_rows(0, n).unwrap();
    let s = extractor_scores(&bound, &plm, &vl).unwrap();
    let mut rng = RngStream::new(0, StreamKey::once(Purpose::Gumbel(0)));
    let g = select_lbs(&ex.text, &s, 2, 0.0, WeightMode::StraightThrough, &mut rng).unwrap();
    tape.backward(g.weights.pick(j).unwrap().scale(-1.0)).unwrap();
    let grads: Vec<Tensor> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    // finite-difference ds_j/dθ; a descent step along -dL/dθ must raise s_j
    let eps = 1e-5;
    let mut alignment = 0.0;
    let mut probe = values.clone();
    for (t_idx, grad) in grads.iter().enumerate() {
        for c in 0..grad.len() {
            let orig = probe[t_idx].data()[c];
            probe[t_idx].data_mut()[c] = orig + eps;
            let plus = score_of(&probe)[j];
            probe[t_idx].data_mut()[c] = orig - eps;
            let minus = score_of(&probe)[j];
            probe[t_idx].data_mut()[c] = orig;
            alignment += -grad.data()[c] * (plus - minus) / (2.0 * eps);
        }
    }
    assert!(alignment > 0.0, "descent direction lowers the rewarded score: {alignment}");
}

#[test]
fn aligned_encoding_contracts() {
    let t = task(10, 0, 2);
    let m = model(&t, 2, true);
    let sel = VhSelection {
        indices: vec![4, 5],
        words: vec!["green".into(), "apple".into()],
        ..VhSelection::default()
    };
    let prefix = compose_prefix(&sel).unwrap();
    let a = encode_aligned(&prefix, &m.vl, &m.params).unwrap();
    assert_eq!(a.len(), 7);
    assert_eq!(a.vh_token_spans, [(4, 5), (5, 6)]);
    assert!(a.vh_token_spans.iter().all(|&(s, e)| s < e && e <= a.len()));
    assert_eq!(encode_aligned(&prefix, &m.vl, &m.params).unwrap(), a);
}

#[test]
fn query_depends_only_on_position() {
    let t = task(10, 0, 4);
    let m = model(&t, 4, true);
    let frozen = m.params.clone();
    let tape = Tape::new();
    let bound = frozen.bind(&tape);
    let q = |words: &[&str]| {
        let sel = VhSelection {
            indices: (0..words.len()).collect(),
            words: words.iter().map(|w| w.to_string()).collect(),
            ..VhSelection::default()
        };
        let a = encode_aligned(&compose_prefix(&sel).unwrap(), &m.vl, &m.params).unwrap();
        let r = reformulate(&bound, &tape.constant(a.states), words.len()).unwrap();
        (*r.query.value()).clone()
    };
    assert_eq!(q(&["green", "apple"]), q(&["round", "table"]));
    assert_ne!(q(&["green", "apple"]), q(&["green", "apple", "table"]).slice_rows(1, 3).unwrap());
}

#[test]
fn reformulation_and_extractor_gradchecks() {
    let t = task(10, 0, 5);
    let m = model(&t, 5, true);
    let ex = t.train.iter().find(|e| !extract_sbs(&e.text).is_empty()).unwrap();
    let opts = GradCheckOptions::default();
    let r = check_reformulation(&m, ex, &opts).unwrap();
    assert!(r.passed && r.max_rel_err < GRADCHECK_TOLERANCE, "{r:?}");
    let l = check_lbs_extractor(&m, ex, 3, 1.0, &opts).unwrap();
    assert!(l.passed, "{l:?}");
}

#[test]
fn soft_weight_gradient_is_row_inner_product() {
    let mut rng = RngStream::new(2, StreamKey::once(Purpose::Check(2)));
    let rows = rng.normal_tensor(&[3, 4], 1.0);
    let weights = Tensor::new(vec![3, 1], vec![0.2, 1.0, 0.7]).unwrap();
    let upstream = rng.normal_tensor(&[3, 4], 1.0);

    let tape = Tape::new();
    let h = tape.leaf(rows.clone(), true);
    let w = tape.leaf(weights.clone(), true);
    let out = apply_soft_weights(&h, &w).unwrap();
    tape.backward(out.mul(&tape.constant(upstream.clone())).unwrap().sum()).unwrap();
    let gw = w.grad().unwrap();
    for j in 0..3 {
        let inner: f64 = (0..4).map(|c| upstream.get(j, c) * rows.get(j, c)).sum();
        assert!((gw.data()[j] - inner).abs() < 1e-12);
    }
    let report = finite_diff_check(
        |tape, v| Ok(apply_soft_weights(&v[0], &v[1])?.mul(&tape.constant(upstream.clone()))?.sum()),
        &mut [rows.clone(), weights],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");

    let ones = tape.constant(Tensor::full(&[3, 1], 1.0));
    let hc = tape.constant(rows.clone());
    assert_eq!(*apply_soft_weights(&hc, &ones).unwrap().value(), rows);
    let zero_mid = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, 1.0]).unwrap());
    assert!(apply_soft_weights(&hc, &zero_mid).unwrap().value().row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn noise_rows_are_centered() {
    let positions: Vec<usize> = (0..1000).collect();
    let mut rng = RngStream::new(0, StreamKey::once(Purpose::Noise(0)));
    let va = random_noise_source(&positions, 100, &mut rng).unwrap();
    assert_eq!(va.rows.shape(), [1000, 100]);
    assert_eq!(va.source, AugmentationSource::RandomNoise);
    let n = va.rows.len() as f64;
    let mean = va.rows.sum() / n;
    let sigma = 0.02 / n.sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    let mut again = RngStream::new(0, StreamKey::once(Purpose::Noise(0)));
    assert_eq!(random_noise_source(&positions, 100, &mut again).unwrap(), va);
}

#[test]
fn injection_matches_index_oracle() {
    let tape = Tape::new();
    let mut rng = RngStream::new(1, StreamKey::once(Purpose::Check(3)));
    let words = rng.normal_tensor(&[5, 3], 1.0);
    let rows = rng.normal_tensor(&[2, 3], 1.0);
    let (w, r) = (tape.constant(words.clone()), tape.constant(rows.clone()));
    for mode in InsertionPosition::ALL {
        let (out, map) = inject_embeddings(&w, &r, &[0, 2], mode).unwrap();
        let out = out.value();
        if mode == InsertionPosition::None {
            assert_eq!(*out, words);
            continue;
        }
        assert_eq!(out.rows(), 7);
        assert!(map.original.windows(2).all(|p| p[0] < p[1]), "{mode:?} reorders originals");
        for i in 0..5 {
            assert_eq!(out.row(map.original[i]), words.row(i));
        }
        for j in 0..2 {
            assert_eq!(out.row(map.inserted[j]), rows.row(j));
        }
        let expected_inserted = match mode {
            InsertionPosition::AfterVh => vec![1, 4],
            InsertionPosition::BeforeText => vec![0, 1],
            InsertionPosition::AfterText => vec![5, 6],
            InsertionPosition::None => unreachable!(),
        };
        assert_eq!(map.inserted, expected_inserted, "{mode:?}");
    }
    let (out, map) = inject_embeddings(
        &tape.constant(Tensor::zeros(&[3, 2])),
        &tape.constant(Tensor::full(&[1, 2], 1.0)),
        &[1],
        InsertionPosition::AfterVh,
    )
    .unwrap();
    assert_eq!(out.value().rows(), 4);
    assert_eq!(map.inserted, [2]);
}

#[test]
fn prompt_rows_reach_every_layer() {
    let t = task(10, 0, 6);
    let m = model(&t, 6, true);
    let ex = example("the green apple on a round table", Label::Class(1));
    let l = extract_sbs(&ex.text).len();
    assert_eq!(l, 4);
    let inj = InjectionConfig {
        regime: Regime::PromptTune,
        k: 3,
        ..InjectionConfig::default()
    };
    let tape = Tape::new();
    let bound = m.params.bind(&tape);
    let out = forward(&m, &bound, &ex, &inj, train_step()).unwrap();
    let seq = ex.text.len() + l;
    assert_eq!(out.layer_input_rows, seq);
    assert_eq!(out.attention_maps.len(), m.plm.net.config.layer_count);
    for layer in &out.attention_maps {
        for head in layer {
            assert_eq!(head.value().shape(), [seq, seq]);
        }
    }
}

#[test]
fn no_vh_words_means_baseline_forward() {
    let t = task(10, 0, 7);
    let augmented = model(&t, 7, true);
    let plain = model(&t, 7, false);
    let ex = &t.train[0];
    for (regime, inj) in [
        (Regime::FullFinetune, InjectionConfig { vh_fraction: 0.0, ..InjectionConfig::default() }),
        (Regime::PromptTune, InjectionConfig { vh_fraction: 0.0, regime: Regime::PromptTune, ..InjectionConfig::default() }),
        (Regime::FullFinetune, InjectionConfig { insertion_position: InsertionPosition::None, ..InjectionConfig::default() }),
    ] {
        let tape = Tape::new();
        let a = forward(&augmented, &augmented.params.bind(&tape), ex, &inj, train_step()).unwrap();
        let b = forward(&plain, &plain.params.bind(&tape), ex, &inj, train_step()).unwrap();
        assert_eq!(a.prediction, b.prediction, "{regime:?}");
        assert_eq!(item(&a.loss), item(&b.loss));
        assert_eq!(a.layer_input_rows, ex.text.len());
    }
}

#[test]
fn frozen_groups_receive_exactly_zero_gradient() {
    let t = task(10, 0, 8);
    let ex = &t.train[1];
    for (regime, frozen) in [
        (Regime::FullFinetune, vec![ParamGroup::Vlp]),
        (Regime::PromptTune, vec![ParamGroup::Vlp, ParamGroup::Plm]),
    ] {
        for strategy in [Strategy::Sbs, Strategy::Lbs] {
            let mut m = model(&t, 8, true);
            m.set_regime(regime);
            let inj = InjectionConfig {
                regime,
                strategy,
                ..InjectionConfig::default()
            };
            let tape = Tape::new();
            let bound = m.params.bind(&tape);
            let out = forward(&m, &bound, ex, &inj, train_step()).unwrap();
            tape.backward(out.loss).unwrap();
            let grads = bound.grads();
            for (e, g) in m.params.entries().iter().zip(&grads) {
                if frozen.contains(&e.group) {
                    assert!(g.data().iter().all(|&x| x == 0.0), "{regime:?} {strategy:?}: {} moved", e.name);
                }
            }
            let ref_moved = m
                .params
                .entries()
                .iter()
                .zip(&grads)
                .any(|(e, g)| e.group == ParamGroup::Ref && g.norm() > 0.0);
            assert!(ref_moved, "{regime:?} {strategy:?}: reformulation got no gradient");
        }
    }
}

fn zero_head(params: &mut ParameterPartition, bias: f64) {
    let w = params.get_mut(HEAD_W).unwrap();
    *w = Tensor::zeros(w.shape());
    let b = params.get_mut(HEAD_B).unwrap();
    *b = Tensor::full(b.shape(), bias);
}

#[test]
fn task_losses() {
    let mut spec = vawi::text::SyntheticTaskSpec {
        attribute_class_count: 2,
        train_size: 10,
        test_size: 10,
        ..Default::default()
    };
    let t = vawi::text::generate_synthetic(&spec, 0).unwrap();
    let mut m = model(&t, 0, true);
    zero_head(&mut m.params, 0.0);
    let tape = Tape::new();
    let out = forward(&m, &m.params.bind(&tape), &t.train[0], &InjectionConfig::default(), StepKey::Eval).unwrap();
    assert!((item(&out.loss) - std::f64::consts::LN_2).abs() < 1e-12);

    spec.attribute_class_count = 4;
    let t = vawi::text::generate_synthetic(&spec, 0).unwrap();
    let mut reg = vawi::injection::VawiModel::build(
        &Default::default(),
        &t.attributes,
        &[&t.train],
        TaskKind::Regression,
        0,
        true,
    )
    .unwrap();
    zero_head(&mut reg.params, 0.75);
    let ex = LabeledExample {
        label: Label::Value(0.75),
        ..t.train[0].clone()
    };
    let tape = Tape::new();
    let out = forward(&reg, &reg.params.bind(&tape), &ex, &InjectionConfig::default(), StepKey::Eval).unwrap();
    assert_eq!(item(&out.loss), 0.0);
}

#[test]
fn evaluation_loss_is_mean_of_example_losses() {
    let t = task(10, 30, 9);
    let m = model(&t, 9, true);
    let inj = InjectionConfig::default();
    let ev = evaluate(&m, &t.test, &inj, 0).unwrap();
    let mut frozen = m.params.clone();
    ParamGroup::ALL.iter().for_each(|&g| frozen.set_trainable(g, false));
    let per_example: Vec<f64> = t
        .test
        .iter()
        .map(|ex| {
            let tape = Tape::new();
            item(&forward(&m, &frozen.bind(&tape), ex, &inj, StepKey::Eval).unwrap().loss)
        })
        .collect();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    assert!((ev.loss - mean).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&ev.metric));
}

#[test]
fn zero_epochs_leave_initialization_untouched() {
    let t = task(20, 0, 10);
    let mut m = model(&t, 10, true);
    let init = m.params.clone();
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut m, &t.train, &InjectionConfig::default(), &tc).unwrap();
    assert_eq!(report.steps, 0);
    for (a, b) in m.params.entries().iter().zip(init.entries()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn prompt_tuning_moves_only_reformulation_and_head() {
    let t = task(50, 0, 11);
    let mut m = model(&t, 11, true);
    let init = m.params.clone();
    let tc = TrainConfig {
        epochs: 8,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let inj = InjectionConfig {
        regime: Regime::PromptTune,
        ..InjectionConfig::default()
    };
    let report = train(&mut m, &t.train, &inj, &tc).unwrap();
    assert!(report.steps >= 100);
    for (a, b) in m.params.entries().iter().zip(init.entries()) {
        match a.group {
            ParamGroup::Plm | ParamGroup::Vlp => assert_eq!(a.tensor, b.tensor, "{} changed", a.name),
            _ => {}
        }
    }
    assert!(m.params.group_distance(&init, ParamGroup::Ref) > 0.0);
    assert_eq!(report.group_update_norms["plm"], 0.0);
    assert_eq!(report.group_update_norms["vlp"], 0.0);
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let t = task(10, 40, 12);
    let m = model(&t, 12, true);
    let inj = InjectionConfig {
        strategy: Strategy::Lbs,
        vh_fraction: 0.5,
        ..InjectionConfig::default()
    };
    let first = evaluate(&m, &t.test, &inj, 3).unwrap();
    assert_eq!(evaluate(&m, &t.test, &inj, 3).unwrap(), first);
    for threads in ["1", "3", "7"] {
        std::env::set_var(vawi::injection::THREADS_ENV, threads);
        assert_eq!(evaluate(&m, &t.test, &inj, 3).unwrap(), first, "{threads} threads");
    }
    std::env::remove_var(vawi::injection::THREADS_ENV);
}

#[test]
fn untrained_binary_model_is_at_chance() {
    let spec = vawi::text::SyntheticTaskSpec {
        attribute_class_count: 2,
        train_size: 10,
        test_size: 500,
        ..Default::default()
    };
    let t = vawi::text::generate_synthetic(&spec, 13).unwrap();
    let positives = t.test.iter().filter(|e| e.label == Label::Class(1)).count();
    assert!((200..=300).contains(&positives), "unbalanced split: {positives}");
    let m = model(&t, 13, true);
    let ev = evaluate(&m, &t.test, &InjectionConfig::default(), 0).unwrap();
    assert!((0.3..=0.7).contains(&ev.metric), "{}", ev.metric);
}

#[test]
fn position_none_equals_model_without_augmentation() {
    let t = task(40, 40, 14);
    let exp = vawi::injection::Experiment {
        model: &Default::default(),
        attributes: &t.attributes,
        train: &t.train,
        test: &t.test,
        task: TaskKind::Classification { classes: 4 },
    };
    let tc = TrainConfig {
        epochs: 2,
        seed: 14,
        ..TrainConfig::default()
    };
    let inj = InjectionConfig {
        insertion_position: InsertionPosition::None,
        ..InjectionConfig::default()
    };
    let with = exp.run(&inj, &tc).unwrap();
    let without = exp.run_baseline(&tc).unwrap();
    assert_eq!(with.evaluation, without.evaluation);
    assert_eq!(with.report.per_epoch, without.report.per_epoch);
}
