#![allow(dead_code)]

use vawi::autodiff::Var;
use vawi::encoders::Bound;
use vawi::error::Result;
use vawi::extraction::WeightMode;
use vawi::injection::{
    forward_example, AugmentCache, ExampleOutput, ForwardContext, InjectionConfig, ModelConfig, StepKey, VawiModel,
};
use vawi::text::{generate_synthetic, LabeledExample, SyntheticTask, SyntheticTaskSpec, TaskKind};

pub fn task(train: usize, test: usize, seed: u64) -> SyntheticTask {
    let spec = SyntheticTaskSpec {
        train_size: train,
        test_size: test,
        ..SyntheticTaskSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

pub fn model(task: &SyntheticTask, seed: u64, attach: bool) -> VawiModel {
    VawiModel::build(
        &ModelConfig::default(),
        &task.attributes,
        &[&task.train, &task.test],
        TaskKind::Classification {
            classes: task.attributes.classes(),
        },
        seed,
        attach,
    )
    .unwrap()
}

/// One training-mode forward pass on `bound`.
pub fn forward<'t>(
    model: &VawiModel,
    bound: &Bound<'t, '_>,
    ex: &LabeledExample,
    inj: &InjectionConfig,
    step: StepKey,
) -> Result<ExampleOutput<'t>> {
    let mut cache = AugmentCache::new();
    let mut ctx = ForwardContext {
        example_index: 0,
        seed: 0,
        step,
        weight_mode: WeightMode::StraightThrough,
        cache: &mut cache,
    };
    forward_example(model, bound, ex, inj, &mut ctx)
}

pub fn item(v: &Var<'_>) -> f64 {
    v.value().item()
}

/// Argsort oracle: repeatedly take the first maximum among the remaining
/// candidates; ascending indices.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in (0..scores.len()).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    out
}
