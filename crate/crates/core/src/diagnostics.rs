//! Finite-difference checks over the model's differentiable paths, and
//! attention dumps.

use serde::Serialize;

use crate::augmentation::{compose_prefix, encode_aligned, names as reform, reformulate, reformulate_values, apply_soft_weights};
use crate::autodiff::{Tape, Var};
use crate::encoders::{ParamGroup, ParameterPartition};
use crate::error::{Result, VawiError};
use crate::extraction::{extract_lbs_graph, extract_sbs, names as extractor, weights_at, Strategy, WeightMode};
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::injection::{
    forward_example, injection_layout, AugmentCache, ForwardContext, InjectionConfig, InsertionPosition, Regime,
    StepKey, VawiModel,
};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::tensor::Tensor;
use crate::text::LabeledExample;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, r: &GradCheckReport) -> Self {
        CheckResult {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            checked: r.checked,
            passed: r.passes(GRADCHECK_TOLERANCE),
        }
    }
}

fn ids_of(params: &ParameterPartition, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| params.id(n).ok_or_else(|| VawiError::Contract(format!("model has no tensor {n:?}"))))
        .collect()
}

/// Runs `loss` under finite differences with respect to the tensors `ids`.
fn check_tensors<F>(params: &ParameterPartition, ids: &[usize], opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &crate::encoders::Bound<'t, '_>) -> Result<Var<'t>>,
{
    let mut values: Vec<Tensor> = ids.iter().map(|&i| params.entries()[i].tensor.clone()).collect();
    finite_diff_check(
        |tape, vars| {
            let overrides: Vec<(usize, Var<'_>)> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bound = params.bind_with(tape, &overrides);
            loss(tape, &bound)
        },
        &mut values,
        opts,
    )
}

/// A fixed random projection turning a matrix output into a scalar loss.
fn projection(shape: &[usize], seed: u64) -> Tensor {
    RngStream::new(seed, StreamKey::once(Purpose::Check(u32::MAX))).normal_tensor(shape, 1.0)
}

fn projected<'t>(tape: &'t Tape, x: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = tape.constant(projection(x.value().shape(), seed));
    Ok(x.mul(&r)?.sum())
}

/// Reformulation layer: query table, key and value projections.
pub fn check_reformulation(model: &VawiModel, ex: &LabeledExample, opts: &GradCheckOptions) -> Result<CheckResult> {
    let sel = extract_sbs(&ex.text);
    let prefix = compose_prefix(&sel).ok_or_else(|| VawiError::Contract("example has no VH-words".into()))?;
    let aligned = encode_aligned(&prefix, &model.vl, &model.params)?;
    let ids = ids_of(&model.params, &[reform::QUERY, reform::KEY_W, reform::KEY_B, reform::VALUE_W, reform::VALUE_B])?;
    let report = check_tensors(&model.params, &ids, opts, |tape, bound| {
        let h = tape.constant(aligned.states.clone());
        let out = reformulate(bound, &h, sel.len())?;
        projected(tape, &out.rows, opts.seed)
    })?;
    Ok(CheckResult::new("reformulation", &report))
}

/// Learned extractor: scores → relaxed top-k weights → weighted
/// augmentation rows.
pub fn check_lbs_extractor(
    model: &VawiModel,
    ex: &LabeledExample,
    k: usize,
    temperature: f64,
    opts: &GradCheckOptions,
) -> Result<CheckResult> {
    let ids = ids_of(&model.params, &[extractor::W1, extractor::B1, extractor::W2, extractor::B2])?;
    let report = check_tensors(&model.params, &ids, opts, |tape, bound| {
        let mut rng = RngStream::new(opts.seed, StreamKey::once(Purpose::Gumbel(0)));
        let g = extract_lbs_graph(&ex.text, &model.lbs_models(), bound, k, temperature, WeightMode::Relaxed, &mut rng)?;
        let prefix = compose_prefix(&g.selection).expect("k >= 1 selects at least one word");
        let aligned = encode_aligned(&prefix, &model.vl, &model.params)?;
        let rows = reformulate(bound, &tape.constant(aligned.states), g.selection.len())?.rows;
        let weighted = apply_soft_weights(&rows, &weights_at(&g.weights, &g.selection.indices)?)?;
        projected(tape, &weighted, opts.seed)
    })?;
    Ok(CheckResult::new("lbs_extractor", &report))
}

/// One example end to end: LBS extraction → reformulation → insertion →
/// task encoder → head → loss, against every trainable tensor.
pub fn check_full_pipeline(
    model: &VawiModel,
    ex: &LabeledExample,
    inj: &InjectionConfig,
    opts: &GradCheckOptions,
) -> Result<CheckResult> {
    let mut model = model.clone();
    model.set_regime(inj.regime);
    let ids = model.params.trainable_ids();
    let cfg = InjectionConfig {
        strategy: Strategy::Lbs,
        ..inj.clone()
    };
    let report = check_tensors(&model.params, &ids, opts, |_, bound| {
        let mut cache = AugmentCache::new();
        let mut ctx = ForwardContext {
            example_index: 0,
            seed: opts.seed,
            step: StepKey::Train { epoch: 0, batch: 0 },
            weight_mode: WeightMode::Relaxed,
            cache: &mut cache,
        };
        Ok(forward_example(&model, bound, ex, &cfg, &mut ctx)?.loss)
    })?;
    Ok(CheckResult::new("full_pipeline", &report))
}

/// The three checks the `gradcheck` command runs.
pub fn gradcheck_suite(
    model: &VawiModel,
    ex: &LabeledExample,
    inj: &InjectionConfig,
    opts: &GradCheckOptions,
) -> Result<Vec<CheckResult>> {
    let pipeline = InjectionConfig {
        regime: Regime::FullFinetune,
        insertion_position: match inj.insertion_position {
            InsertionPosition::None => InsertionPosition::AfterVh,
            p => p,
        },
        ..inj.clone()
    };
    Ok(vec![
        check_reformulation(model, ex, opts)?,
        check_lbs_extractor(model, ex, inj.k, inj.temperature, opts)?,
        check_full_pipeline(model, ex, &pipeline, opts)?,
    ])
}

/// Task-encoder attention for one input, without and with augmentation.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionDump {
    pub text: String,
    pub vh_words: Vec<String>,
    /// Row labels of the un-augmented sequence.
    pub tokens_before: Vec<String>,
    /// `[layer][head]`, each `seq × seq`.
    pub before: Vec<Vec<Tensor>>,
    /// Row labels of the augmented sequence; inserted rows read `<vh:word>`.
    pub tokens_after: Vec<String>,
    pub after: Vec<Vec<Tensor>>,
    /// Reformulation attention of each augmentation row over the prefix text.
    pub reformulation: Option<Tensor>,
    pub prefix_tokens: Vec<String>,
}

fn maps(vars: &[Vec<Var<'_>>]) -> Vec<Vec<Tensor>> {
    vars.iter().map(|h| h.iter().map(|v| (*v.value()).clone()).collect()).collect()
}

pub fn dump_attention(model: &VawiModel, ex: &LabeledExample, inj: &InjectionConfig, seed: u64) -> Result<AttentionDump> {
    let mut frozen = model.params.clone();
    ParamGroup::ALL.iter().for_each(|&g| frozen.set_trainable(g, false));
    let run = |cfg: &InjectionConfig| -> Result<(Vec<Vec<Tensor>>, Option<crate::extraction::VhSelection>)> {
        let tape = Tape::new();
        let bound = frozen.bind(&tape);
        let mut cache = AugmentCache::new();
        let mut ctx = ForwardContext {
            example_index: 0,
            seed,
            step: StepKey::Eval,
            weight_mode: WeightMode::StraightThrough,
            cache: &mut cache,
        };
        let out = forward_example(model, &bound, ex, cfg, &mut ctx)?;
        Ok((maps(&out.attention_maps), out.selection))
    };
    let plain = InjectionConfig {
        insertion_position: InsertionPosition::None,
        ..inj.clone()
    };
    let (before, _) = run(&plain)?;
    let (after, selection) = run(inj)?;

    let tokens = ex.text.tokens.clone();
    let mut tokens_after = tokens.clone();
    let mut reformulation = None;
    let mut prefix_tokens = Vec::new();
    let mut vh_words = Vec::new();
    if let Some(sel) = selection {
        vh_words = sel.words.clone();
        if inj.regime == Regime::FullFinetune {
            let map = injection_layout(tokens.len(), &sel.indices, inj.insertion_position)?;
            tokens_after = vec![String::new(); map.len()];
            for (i, &slot) in map.original.iter().enumerate() {
                tokens_after[slot] = tokens[i].clone();
            }
            for (j, &slot) in map.inserted.iter().enumerate() {
                tokens_after[slot] = format!("<vh:{}>", sel.words[j]);
            }
        } else {
            let mut labels: Vec<String> = sel.words.iter().map(|w| format!("<vh:{w}>")).collect();
            labels.extend(tokens.iter().cloned());
            tokens_after = labels;
        }
        if let Some(prefix) = compose_prefix(&sel) {
            let aligned = encode_aligned(&prefix, &model.vl, &model.params)?;
            let (_, attn) = reformulate_values(&model.params, &aligned, &sel.indices)?;
            reformulation = Some(attn);
            prefix_tokens = crate::text::tokenize(&prefix).tokens;
            prefix_tokens.push(crate::text::EOS.to_string());
        }
    }
    Ok(AttentionDump {
        text: ex.text.raw.clone(),
        vh_words,
        tokens_before: tokens,
        before,
        tokens_after,
        after,
        reformulation,
        prefix_tokens,
    })
}
