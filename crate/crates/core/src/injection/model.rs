//! The full model: task encoder, frozen aligned encoder, reformulation layer,
//! learned extractor and task head, plus the per-example forward pass.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augmentation::{
    apply_soft_weights, compose_prefix, encode_aligned, init_reformulation, random_noise_source, reformulate,
    AugmentationSource, ReformulationShape, CAPTION_PREFIX,
};
use crate::autodiff::Var;
use crate::encoders::transformer::INIT_STD;
use crate::encoders::{init_plm, init_vl_encoder, Bound, EncoderConfig, ParamGroup, ParameterPartition, TextEncoder};
use crate::error::{Result, VawiError};
use crate::extraction::{
    extract_lbs_graph, extract_sbs, extract_vabs, init_extractor, subsample_selection, weights_at, LbsModels,
    Strategy, VhSelection, WeightMode,
};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::tensor::Tensor;
use crate::text::{word_list, AttributeTable, Label, LabeledExample, TaskKind, Vocab};

use super::config::{InjectionConfig, LossKind, Regime};
use super::insert::{inject_embeddings, injection_layout};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub plm: EncoderConfig,
    pub vl: EncoderConfig,
    /// Rows of the reformulation query table; the most VH-words one sentence
    /// may contribute.
    pub max_vh_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            plm: EncoderConfig::plm_default(),
            vl: EncoderConfig::vl_default(),
            max_vh_rows: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VawiModel {
    pub plm: TextEncoder,
    pub vl: TextEncoder,
    pub params: ParameterPartition,
    pub task: TaskKind,
    /// False for a plain text model with no reformulation layer or extractor.
    pub augmentation_attached: bool,
}

fn init_stream(seed: u64, part: u32) -> RngStream {
    RngStream::new(seed, StreamKey::once(Purpose::Init(part)))
}

impl VawiModel {
    /// Builds every group from its own seeded stream, so a model without the
    /// augmentation modules has exactly the same task-encoder and head
    /// initialization as one with them.
    pub fn build(
        config: &ModelConfig,
        attributes: &AttributeTable,
        datasets: &[&[LabeledExample]],
        task: TaskKind,
        seed: u64,
        attach_augmentation: bool,
    ) -> Result<Self> {
        let words = word_list(attributes, datasets.iter().copied(), CAPTION_PREFIX);
        let plm_vocab = Vocab::build(words.iter(), false);
        let vl_vocab = Vocab::build(words.iter(), true);
        let plm_cfg = EncoderConfig {
            vocab_size: plm_vocab.len(),
            ..config.plm.clone()
        };
        let vl_cfg = EncoderConfig {
            vocab_size: vl_vocab.len(),
            causal: true,
            ..config.vl.clone()
        };
        if plm_cfg.causal {
            return Err(VawiError::Config("the task encoder must be bidirectional".into()));
        }

        let mut params = ParameterPartition::new();
        let plm_net = init_plm(&plm_cfg, &mut params, &mut init_stream(seed, 0))?;
        let vl_net = init_vl_encoder(&vl_cfg, &vl_vocab, attributes, &mut params, &mut init_stream(seed, 1))?;
        if attach_augmentation {
            let shape = ReformulationShape {
                aligned_dim: vl_cfg.hidden_size,
                output_dim: plm_cfg.hidden_size,
                max_rows: config.max_vh_rows,
            };
            init_reformulation(shape, &mut params, &mut init_stream(seed, 2))?;
            init_extractor(plm_cfg.hidden_size, vl_cfg.hidden_size, &mut params, &mut init_stream(seed, 3))?;
        }
        let out = task.output_size();
        let mut head_rng = init_stream(seed, 4);
        params.insert(HEAD_W, ParamGroup::Head, head_rng.normal_tensor(&[plm_cfg.hidden_size, out], INIT_STD))?;
        params.insert(HEAD_B, ParamGroup::Head, Tensor::zeros(&[1, out]))?;

        Ok(VawiModel {
            plm: TextEncoder {
                net: plm_net,
                vocab: plm_vocab,
            },
            vl: TextEncoder {
                net: vl_net,
                vocab: vl_vocab,
            },
            params,
            task,
            augmentation_attached: attach_augmentation,
        })
    }

    pub fn max_vh_rows(&self) -> usize {
        self.params.get(crate::augmentation::names::QUERY).map_or(0, Tensor::rows)
    }

    /// Sets trainable flags for a regime. The aligned encoder is always
    /// frozen.
    pub fn set_regime(&mut self, regime: Regime) {
        let p = &mut self.params;
        p.set_trainable(ParamGroup::Plm, regime == Regime::FullFinetune);
        p.set_trainable(ParamGroup::Vlp, false);
        p.set_trainable(ParamGroup::Ref, true);
        p.set_trainable(ParamGroup::Head, true);
    }

    pub fn lbs_models(&self) -> LbsModels<'_> {
        LbsModels {
            plm: &self.plm,
            vl: &self.vl,
        }
    }
}

/// Where the randomness of one example's forward pass comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKey {
    /// Training step `(epoch, batch)`: fresh Gumbel, subsampling and noise
    /// draws every step.
    Train { epoch: u64, batch: u64 },
    /// Evaluation: fixed draws, no Gumbel noise.
    Eval,
}

impl StepKey {
    fn stream(self, seed: u64, purpose: Purpose) -> RngStream {
        match self {
            StepKey::Train { epoch, batch } => RngStream::new(seed, StreamKey::new(epoch, batch, purpose)),
            StepKey::Eval => RngStream::new(seed, StreamKey::once(purpose)),
        }
    }
}

/// Selections and aligned states that depend only on frozen parameters.
#[derive(Default)]
pub struct AugmentCache {
    selections: HashMap<usize, VhSelection>,
    aligned: HashMap<String, Tensor>,
}

impl AugmentCache {
    pub fn new() -> Self {
        AugmentCache::default()
    }
}

/// One example's position in its dataset plus the per-run context.
pub struct ForwardContext<'c> {
    pub example_index: usize,
    pub seed: u64,
    pub step: StepKey,
    pub weight_mode: WeightMode,
    pub cache: &'c mut AugmentCache,
}

pub struct ExampleOutput<'t> {
    pub loss: Var<'t>,
    /// `1 × outputs`.
    pub prediction: Tensor,
    pub selection: Option<VhSelection>,
    /// Sequence length the first layer saw.
    pub layer_input_rows: usize,
    /// Task-encoder attention, `[layer][head]`.
    pub attention_maps: Vec<Vec<Var<'t>>>,
}

fn selection_for<'t>(
    model: &VawiModel,
    bound: &Bound<'t, '_>,
    ex: &LabeledExample,
    cfg: &InjectionConfig,
    ctx: &mut ForwardContext<'_>,
) -> Result<(VhSelection, Option<Var<'t>>)> {
    let idx = ctx.example_index;
    match cfg.strategy {
        Strategy::Sbs | Strategy::Vabs => {
            if let Some(sel) = ctx.cache.selections.get(&idx) {
                return Ok((sel.clone(), None));
            }
            let sel = match cfg.strategy {
                Strategy::Sbs => extract_sbs(&ex.text),
                _ => extract_vabs(&ex.text, &model.vl, &model.params, cfg.k)?,
            };
            ctx.cache.selections.insert(idx, sel.clone());
            Ok((sel, None))
        }
        Strategy::Lbs => {
            if ex.text.is_empty() {
                return Ok((VhSelection::default(), None));
            }
            let temperature = match ctx.step {
                StepKey::Eval => 0.0,
                StepKey::Train { .. } => cfg.temperature,
            };
            let mut rng = ctx.step.stream(ctx.seed, Purpose::Gumbel(idx as u32));
            let g = extract_lbs_graph(
                &ex.text,
                &model.lbs_models(),
                bound,
                cfg.k,
                temperature,
                ctx.weight_mode,
                &mut rng,
            )?;
            Ok((g.selection, Some(g.weights)))
        }
    }
}

/// Augmentation rows (`l × d_plm`) and the sentence positions they belong to,
/// or `None` when nothing is selected.
pub fn augmentation_rows<'t>(
    model: &VawiModel,
    bound: &Bound<'t, '_>,
    ex: &LabeledExample,
    cfg: &InjectionConfig,
    ctx: &mut ForwardContext<'_>,
) -> Result<Option<(Var<'t>, VhSelection)>> {
    let (sel, weights) = selection_for(model, bound, ex, cfg, ctx)?;
    let sel = if cfg.vh_fraction < 1.0 {
        let mut rng = ctx.step.stream(ctx.seed, Purpose::Subsample(ctx.example_index as u32));
        subsample_selection(&sel, cfg.vh_fraction, &mut rng)?
    } else {
        sel
    };
    if sel.is_empty() {
        return Ok(None);
    }
    let max_rows = model.max_vh_rows();
    if sel.len() > max_rows {
        return Err(VawiError::Config(format!(
            "{} VH-words selected but the reformulation layer holds {max_rows} rows",
            sel.len()
        )));
    }
    let tape = bound.get(HEAD_W)?.tape();
    let rows = match cfg.augmentation_source {
        AugmentationSource::VlEncoder => {
            let prefix = compose_prefix(&sel).expect("non-empty selection");
            let states = match ctx.cache.aligned.get(&prefix) {
                Some(s) => s.clone(),
                None => {
                    let s = encode_aligned(&prefix, &model.vl, &model.params)?.states;
                    ctx.cache.aligned.insert(prefix, s.clone());
                    s
                }
            };
            reformulate(bound, &tape.constant(states), sel.len())?.rows
        }
        AugmentationSource::RandomNoise => {
            let d = model.plm.net.config.hidden_size;
            let mut rng = ctx.step.stream(ctx.seed, Purpose::Noise(ctx.example_index as u32));
            tape.constant(random_noise_source(&sel.indices, d, &mut rng)?.rows)
        }
    };
    let rows = match weights {
        Some(w) => apply_soft_weights(&rows, &weights_at(&w, &sel.indices)?)?,
        None => rows,
    };
    Ok(Some((rows, sel)))
}

fn example_loss<'t>(model: &VawiModel, logits: &Var<'t>, label: Label) -> Result<Var<'t>> {
    let kind = match model.task {
        TaskKind::Classification { .. } => LossKind::CrossEntropy,
        TaskKind::Regression => LossKind::Mse,
    };
    match (kind, label) {
        (LossKind::CrossEntropy, Label::Class(c)) => Ok(logits.log_softmax_rows()?.pick(c)?.scale(-1.0)),
        (LossKind::Mse, Label::Value(y)) => {
            let diff = logits.pick(0)?.add_scalar(-y);
            diff.mul(&diff)
        }
        (kind, label) => Err(VawiError::Config(format!("label {label:?} does not fit a {kind:?} loss"))),
    }
}

/// Loss and prediction for one example: extract → subsample → augment →
/// inject → encode → pool → head.
pub fn forward_example<'t>(
    model: &VawiModel,
    bound: &Bound<'t, '_>,
    ex: &LabeledExample,
    cfg: &InjectionConfig,
    ctx: &mut ForwardContext<'_>,
) -> Result<ExampleOutput<'t>> {
    if ex.text.is_empty() {
        return Err(VawiError::Contract("cannot classify an empty sentence".into()));
    }
    let augmentation = if cfg.augments() && model.augmentation_attached {
        augmentation_rows(model, bound, ex, cfg, ctx)?
    } else {
        None
    };
    let net = &model.plm.net;
    let ids = model.plm.ids(&ex.text.tokens);
    let words = net.token_embeddings(bound, &ids)?;
    let m = ids.len();

    let (trace, pool, layer_input_rows, selection) = match (augmentation, cfg.regime) {
        (None, _) => {
            let x = net.with_positions(bound, &words)?;
            (net.run_layers(bound, x, None)?, (0..m).collect::<Vec<_>>(), m, None)
        }
        (Some((rows, sel)), Regime::FullFinetune) => {
            let l = sel.len();
            let (seq, map) = if cfg.position_embed_inserted {
                let (seq, map) = inject_embeddings(&words, &rows, &sel.indices, cfg.insertion_position)?;
                (net.with_positions(bound, &seq)?, map)
            } else {
                let map = injection_layout(m, &sel.indices, cfg.insertion_position)?;
                net.check_length(map.len())?;
                let pos = bound.get(&net.name("pos_emb"))?.gather_rows(&map.original)?;
                inject_embeddings(&words.add(&pos)?, &rows, &sel.indices, cfg.insertion_position)?
            };
            (net.run_layers(bound, seq, None)?, map.original, m + l, Some(sel))
        }
        (Some((rows, sel)), Regime::PromptTune) => {
            let l = sel.len();
            net.check_length(m + l)?;
            let x = net.with_positions(bound, &words)?;
            (net.run_layers(bound, x, Some(rows))?, (0..m).collect(), m + l, Some(sel))
        }
    };
    let pooled = trace.final_states.gather_rows(&pool)?.mean_rows()?;
    let logits = pooled.matmul(&bound.get(HEAD_W)?)?.add_row(&bound.get(HEAD_B)?)?;
    let loss = example_loss(model, &logits, ex.label)?;
    Ok(ExampleOutput {
        loss,
        prediction: (*logits.value()).clone(),
        selection,
        layer_input_rows,
        attention_maps: trace.attention_maps,
    })
}

/// Index of the largest logit (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
