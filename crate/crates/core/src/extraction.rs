//! Visually-hungry word extraction: part-of-speech filtering, attention
//! salience from the aligned encoder, and a learned scorer with Gumbel top-k.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{Bound, EncoderOutputs, ParamGroup, ParameterPartition, TextEncoder};
use crate::error::{Result, VawiError};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::text::{PosTag, TokenizedText};

/// Floor inside `ln(1 − a)` of the relaxed top-k recursion.
const RELAX_EPS: f64 = 1e-12;
const EXTRACTOR_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sbs,
    Vabs,
    Lbs,
}

impl std::str::FromStr for Strategy {
    type Err = VawiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbs" => Ok(Strategy::Sbs),
            "vabs" => Ok(Strategy::Vabs),
            "lbs" => Ok(Strategy::Lbs),
            _ => Err(VawiError::Config(format!("unknown strategy {s:?} (expected sbs, vabs or lbs)"))),
        }
    }
}

/// Selected word positions, ascending, with optional per-token scores and
/// per-selection soft weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VhSelection {
    pub indices: Vec<usize>,
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_weights: Option<Vec<f64>>,
}

impl VhSelection {
    pub fn from_indices(text: &TokenizedText, indices: Vec<usize>) -> Self {
        let words = indices.iter().map(|&i| text.tokens[i].clone()).collect();
        VhSelection {
            indices,
            words,
            scores: None,
            soft_weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `k` largest scores, ties to the smaller index, returned in
/// ascending order. `k` larger than the input clamps.
pub fn top_k_hard(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(VawiError::Contract("top-k needs k >= 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Every non-stopword noun or adjective, in sentence order.
pub fn extract_sbs(text: &TokenizedText) -> VhSelection {
    let indices = (0..text.len())
        .filter(|&i| matches!(text.pos_tags[i], PosTag::Noun | PosTag::Adj) && !text.stopword_flags[i])
        .collect();
    VhSelection::from_indices(text, indices)
}

/// Mean attention from the final (EOS) query to each of the first `n` keys,
/// over every layer and head.
pub fn eos_attention_scores(outputs: &EncoderOutputs, n: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n];
    let mut maps = 0usize;
    for layer in &outputs.attention_maps {
        for map in layer {
            let eos_row = map.row(map.rows() - 1);
            scores.iter_mut().zip(eos_row).for_each(|(s, a)| *s += a);
            maps += 1;
        }
    }
    scores.iter_mut().for_each(|s| *s /= maps as f64);
    scores
}

/// Top-`k` tokens by attention from the aligned encoder's EOS position.
pub fn extract_vabs(
    text: &TokenizedText,
    vl: &TextEncoder,
    vl_params: &ParameterPartition,
    k: usize,
) -> Result<VhSelection> {
    if k == 0 {
        return Err(VawiError::Contract("VABS needs k >= 1".into()));
    }
    if text.is_empty() {
        return Ok(VhSelection {
            scores: Some(Vec::new()),
            ..VhSelection::default()
        });
    }
    let out = vl.encode(vl_params, &text.tokens)?;
    let scores = eos_attention_scores(&out, text.len());
    let mut sel = VhSelection::from_indices(text, top_k_hard(&scores, k)?);
    sel.scores = Some(scores);
    Ok(sel)
}

/// Parameter names of the learned scorer.
pub mod names {
    pub const W1: &str = "ref.extractor.w1";
    pub const B1: &str = "ref.extractor.b1";
    pub const W2: &str = "ref.extractor.w2";
    pub const B2: &str = "ref.extractor.b2";
}

/// Registers the two-layer tanh scorer over `[plm state; aligned state]`.
pub fn init_extractor(
    plm_dim: usize,
    vl_dim: usize,
    partition: &mut ParameterPartition,
    rng: &mut RngStream,
) -> Result<()> {
    let input = plm_dim + vl_dim;
    let hidden = (input / 2).max(1);
    partition.insert(names::W1, ParamGroup::Ref, rng.normal_tensor(&[input, hidden], EXTRACTOR_INIT_STD))?;
    partition.insert(names::B1, ParamGroup::Ref, Tensor::zeros(&[1, hidden]))?;
    partition.insert(names::W2, ParamGroup::Ref, rng.normal_tensor(&[hidden, 1], EXTRACTOR_INIT_STD))?;
    partition.insert(names::B2, ParamGroup::Ref, Tensor::zeros(&[1, 1]))?;
    Ok(())
}

/// Per-token scores, `n × 1`, from the concatenated states of both encoders.
pub fn extractor_scores<'t>(bound: &Bound<'t, '_>, plm_states: &Var<'t>, vl_states: &Var<'t>) -> Result<Var<'t>> {
    let w1 = bound.get(names::W1)?;
    let input = plm_states.value().cols() + vl_states.value().cols();
    if w1.value().rows() != input {
        return Err(VawiError::Config(format!(
            "extractor expects {} input features, encoders give {input}",
            w1.value().rows()
        )));
    }
    let joined = plm_states.tape().concat_cols(&[*plm_states, *vl_states])?;
    let h = joined.matmul(&w1)?.add_row(&bound.get(names::B1)?)?.tanh();
    h.matmul(&bound.get(names::W2)?)?.add_row(&bound.get(names::B2)?)
}

/// Relaxed top-k weights (`1 × n`, summing to `min(k, n)`): `k` rounds of
/// softmax, each round discounting what earlier rounds already took.
pub fn relaxed_top_k<'t>(scores_row: &Var<'t>, k: usize) -> Result<Var<'t>> {
    let n = scores_row.value().len();
    let mut logits = *scores_row;
    let mut total: Option<Var<'t>> = None;
    for round in 0..k.min(n) {
        let a = logits.softmax_rows()?;
        total = Some(match total {
            Some(t) => t.add(&a)?,
            None => a,
        });
        if round + 1 < k.min(n) {
            logits = logits.add(&a.scale(-1.0).add_scalar(1.0 + RELAX_EPS).ln())?;
        }
    }
    total.ok_or_else(|| VawiError::Contract("relaxed top-k over zero tokens".into()))
}

/// How the learned selection weights are exposed on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Hard 0/1 values, gradient of the relaxed weights.
    #[default]
    StraightThrough,
    /// The relaxed weights themselves; used to check the routed gradient
    /// against finite differences.
    Relaxed,
}

/// Learned selection on the graph. `weights` is `1 × n`; with
/// [`WeightMode::StraightThrough`] it is exactly 1 at the selected positions
/// and 0 elsewhere in value, carrying the relaxed weights' gradient.
pub struct LbsGraph<'t> {
    pub selection: VhSelection,
    pub weights: Var<'t>,
}

/// Gumbel top-k over learned scores. The perturbation is `τ·g`; `τ = 0`
/// disables it.
pub fn select_lbs<'t>(
    text: &TokenizedText,
    scores: &Var<'t>,
    k: usize,
    temperature: f64,
    mode: WeightMode,
    rng: &mut RngStream,
) -> Result<LbsGraph<'t>> {
    if k == 0 {
        return Err(VawiError::Contract("LBS needs k >= 1".into()));
    }
    let tape: &'t Tape = scores.tape();
    let raw = scores.value();
    let n = raw.len();
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let g = rng.gumbel();
            if temperature == 0.0 { 0.0 } else { temperature * g }
        })
        .collect();
    let perturbed: Vec<f64> = raw.data().iter().zip(&noise).map(|(s, g)| s + g).collect();
    let indices = top_k_hard(&perturbed, k)?;

    let row = scores.t()?.add(&tape.constant(Tensor::new(vec![1, n], noise)?))?;
    let soft = relaxed_top_k(&row, k)?;
    let mut hard = vec![0.0; n];
    indices.iter().for_each(|&i| hard[i] = 1.0);
    let weights = match mode {
        WeightMode::StraightThrough => tape.straight_through(Tensor::new(vec![1, n], hard)?, soft)?,
        WeightMode::Relaxed => soft,
    };

    let soft_values = soft.value();
    let mut selection = VhSelection::from_indices(text, indices);
    selection.soft_weights = Some(selection.indices.iter().map(|&i| soft_values.data()[i]).collect());
    selection.scores = Some(raw.data().to_vec());
    Ok(LbsGraph { selection, weights })
}

/// Weights of the given positions as an `l × 1` column.
pub fn weights_at<'t>(weights: &Var<'t>, positions: &[usize]) -> Result<Var<'t>> {
    weights.t()?.gather_rows(positions)
}

/// The models LBS reads: the task encoder, the aligned encoder and one
/// partition holding both plus the scorer.
pub struct LbsModels<'m> {
    pub plm: &'m TextEncoder,
    pub vl: &'m TextEncoder,
}

/// Learned extraction on an existing tape.
pub fn extract_lbs_graph<'t>(
    text: &TokenizedText,
    models: &LbsModels<'_>,
    bound: &Bound<'t, '_>,
    k: usize,
    temperature: f64,
    mode: WeightMode,
    rng: &mut RngStream,
) -> Result<LbsGraph<'t>> {
    if text.is_empty() {
        return Err(VawiError::Contract("LBS over an empty sentence".into()));
    }
    let plm = models.plm.forward(bound, &text.tokens)?.final_states;
    let vl = models.vl.forward(bound, &text.tokens)?.final_states.slice_rows(0, text.len())?;
    let scores = extractor_scores(bound, &plm, &vl)?;
    select_lbs(text, &scores, k, temperature, mode, rng)
}

/// Gradient-free learned extraction.
pub fn extract_lbs(
    text: &TokenizedText,
    models: &LbsModels<'_>,
    params: &ParameterPartition,
    k: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<VhSelection> {
    if text.is_empty() {
        return Ok(VhSelection::default());
    }
    let tape = Tape::new();
    let mut frozen = params.clone();
    ParamGroup::ALL.iter().for_each(|&g| frozen.set_trainable(g, false));
    let bound = frozen.bind(&tape);
    Ok(extract_lbs_graph(text, models, &bound, k, temperature, WeightMode::StraightThrough, rng)?.selection)
}

/// Keeps `round(fraction · len)` entries chosen uniformly, order preserved.
pub fn subsample_selection(sel: &VhSelection, fraction: f64, rng: &mut RngStream) -> Result<VhSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(VawiError::Config(format!("vh_fraction {fraction} outside [0, 1]")));
    }
    let keep = (fraction * sel.len() as f64).round() as usize;
    if keep == sel.len() {
        return Ok(sel.clone());
    }
    let mut slots: Vec<usize> = (0..sel.len()).collect();
    rng.shuffle(&mut slots);
    slots.truncate(keep);
    slots.sort_unstable();
    Ok(VhSelection {
        indices: slots.iter().map(|&s| sel.indices[s]).collect(),
        words: slots.iter().map(|&s| sel.words[s].clone()).collect(),
        scores: sel.scores.clone(),
        soft_weights: sel.soft_weights.as_ref().map(|w| slots.iter().map(|&s| w[s]).collect()),
    })
}
