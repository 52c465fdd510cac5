//! Visually-augmented representations: caption-prefix composition, frozen
//! aligned encoding, and the position-query cross-attention that maps the
//! aligned states to one row per VH-word.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{Bound, ParamGroup, ParameterPartition, TextEncoder};
use crate::error::{Result, VawiError};
use crate::extraction::VhSelection;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::text::tokenize;

pub const CAPTION_PREFIX: &str = "a photo of :";
pub const REFORM_INIT_STD: f64 = 0.02;
pub const NOISE_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationSource {
    VlEncoder,
    RandomNoise,
}

impl std::str::FromStr for AugmentationSource {
    type Err = VawiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vl_encoder" => Ok(AugmentationSource::VlEncoder),
            "random_noise" => Ok(AugmentationSource::RandomNoise),
            _ => Err(VawiError::Config(format!(
                "unknown augmentation source {s:?} (expected vl_encoder or random_noise)"
            ))),
        }
    }
}

/// `"a photo of : w1 w2 …"`, or `None` for an empty selection (no
/// augmentation).
pub fn compose_prefix(sel: &VhSelection) -> Option<String> {
    if sel.is_empty() {
        return None;
    }
    Some(format!("{CAPTION_PREFIX} {}", sel.words.join(" ")))
}

/// Aligned-encoder states over a composed prefix text.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignedRepr {
    /// `k × d_v`, prefix tokens and EOS included.
    pub states: Tensor,
    /// Token range of each VH-word inside the prefix text.
    pub vh_token_spans: Vec<(usize, usize)>,
}

impl AlignedRepr {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Encodes a composed prefix text with the frozen aligned encoder.
pub fn encode_aligned(prefix_text: &str, vl: &TextEncoder, vl_params: &ParameterPartition) -> Result<AlignedRepr> {
    let tokens = tokenize(prefix_text).tokens;
    let out = vl.encode(vl_params, &tokens)?;
    let mut spans = Vec::new();
    let mut pos = tokenize(CAPTION_PREFIX).len();
    if let Some(rest) = prefix_text.strip_prefix(CAPTION_PREFIX) {
        for word in rest.split_whitespace() {
            let n = tokenize(word).len();
            spans.push((pos, pos + n));
            pos += n;
        }
    }
    Ok(AlignedRepr {
        states: out.final_states,
        vh_token_spans: spans,
    })
}

/// Parameter names of the reformulation layer.
pub mod names {
    /// Position-query table, `l_max × d_out`.
    pub const QUERY: &str = "ref.reform.query";
    pub const KEY_W: &str = "ref.reform.wk";
    pub const KEY_B: &str = "ref.reform.bk";
    pub const VALUE_W: &str = "ref.reform.wv";
    pub const VALUE_B: &str = "ref.reform.bv";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReformulationShape {
    pub aligned_dim: usize,
    pub output_dim: usize,
    pub max_rows: usize,
}

pub fn init_reformulation(
    shape: ReformulationShape,
    partition: &mut ParameterPartition,
    rng: &mut RngStream,
) -> Result<()> {
    let ReformulationShape {
        aligned_dim,
        output_dim,
        max_rows,
    } = shape;
    let g = ParamGroup::Ref;
    partition.insert(names::QUERY, g, rng.normal_tensor(&[max_rows, output_dim], REFORM_INIT_STD))?;
    partition.insert(names::KEY_W, g, rng.normal_tensor(&[aligned_dim, output_dim], REFORM_INIT_STD))?;
    partition.insert(names::KEY_B, g, Tensor::zeros(&[1, output_dim]))?;
    partition.insert(names::VALUE_W, g, rng.normal_tensor(&[aligned_dim, output_dim], REFORM_INIT_STD))?;
    partition.insert(names::VALUE_B, g, Tensor::zeros(&[1, output_dim]))?;
    Ok(())
}

/// Graph handles of one reformulation pass.
pub struct Reformulated<'t> {
    /// `l × d_out`: the first `l` rows of the query table.
    pub query: Var<'t>,
    /// `l × k`.
    pub attention: Var<'t>,
    /// `l × d_out`.
    pub rows: Var<'t>,
}

/// `softmax(Q·Kᵀ/√d_out)·V` with `Q` the first `l` query rows,
/// `K = H·W_K + b_K` and `V = H·W_V + b_V`.
pub fn reformulate<'t>(bound: &Bound<'t, '_>, aligned: &Var<'t>, l: usize) -> Result<Reformulated<'t>> {
    let table = bound.get(names::QUERY)?;
    let (max_rows, d_out) = (table.value().rows(), table.value().cols());
    if l == 0 || l > max_rows {
        return Err(VawiError::Config(format!("{l} augmentation rows requested, query table holds {max_rows}")));
    }
    let wk = bound.get(names::KEY_W)?;
    if wk.value().rows() != aligned.value().cols() {
        return Err(VawiError::Config(format!(
            "reformulation expects aligned width {}, got {}",
            wk.value().rows(),
            aligned.value().cols()
        )));
    }
    let query = table.slice_rows(0, l)?;
    let keys = aligned.matmul(&wk)?.add_row(&bound.get(names::KEY_B)?)?;
    let values = aligned.matmul(&bound.get(names::VALUE_W)?)?.add_row(&bound.get(names::VALUE_B)?)?;
    let attention = query.matmul_t(&keys)?.scale(1.0 / (d_out as f64).sqrt()).softmax_rows()?;
    let rows = attention.matmul(&values)?;
    Ok(Reformulated { query, attention, rows })
}

/// Concrete augmentation rows for one sentence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisualAugmentation {
    /// `l × d_out`.
    pub rows: Tensor,
    /// Sentence token index each row belongs to.
    pub source_positions: Vec<usize>,
    pub source: AugmentationSource,
}

/// Gradient-free reformulation, also returning the `l × k` attention.
pub fn reformulate_values(
    params: &ParameterPartition,
    aligned: &AlignedRepr,
    source_positions: &[usize],
) -> Result<(VisualAugmentation, Tensor)> {
    let tape = Tape::new();
    let mut frozen = params.clone();
    ParamGroup::ALL.iter().for_each(|&g| frozen.set_trainable(g, false));
    let bound = frozen.bind(&tape);
    let h = tape.constant(aligned.states.clone());
    let r = reformulate(&bound, &h, source_positions.len())?;
    let va = VisualAugmentation {
        rows: (*r.rows.value()).clone(),
        source_positions: source_positions.to_vec(),
        source: AugmentationSource::VlEncoder,
    };
    Ok((va, (*r.attention.value()).clone()))
}

/// Ablation rows drawn from `N(0, 0.02²)`.
pub fn random_noise_source(
    source_positions: &[usize],
    output_dim: usize,
    rng: &mut RngStream,
) -> Result<VisualAugmentation> {
    if source_positions.is_empty() {
        return Err(VawiError::Contract("random noise needs at least one row".into()));
    }
    Ok(VisualAugmentation {
        rows: rng.normal_tensor(&[source_positions.len(), output_dim], NOISE_STD),
        source_positions: source_positions.to_vec(),
        source: AugmentationSource::RandomNoise,
    })
}

/// Scales row `i` of the augmentation by `weights[i]`.
pub fn apply_soft_weights<'t>(rows: &Var<'t>, weights: &Var<'t>) -> Result<Var<'t>> {
    rows.scale_rows(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};
    use crate::text::{annotate, Lexicon, Stopwords};

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamKey::once(Purpose::Noise(0)))
    }

    fn reform_params(seed: u64) -> ParameterPartition {
        let mut p = ParameterPartition::new();
        let shape = ReformulationShape {
            aligned_dim: 4,
            output_dim: 6,
            max_rows: 5,
        };
        init_reformulation(shape, &mut p, &mut rng(seed)).unwrap();
        p
    }

    #[test]
    fn prefix_composition() {
        let t = annotate(&tokenize("He is eating a green apple"), &Lexicon::bundled(), &Stopwords::bundled());
        let sel = VhSelection::from_indices(&t, vec![4, 5]);
        let x = compose_prefix(&sel).unwrap();
        assert_eq!(x, "a photo of : green apple");
        assert_eq!(tokenize(&x).len() + 1, 7);
        let river = VhSelection {
            indices: vec![0],
            words: vec!["river".into()],
            ..Default::default()
        };
        assert_eq!(compose_prefix(&river).unwrap(), "a photo of : river");
        assert_eq!(compose_prefix(&VhSelection::default()), None);
    }

    #[test]
    fn single_key_gives_value_rows() {
        let p = reform_params(1);
        let h = Tensor::row_vector(vec![0.3, -0.2, 0.9, 0.1]);
        let ar = AlignedRepr {
            states: h.clone(),
            vh_token_spans: vec![],
        };
        let (va, attn) = reformulate_values(&p, &ar, &[0, 1, 2]).unwrap();
        let v = h.matmul(p.get(names::VALUE_W).unwrap()).unwrap();
        assert!(attn.data().iter().all(|&a| a == 1.0));
        for r in 0..3 {
            assert_eq!(va.rows.row(r), v.row(0));
        }
    }

    #[test]
    fn query_ignores_the_input() {
        let p = reform_params(2);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let a = tape.constant(Tensor::full(&[3, 4], 0.5));
        let c = tape.constant(Tensor::full(&[7, 4], -1.5));
        let qa = reformulate(&b, &a, 2).unwrap().query.value();
        let qc = reformulate(&b, &c, 2).unwrap().query.value();
        assert_eq!(qa, qc);
        assert!(reformulate(&b, &a, 6).is_err());
    }

    #[test]
    fn attention_rows_normalized() {
        let p = reform_params(3);
        let ar = AlignedRepr {
            states: rng(4).normal_tensor(&[6, 4], 1.0),
            vh_token_spans: vec![],
        };
        let (va, attn) = reformulate_values(&p, &ar, &[1, 4]).unwrap();
        assert_eq!(va.rows.shape(), &[2, 6]);
        for r in 0..2 {
            assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_rows() {
        let a = random_noise_source(&[0, 2], 5, &mut rng(7)).unwrap();
        let b = random_noise_source(&[0, 2], 5, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.shape(), &[2, 5]);
        assert_eq!(a.source, AugmentationSource::RandomNoise);
        let big = rng(8).normal_tensor(&[100_000, 1], NOISE_STD);
        let mean = big.sum() / 1e5;
        assert!(mean.abs() < 3.0 * NOISE_STD / (1e5f64).sqrt());
    }

    #[test]
    fn soft_weights_scale_rows() {
        let tape = Tape::new();
        let rows = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap());
        let ones = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        assert_eq!(*apply_soft_weights(&rows, &ones).unwrap().value(), *rows.value());
        let w = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        assert_eq!(apply_soft_weights(&rows, &w).unwrap().value().row(1), &[0.0, 0.0]);
        let bad = tape.constant(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
        assert!(matches!(apply_soft_weights(&rows, &bad), Err(VawiError::Dimension { .. })));
    }
}
