//! Pre-LayerNorm transformer encoder with learned absolute positions and
//! exposed per-head attention maps.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, VawiError};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::text::{AttributeTable, Vocab};

use super::config::EncoderConfig;
use super::params::{Bound, ParamGroup, ParameterPartition};

pub const INIT_STD: f64 = 0.02;

/// Magnitude of the one-hot attribute block in aligned-encoder embeddings.
pub const ATTRIBUTE_SCALE: f64 = 1.0;

/// Concrete results of one encoder pass.
#[derive(Clone, Debug, Serialize)]
pub struct EncoderOutputs {
    /// Output of every layer, `seq × d`.
    pub hidden_states: Vec<Tensor>,
    /// `[layer][head]`, each `seq × seq`.
    pub attention_maps: Vec<Vec<Tensor>>,
    /// Last layer after the final LayerNorm.
    pub final_states: Tensor,
}

/// Graph handles of one encoder pass.
pub struct Trace<'t> {
    pub hidden_states: Vec<Var<'t>>,
    pub attention_maps: Vec<Vec<Var<'t>>>,
    pub final_states: Var<'t>,
}

impl Trace<'_> {
    pub fn outputs(&self) -> EncoderOutputs {
        EncoderOutputs {
            hidden_states: self.hidden_states.iter().map(|v| (*v.value()).clone()).collect(),
            attention_maps: self
                .attention_maps
                .iter()
                .map(|heads| heads.iter().map(|v| (*v.value()).clone()).collect())
                .collect(),
            final_states: (*self.final_states.value()).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: EncoderConfig,
    /// Parameter name prefix, e.g. `plm` or `vlp`.
    pub prefix: String,
    pub group: ParamGroup,
    /// Appended to every input of a causal encoder.
    pub eos: Option<usize>,
}

fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}

impl Transformer {
    pub fn new(config: EncoderConfig, prefix: &str, group: ParamGroup, eos: Option<usize>) -> Result<Self> {
        config.validate()?;
        if config.causal && eos.is_none() {
            return Err(VawiError::Config("a causal encoder needs an EOS token id".into()));
        }
        Ok(Transformer {
            config,
            prefix: prefix.to_string(),
            group,
            eos,
        })
    }

    pub fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn layer_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.layer{layer}.{suffix}", self.prefix)
    }

    /// Registers all tensors: weights ~ N(0, 0.02²), biases 0, LayerNorm gains 1.
    pub fn register(&self, partition: &mut ParameterPartition, rng: &mut RngStream) -> Result<()> {
        let c = &self.config;
        let d = c.hidden_size;
        let f = d * c.ffn_multiplier;
        let g = self.group;
        partition.insert(self.name("tok_emb"), g, rng.normal_tensor(&[c.vocab_size, d], INIT_STD))?;
        partition.insert(self.name("pos_emb"), g, rng.normal_tensor(&[c.max_sequence_length, d], INIT_STD))?;
        for l in 0..c.layer_count {
            partition.insert(self.layer_name(l, "ln1.g"), g, Tensor::full(&[1, d], 1.0))?;
            partition.insert(self.layer_name(l, "ln1.b"), g, Tensor::zeros(&[1, d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                partition.insert(self.layer_name(l, &format!("attn.{w}")), g, rng.normal_tensor(&[d, d], INIT_STD))?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                partition.insert(self.layer_name(l, &format!("attn.{b}")), g, Tensor::zeros(&[1, d]))?;
            }
            partition.insert(self.layer_name(l, "ln2.g"), g, Tensor::full(&[1, d], 1.0))?;
            partition.insert(self.layer_name(l, "ln2.b"), g, Tensor::zeros(&[1, d]))?;
            partition.insert(self.layer_name(l, "ffn.w1"), g, rng.normal_tensor(&[d, f], INIT_STD))?;
            partition.insert(self.layer_name(l, "ffn.b1"), g, Tensor::zeros(&[1, f]))?;
            partition.insert(self.layer_name(l, "ffn.w2"), g, rng.normal_tensor(&[f, d], INIT_STD))?;
            partition.insert(self.layer_name(l, "ffn.b2"), g, Tensor::zeros(&[1, d]))?;
        }
        partition.insert(self.name("ln_f.g"), g, Tensor::full(&[1, d], 1.0))?;
        partition.insert(self.name("ln_f.b"), g, Tensor::zeros(&[1, d]))?;
        Ok(())
    }

    /// Input ids as the encoder sees them (EOS appended for causal encoders).
    pub fn sequence_ids(&self, ids: &[usize]) -> Vec<usize> {
        let mut seq = ids.to_vec();
        if self.config.causal {
            if let Some(eos) = self.eos {
                seq.push(eos);
            }
        }
        seq
    }

    pub fn check_length(&self, len: usize) -> Result<()> {
        if len > self.config.max_sequence_length {
            return Err(VawiError::Length {
                len,
                max: self.config.max_sequence_length,
            });
        }
        Ok(())
    }

    pub fn token_embeddings<'t>(&self, bound: &Bound<'t, '_>, ids: &[usize]) -> Result<Var<'t>> {
        bound.get(&self.name("tok_emb"))?.gather_rows(ids)
    }

    /// Adds the position embeddings of slots `0..rows` to `x`.
    pub fn with_positions<'t>(&self, bound: &Bound<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let n = x.value().rows();
        self.check_length(n)?;
        let pos = bound.get(&self.name("pos_emb"))?.slice_rows(0, n)?;
        x.add(&pos)
    }

    fn attention<'t>(&self, bound: &Bound<'t, '_>, layer: usize, h: &Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let p = |s: &str| bound.get(&self.layer_name(layer, s));
        let q = linear(h, &p("attn.wq")?, &p("attn.bq")?)?;
        let k = linear(h, &p("attn.wk")?, &p("attn.bk")?)?;
        let v = linear(h, &p("attn.wv")?, &p("attn.bv")?)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.head_count);
        let mut maps = Vec::with_capacity(self.config.head_count);
        for i in 0..self.config.head_count {
            let (s, e) = (i * dh, (i + 1) * dh);
            let scores = q.slice_cols(s, e)?.matmul_t(&k.slice_cols(s, e)?)?.scale(scale);
            let probs = if self.config.causal {
                scores.causal_softmax_rows()?
            } else {
                scores.softmax_rows()?
            };
            heads.push(probs.matmul(&v.slice_cols(s, e)?)?);
            maps.push(probs);
        }
        let merged = h.tape().concat_cols(&heads)?;
        Ok((linear(&merged, &p("attn.wo")?, &p("attn.bo")?)?, maps))
    }

    fn block<'t>(&self, bound: &Bound<'t, '_>, layer: usize, x: &Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let p = |s: &str| bound.get(&self.layer_name(layer, s));
        let h = x.layer_norm(&p("ln1.g")?, &p("ln1.b")?)?;
        let (attn, maps) = self.attention(bound, layer, &h)?;
        let x = x.add(&attn)?;
        let h = x.layer_norm(&p("ln2.g")?, &p("ln2.b")?)?;
        let f = linear(&h, &p("ffn.w1")?, &p("ffn.b1")?)?.gelu();
        let f = linear(&f, &p("ffn.w2")?, &p("ffn.b2")?)?;
        Ok((x.add(&f)?, maps))
    }

    /// Runs every layer and the final LayerNorm over an embedded sequence.
    ///
    /// With `prompts` (`l × d`), the same rows are placed in front of every
    /// layer's input and the layer's outputs at those rows are discarded, so
    /// each layer sees `l + m` rows and returns `m`.
    pub fn run_layers<'t>(&self, bound: &Bound<'t, '_>, x: Var<'t>, prompts: Option<Var<'t>>) -> Result<Trace<'t>> {
        let m = x.value().rows();
        let mut x = x;
        let mut hidden_states = Vec::with_capacity(self.config.layer_count);
        let mut attention_maps = Vec::with_capacity(self.config.layer_count);
        for layer in 0..self.config.layer_count {
            let (out, maps) = match prompts {
                Some(pr) => {
                    let l = pr.value().rows();
                    let joined = x.tape().concat_rows(&[pr, x])?;
                    let (out, maps) = self.block(bound, layer, &joined)?;
                    (out.slice_rows(l, l + m)?, maps)
                }
                None => self.block(bound, layer, &x)?,
            };
            x = out;
            hidden_states.push(x);
            attention_maps.push(maps);
        }
        let final_states = x.layer_norm(&bound.get(&self.name("ln_f.g"))?, &bound.get(&self.name("ln_f.b"))?)?;
        Ok(Trace {
            hidden_states,
            attention_maps,
            final_states,
        })
    }

    /// Full pass over token ids (EOS appended for causal encoders).
    pub fn forward_ids<'t>(&self, bound: &Bound<'t, '_>, ids: &[usize]) -> Result<Trace<'t>> {
        let seq = self.sequence_ids(ids);
        if seq.is_empty() {
            return Err(VawiError::Contract("cannot encode an empty sequence".into()));
        }
        self.check_length(seq.len())?;
        let x = self.token_embeddings(bound, &seq)?;
        let x = self.with_positions(bound, &x)?;
        self.run_layers(bound, x, None)
    }

    /// Gradient-free pass returning concrete tensors.
    pub fn encode(&self, partition: &ParameterPartition, ids: &[usize]) -> Result<EncoderOutputs> {
        let tape = Tape::new();
        let mut frozen = partition.clone();
        for g in ParamGroup::ALL {
            frozen.set_trainable(g, false);
        }
        let bound = frozen.bind(&tape);
        Ok(self.forward_ids(&bound, ids)?.outputs())
    }
}

/// An encoder together with the vocabulary that maps words to its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub net: Transformer,
    pub vocab: Vocab,
}

impl TextEncoder {
    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.ids(tokens)
    }

    pub fn forward<'t, S: AsRef<str>>(&self, bound: &Bound<'t, '_>, tokens: &[S]) -> Result<Trace<'t>> {
        self.net.forward_ids(bound, &self.ids(tokens))
    }

    pub fn encode<S: AsRef<str>>(&self, partition: &ParameterPartition, tokens: &[S]) -> Result<EncoderOutputs> {
        self.net.encode(partition, &self.ids(tokens))
    }
}

/// The bidirectional task model.
pub fn init_plm(config: &EncoderConfig, partition: &mut ParameterPartition, rng: &mut RngStream) -> Result<Transformer> {
    let t = Transformer::new(config.clone(), "plm", ParamGroup::Plm, None)?;
    t.register(partition, rng)?;
    Ok(t)
}

/// The frozen causal aligned encoder. Token embeddings carry each content
/// word's attribute as a one-hot block in dims `[0, C)`; every other word has
/// zeros there. All `vlp` tensors are frozen afterwards.
pub fn init_vl_encoder(
    config: &EncoderConfig,
    vocab: &Vocab,
    attributes: &AttributeTable,
    partition: &mut ParameterPartition,
    rng: &mut RngStream,
) -> Result<Transformer> {
    let classes = attributes.classes();
    if classes > config.hidden_size {
        return Err(VawiError::Config(format!(
            "{classes} attribute classes do not fit in hidden size {}",
            config.hidden_size
        )));
    }
    if vocab.len() > config.vocab_size {
        return Err(VawiError::Config(format!(
            "vocabulary of {} words exceeds vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let t = Transformer::new(config.clone(), "vlp", ParamGroup::Vlp, vocab.eos())?;
    t.register(partition, rng)?;
    let d = config.hidden_size;
    let emb = partition.get_mut(&t.name("tok_emb"))?;
    for (id, word) in vocab.words().iter().enumerate() {
        let row = &mut emb.data_mut()[id * d..id * d + classes];
        row.iter_mut().for_each(|x| *x = 0.0);
        if let Some(c) = attributes.get(word) {
            row[c] = ATTRIBUTE_SCALE;
        }
    }
    partition.set_trainable(ParamGroup::Vlp, false);
    Ok(t)
}
