use std::collections::{BTreeSet, HashMap};

use super::annotate::{Lexicon, Stopwords};
use super::dataset::LabeledExample;
use super::synthetic::AttributeTable;
use super::tokenize::tokenize;

pub const UNK: &str = "[UNK]";
pub const EOS: &str = "[EOS]";

/// Word-level vocabulary. Ids are assigned to special tokens first, then to
/// words in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    eos: Option<usize>,
}

impl Vocab {
    pub fn build<I, S>(words: I, with_eos: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        let mut list = vec![UNK.to_string()];
        if with_eos {
            list.push(EOS.to_string());
        }
        list.extend(sorted.into_iter().filter(|w| w != UNK && w != EOS));
        let index = list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab {
            words: list,
            index,
            eos: with_eos.then_some(1),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn eos(&self) -> Option<usize> {
        self.eos
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or the unknown-word id.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(0)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// The shared word list both encoders build their vocabularies from: the
/// caption prefix, bundled stopwords and lexicon, every attribute-table word,
/// and every token of the given datasets.
pub fn word_list<'a>(
    attributes: &AttributeTable,
    datasets: impl IntoIterator<Item = &'a [LabeledExample]>,
    caption_prefix: &str,
) -> BTreeSet<String> {
    let mut words: BTreeSet<String> = tokenize(caption_prefix).tokens.into_iter().collect();
    words.extend(Stopwords::bundled().sorted());
    words.extend(Lexicon::bundled().words().map(str::to_string));
    words.extend(attributes.iter().map(|(w, _)| w.to_string()));
    for set in datasets {
        for ex in set {
            words.extend(ex.text.tokens.iter().cloned());
        }
    }
    words
}
