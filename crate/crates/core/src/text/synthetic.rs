//! Held-out-vocabulary synthetic classification task.
//!
//! Each invented content word carries a hidden attribute class. Sentences mix
//! a few content words with stopword filler and are labelled from the hidden
//! attributes. Test sentences use only content words that never occur in
//! training, so a text-only model cannot have learned their attributes; the
//! attribute table is what the frozen aligned encoder gets built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VawiError};
use crate::rng::{Purpose, RngStream, StreamKey};

use super::annotate::{Lexicon, Stopwords};
use super::dataset::{Label, LabeledExample};
use super::tokenize::PosTag;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SUFFIXES: &[&str] = &["ness", "ity", "tion", "ous", "ful", "ish"];
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Most frequent attribute among the sentence's content words. Sentences
    /// without a strict majority are never generated.
    MajorityAttribute,
    FirstWordAttribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Distinct content words across both splits.
    pub vocab_size: usize,
    /// Content words per sentence.
    pub content_word_count: usize,
    pub attribute_class_count: usize,
    /// Total words per sentence, content plus stopword filler.
    pub words_per_sentence: usize,
    /// Fraction of the content vocabulary held out for the test split.
    pub test_vocab_fraction: f64,
    pub label_rule: LabelRule,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 200,
            content_word_count: 3,
            attribute_class_count: 4,
            words_per_sentence: 7,
            test_vocab_fraction: 0.5,
            label_rule: LabelRule::MajorityAttribute,
            train_size: 400,
            test_size: 200,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VawiError::Config(m.to_string()));
        if self.attribute_class_count < 2 {
            return bad("attribute_class_count must be at least 2");
        }
        if self.content_word_count == 0 {
            return bad("content_word_count must be at least 1");
        }
        if self.words_per_sentence < self.content_word_count {
            return bad("words_per_sentence must be >= content_word_count");
        }
        if !(0.0..1.0).contains(&self.test_vocab_fraction) || self.test_vocab_fraction == 0.0 {
            return bad("test_vocab_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// Hidden attribute class of every content word.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeTable {
    classes: usize,
    map: BTreeMap<String, usize>,
}

impl AttributeTable {
    pub fn new(classes: usize, map: BTreeMap<String, usize>) -> Result<Self> {
        if let Some((w, &c)) = map.iter().find(|(_, &c)| c >= classes) {
            return Err(VawiError::Config(format!("attribute {c} of {w:?} out of range for {classes} classes")));
        }
        Ok(AttributeTable { classes, map })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.map.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.map.iter().map(|(w, &c)| (w.as_str(), c))
    }

    /// `word<TAB>class` lines, sorted by word, preceded by a `#classes<TAB>C` header.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("#classes\t{}\n", self.classes);
        for (w, c) in &self.map {
            let _ = writeln!(s, "{w}\t{c}");
        }
        s
    }

    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut classes = None;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| VawiError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let (a, b) = line.split_once('\t').ok_or_else(|| bad("expected two tab-separated fields"))?;
            let n: usize = b.trim().parse().map_err(|_| bad("expected an integer"))?;
            if a == "#classes" {
                classes = Some(n);
            } else {
                map.insert(a.to_string(), n);
            }
        }
        let classes = classes.unwrap_or_else(|| map.values().max().map_or(0, |m| m + 1));
        AttributeTable::new(classes, map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VawiError::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub attributes: AttributeTable,
    pub train_vocab: BTreeSet<String>,
    pub test_vocab: BTreeSet<String>,
}

/// Label of a sentence whose content words have attributes `attrs`; `None`
/// when the majority rule has no strict winner.
pub fn label_for(rule: LabelRule, attrs: &[usize], classes: usize) -> Option<usize> {
    match rule {
        LabelRule::FirstWordAttribute => attrs.first().copied(),
        LabelRule::MajorityAttribute => {
            let mut counts = vec![0usize; classes];
            for &a in attrs {
                counts[a] += 1;
            }
            let best = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
            let (class, _) = winners.next()?;
            winners.next().is_none().then_some(class)
        }
    }
}

/// Errors when the two content vocabularies share a word.
pub fn verify_disjoint(train: &BTreeSet<String>, test: &BTreeSet<String>) -> Result<()> {
    if let Some(w) = train.intersection(test).next() {
        return Err(VawiError::Contract(format!("content word {w:?} appears in both train and test vocabularies")));
    }
    Ok(())
}

fn invent_words(n: usize, lexicon: &Lexicon, stopwords: &Stopwords, rng: &mut RngStream) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(n);
    let pick = |rng: &mut RngStream, set: &[u8]| set[rng.below(set.len())] as char;
    while words.len() < n {
        let mut w = String::new();
        for _ in 0..2 {
            w.push(pick(rng, CONSONANTS));
            w.push(pick(rng, VOWELS));
        }
        w.push_str(SUFFIXES[rng.below(SUFFIXES.len())]);
        let tag = lexicon.tag(&w);
        if lexicon.get(&w).is_none() && !stopwords.contains(&w) && tag.is_content() && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sentences(
    spec: &SyntheticTaskSpec,
    vocab: &[(String, usize)],
    count: usize,
    filler: &[String],
    rng: &mut RngStream,
    lexicon: &Lexicon,
    stopwords: &Stopwords,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempt = 0;
        let (chosen, label) = loop {
            attempt += 1;
            if attempt > MAX_ATTEMPTS {
                return Err(VawiError::Config("could not generate a sentence with a strict majority label".into()));
            }
            let mut idx: Vec<usize> = (0..vocab.len()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(spec.content_word_count);
            let attrs: Vec<usize> = idx.iter().map(|&i| vocab[i].1).collect();
            if let Some(label) = label_for(spec.label_rule, &attrs, spec.attribute_class_count) {
                break (idx, label);
            }
        };
        let mut slots: Vec<usize> = (0..spec.words_per_sentence).collect();
        rng.shuffle(&mut slots);
        let mut content_slots = slots[..spec.content_word_count].to_vec();
        content_slots.sort_unstable();

        let mut words: Vec<&str> = (0..spec.words_per_sentence)
            .map(|_| filler[rng.below(filler.len())].as_str())
            .collect();
        // chosen[0] lands in the earliest slot, matching first_word_attribute
        for (slot, &vi) in content_slots.iter().zip(&chosen) {
            words[*slot] = &vocab[vi].0;
        }
        out.push(LabeledExample::new(&words.join(" "), Label::Class(label), lexicon, stopwords));
    }
    Ok(out)
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let lexicon = Lexicon::bundled();
    let stopwords = Stopwords::bundled();
    let classes = spec.attribute_class_count;
    let stream = |k| RngStream::new(seed, StreamKey::once(Purpose::Generate(k)));

    let mut words = invent_words(spec.vocab_size, &lexicon, &stopwords, &mut stream(0));
    stream(1).shuffle(&mut words);

    // balanced attributes, then a per-class split so both sides see every class
    let mut by_class: Vec<Vec<String>> = vec![Vec::new(); classes];
    for (i, w) in words.into_iter().enumerate() {
        by_class[i % classes].push(w);
    }
    let mut train_vocab = Vec::new();
    let mut test_vocab = Vec::new();
    for (c, ws) in by_class.into_iter().enumerate() {
        let n_test = (ws.len() as f64 * spec.test_vocab_fraction).round() as usize;
        let n_train = ws.len() - n_test;
        if n_train == 0 || n_test == 0 {
            return Err(VawiError::Config(format!(
                "vocabulary of {} content words is too small to split class {c} between train and test",
                spec.vocab_size
            )));
        }
        for (i, w) in ws.into_iter().enumerate() {
            if i < n_train {
                train_vocab.push((w, c));
            } else {
                test_vocab.push((w, c));
            }
        }
    }
    if train_vocab.len() < spec.content_word_count || test_vocab.len() < spec.content_word_count {
        return Err(VawiError::Config(format!(
            "vocabulary too small: {} train / {} test content words for {} per sentence",
            train_vocab.len(),
            test_vocab.len(),
            spec.content_word_count
        )));
    }

    let filler = stopwords.sorted();
    let train = sentences(spec, &train_vocab, spec.train_size, &filler, &mut stream(2), &lexicon, &stopwords)?;
    let test = sentences(spec, &test_vocab, spec.test_size, &filler, &mut stream(3), &lexicon, &stopwords)?;

    let train_set: BTreeSet<String> = train_vocab.iter().map(|(w, _)| w.clone()).collect();
    let test_set: BTreeSet<String> = test_vocab.iter().map(|(w, _)| w.clone()).collect();
    verify_disjoint(&train_set, &test_set)?;

    let attributes = AttributeTable::new(classes, train_vocab.into_iter().chain(test_vocab).collect())?;
    Ok(SyntheticTask {
        train,
        test,
        attributes,
        train_vocab: train_set,
        test_vocab: test_set,
    })
}

/// Content words (non-stopword nouns/adjectives) of an annotated example.
pub fn content_words(ex: &LabeledExample) -> impl Iterator<Item = &str> {
    ex.text
        .tokens
        .iter()
        .zip(&ex.text.pos_tags)
        .zip(&ex.text.stopword_flags)
        .filter(|((_, t), &s)| matches!(t, PosTag::Noun | PosTag::Adj) && !s)
        .map(|((w, _), _)| w.as_str())
}
