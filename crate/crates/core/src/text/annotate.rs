//! Lexicon + suffix-rule POS tagging and stopword flags.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Result, VawiError};

use super::tokenize::{PosTag, TokenizedText};

const BUNDLED_LEXICON: &str = include_str!("../../data/lexicon.tsv");
const BUNDLED_STOPWORDS: &str = include_str!("../../data/stopwords.txt");

/// Suffix fallbacks, checked in order; the first match wins.
const SUFFIX_RULES: &[(&str, PosTag)] = &[
    ("ness", PosTag::Noun),
    ("tion", PosTag::Noun),
    ("sion", PosTag::Noun),
    ("ity", PosTag::Noun),
    ("ment", PosTag::Noun),
    ("er", PosTag::Noun),
    ("ous", PosTag::Adj),
    ("ful", PosTag::Adj),
    ("ish", PosTag::Adj),
    ("y", PosTag::Adj),
];

/// Minimum characters left in front of a suffix for a rule to fire.
const MIN_STEM: usize = 2;

#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    tags: HashMap<String, PosTag>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON, Path::new("<bundled lexicon>")).expect("bundled lexicon is well-formed")
    }

    /// Parses `word<TAB>TAG` lines. Blank lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut tags = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| VawiError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected word<TAB>TAG".into()))?;
            let tag = PosTag::parse(tag).ok_or_else(|| bad(format!("unknown tag {tag:?}")))?;
            tags.insert(word.trim().to_lowercase(), tag);
        }
        Ok(Lexicon { tags })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VawiError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.tags.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tags.keys().map(String::as_str)
    }

    /// Lexicon entry, else suffix rule, else `Other`.
    pub fn tag(&self, word: &str) -> PosTag {
        if let Some(tag) = self.get(word) {
            return tag;
        }
        if !word.chars().all(char::is_alphabetic) {
            return PosTag::Other;
        }
        let chars = word.chars().count();
        SUFFIX_RULES
            .iter()
            .find(|(suffix, _)| word.ends_with(suffix) && chars >= suffix.len() + MIN_STEM)
            .map_or(PosTag::Other, |&(_, tag)| tag)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Stopwords {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    pub fn parse(text: &str) -> Self {
        Stopwords {
            words: text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VawiError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Sorted, for deterministic iteration.
    pub fn sorted(&self) -> Vec<String> {
        let mut v: Vec<String> = self.words.iter().cloned().collect();
        v.sort();
        v
    }
}

/// Recomputes POS tags and stopword flags from scratch.
pub fn annotate(text: &TokenizedText, lexicon: &Lexicon, stopwords: &Stopwords) -> TokenizedText {
    let mut out = text.clone();
    out.pos_tags = text.tokens.iter().map(|w| lexicon.tag(w)).collect();
    out.stopword_flags = text.tokens.iter().map(|w| stopwords.contains(w)).collect();
    out
}
