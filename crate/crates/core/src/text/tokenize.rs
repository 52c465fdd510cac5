use serde::{Deserialize, Serialize};

/// Coarse part-of-speech tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    Verb,
    Other,
}

impl PosTag {
    pub fn parse(s: &str) -> Option<PosTag> {
        match s.trim() {
            "NOUN" => Some(PosTag::Noun),
            "ADJ" => Some(PosTag::Adj),
            "VERB" => Some(PosTag::Verb),
            "OTHER" => Some(PosTag::Other),
            _ => None,
        }
    }

    pub fn is_content(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Adj)
    }
}

/// One input text split into lowercased word and punctuation tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub raw: String,
    pub tokens: Vec<String>,
    /// Byte ranges into `raw`.
    pub offsets: Vec<(usize, usize)>,
    pub pos_tags: Vec<PosTag>,
    pub stopword_flags: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The raw slice a token came from.
    pub fn surface(&self, i: usize) -> &str {
        let (s, e) = self.offsets[i];
        &self.raw[s..e]
    }
}

/// Splits on whitespace; each run of alphanumeric characters is a word and
/// every other non-space character is its own punctuation token. All tags
/// start as `Other` until [`annotate`](super::annotate) runs.
pub fn tokenize(raw: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let mut word_start: Option<usize> = None;

    let flush = |start: usize, end: usize, tokens: &mut Vec<String>, offsets: &mut Vec<(usize, usize)>| {
        tokens.push(raw[start..end].to_lowercase());
        offsets.push((start, end));
    };

    for (i, ch) in raw.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            flush(s, i, &mut tokens, &mut offsets);
        }
        if !ch.is_whitespace() {
            flush(i, i + ch.len_utf8(), &mut tokens, &mut offsets);
        }
    }
    if let Some(s) = word_start {
        flush(s, raw.len(), &mut tokens, &mut offsets);
    }

    let n = tokens.len();
    TokenizedText {
        raw: raw.to_string(),
        tokens,
        offsets,
        pos_tags: vec![PosTag::Other; n],
        stopword_flags: vec![false; n],
    }
}
