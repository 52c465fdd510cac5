//! Tokenization, POS/stopword annotation, dataset files and the synthetic
//! held-out-vocabulary task.

mod annotate;
mod dataset;
mod synthetic;
mod tokenize;
mod vocab;

pub use annotate::{annotate, Lexicon, Stopwords};
pub use dataset::{load_jsonl, parse_jsonl, save_jsonl, to_jsonl, Label, LabeledExample, TaskKind};
pub use synthetic::{
    content_words, generate_synthetic, label_for, verify_disjoint, AttributeTable, LabelRule, SyntheticTask,
    SyntheticTaskSpec,
};
pub use tokenize::{tokenize, PosTag, TokenizedText};
pub use vocab::{word_list, Vocab, EOS, UNK};
