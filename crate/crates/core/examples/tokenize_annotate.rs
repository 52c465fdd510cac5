//! Tokenize a sentence, tag it, and list its VH-word candidates.
use vawi::extraction::extract_sbs;
use vawi::text::{annotate, tokenize, Lexicon, Stopwords};

fn main() {
    let raw = std::env::args().nth(1).unwrap_or_else(|| "He is eating a green apple".into());
    let text = annotate(&tokenize(&raw), &Lexicon::bundled(), &Stopwords::bundled());
    for i in 0..text.len() {
        println!(
            "{:>2} {:<12} {:?} stopword={} raw={:?}",
            i,
            text.tokens[i],
            text.pos_tags[i],
            text.stopword_flags[i],
            text.surface(i)
        );
    }
    println!("VH-words (syntax-based): {:?}", extract_sbs(&text).words);
}
