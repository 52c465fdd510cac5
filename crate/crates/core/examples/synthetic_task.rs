//! Generate the held-out-vocabulary task and show a few sentences.
use vawi::text::{content_words, generate_synthetic, SyntheticTaskSpec};

fn main() -> vawi::error::Result<()> {
    let task = generate_synthetic(&SyntheticTaskSpec::default(), 0)?;
    println!(
        "{} train / {} test sentences; {} train and {} test content words, disjoint: {}",
        task.train.len(),
        task.test.len(),
        task.train_vocab.len(),
        task.test_vocab.len(),
        task.train_vocab.is_disjoint(&task.test_vocab)
    );
    for ex in task.train.iter().take(3).chain(task.test.iter().take(3)) {
        let attrs: Vec<String> = content_words(ex)
            .map(|w| format!("{w}:{}", task.attributes.get(w).unwrap()))
            .collect();
        println!("{:?} label={:?} [{}]", ex.text.raw, ex.label, attrs.join(" "));
    }
    Ok(())
}
