//! Compose the caption prefix, encode it, and reformulate it into
//! per-word augmentation rows.
use vawi::augmentation::{compose_prefix, encode_aligned, reformulate_values};
use vawi::extraction::extract_sbs;
use vawi::injection::{ModelConfig, VawiModel};
use vawi::text::{generate_synthetic, SyntheticTaskSpec, TaskKind};

fn main() -> vawi::error::Result<()> {
    let task = generate_synthetic(&SyntheticTaskSpec::default(), 0)?;
    let model = VawiModel::build(
        &ModelConfig::default(),
        &task.attributes,
        &[&task.train, &task.test],
        TaskKind::Classification { classes: 4 },
        0,
        true,
    )?;
    let ex = &task.train[0];
    let sel = extract_sbs(&ex.text);
    let Some(prefix) = compose_prefix(&sel) else {
        println!("no VH-words: no augmentation");
        return Ok(());
    };
    let aligned = encode_aligned(&prefix, &model.vl, &model.params)?;
    let (va, attention) = reformulate_values(&model.params, &aligned, &sel.indices)?;
    println!("prefix {prefix:?}: {} aligned rows, VH spans {:?}", aligned.len(), aligned.vh_token_spans);
    println!("augmentation rows {:?} for sentence positions {:?}", va.rows.shape(), va.source_positions);
    for (word, row) in sel.words.iter().zip(attention.to_rows()) {
        let row: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("  {word:<12} attends {}", row.join(" "));
    }
    Ok(())
}
