//! Save a model checkpoint, reload it, and confirm the bytes are stable.
use vawi::encoders::checkpoint::{load_checkpoint, save_checkpoint};
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
    let dir = std::env::temp_dir().join("vawi-checkpoint-example");
    let (first, second) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    std::fs::create_dir_all(&dir).expect("writable temp dir");
    save_checkpoint(&model.params, &first)?;
    let loaded = load_checkpoint(&first)?;
    save_checkpoint(&loaded, &second)?;
    let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    println!("{} tensors, {} bytes, save→load→save identical: {}", loaded.len(), a.len(), a == b);
    Ok(())
}
