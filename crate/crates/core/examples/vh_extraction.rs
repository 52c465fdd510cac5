//! Compare the three VH-word extraction strategies on the same sentences.
use vawi::extraction::{extract_lbs, extract_sbs, extract_vabs};
use vawi::injection::{ModelConfig, VawiModel};
use vawi::rng::{Purpose, RngStream, StreamKey};
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
    let k = 3;
    for (i, ex) in task.train.iter().take(5).enumerate() {
        let mut rng = RngStream::new(0, StreamKey::once(Purpose::Gumbel(i as u32)));
        println!("{:?}", ex.text.raw);
        println!("  sbs  {:?}", extract_sbs(&ex.text).words);
        println!("  vabs {:?}", extract_vabs(&ex.text, &model.vl, &model.params, k)?.words);
        println!("  lbs  {:?}", extract_lbs(&ex.text, &model.lbs_models(), &model.params, k, 1.0, &mut rng)?.words);
    }
    Ok(())
}
