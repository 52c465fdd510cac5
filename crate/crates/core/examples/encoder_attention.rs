//! Run both toy encoders on one sentence and print their attention.
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
    let ex = &task.test[0];
    println!("sentence: {:?}", ex.text.raw);
    for (label, encoder) in [("task encoder (bidirectional)", &model.plm), ("aligned encoder (causal, + EOS)", &model.vl)] {
        let out = encoder.encode(&model.params, &ex.text.tokens)?;
        println!("{label}: {} layers, final states {:?}", out.hidden_states.len(), out.final_states.shape());
        let map = &out.attention_maps[0][0];
        for r in 0..map.rows() {
            let row: Vec<String> = map.row(r).iter().map(|a| format!("{a:.2}")).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
