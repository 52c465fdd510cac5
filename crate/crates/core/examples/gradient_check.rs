//! Finite-difference checks of the reformulation layer, the learned
//! extractor and the full one-example pipeline.
use vawi::diagnostics::gradcheck_suite;
use vawi::gradcheck::GradCheckOptions;
use vawi::injection::{InjectionConfig, ModelConfig, VawiModel};
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
    let opts = GradCheckOptions { max_coords_per_tensor: Some(8), ..GradCheckOptions::default() };
    for r in gradcheck_suite(&model, &task.train[0], &InjectionConfig::default(), &opts)? {
        println!("{:<14} max_rel_err {:.2e} over {} coords, passed: {}", r.name, r.max_rel_err, r.checked, r.passed);
    }
    Ok(())
}
