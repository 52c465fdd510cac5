//! Sweep one ablation axis (default: insertion_position) and print the TSV.
use vawi::injection::{ablation_sweep, Experiment, InjectionConfig, ModelConfig, SweepAxis, TrainConfig};
use vawi::text::{generate_synthetic, SyntheticTaskSpec, TaskKind};

fn main() -> vawi::error::Result<()> {
    let axis: SweepAxis = std::env::args().nth(1).unwrap_or_else(|| "insertion_position".into()).parse()?;
    let task = generate_synthetic(&SyntheticTaskSpec::default(), 0)?;
    let model = ModelConfig::default();
    let exp = Experiment {
        model: &model,
        attributes: &task.attributes,
        train: &task.train,
        test: &task.test,
        task: TaskKind::Classification { classes: 4 },
    };
    let table = ablation_sweep(&exp, &InjectionConfig::default(), &TrainConfig::default(), axis, &axis.default_values())?;
    print!("{}", table.to_tsv());
    Ok(())
}
