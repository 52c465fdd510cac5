//! Train the augmented model and the plain baseline on the synthetic task.
//! Pass `prompt_tune` as the first argument to train only the reformulation
//! layer and head.
use vawi::injection::{Experiment, InjectionConfig, ModelConfig, TrainConfig};
use vawi::text::{generate_synthetic, SyntheticTaskSpec, TaskKind};

fn main() -> vawi::error::Result<()> {
    let regime = std::env::args().nth(1).unwrap_or_else(|| "full_finetune".into()).parse()?;
    let task = generate_synthetic(&SyntheticTaskSpec::default(), 0)?;
    let model = ModelConfig::default();
    let exp = Experiment {
        model: &model,
        attributes: &task.attributes,
        train: &task.train,
        test: &task.test,
        task: TaskKind::Classification { classes: 4 },
    };
    let tc = TrainConfig::default();
    let inj = InjectionConfig { regime, ..InjectionConfig::default() };
    let augmented = exp.run(&inj, &tc)?;
    let baseline = exp.run_baseline(&tc)?;
    for (epoch, rec) in augmented.report.per_epoch.iter().enumerate() {
        println!("epoch {epoch}: loss {:.4} train accuracy {:.3}", rec.loss, rec.metric);
    }
    println!("update norms {:?}", augmented.report.group_update_norms);
    println!("test accuracy: augmented {:.3}, baseline {:.3}", augmented.evaluation.metric, baseline.evaluation.metric);
    Ok(())
}
