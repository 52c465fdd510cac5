//! Injecting augmentation rows into the task encoder, the two tuning
//! regimes, training, evaluation and sweeps.

mod config;
mod insert;
mod model;
mod train;

pub use config::{InjectionConfig, InsertionPosition, LossKind, Regime, TrainConfig};
pub use insert::{inject_embeddings, injection_layout, IndexMap};
pub use model::{
    argmax, augmentation_rows, forward_example, AugmentCache, ExampleOutput, ForwardContext, ModelConfig, StepKey,
    VawiModel, HEAD_B, HEAD_W,
};
pub use train::{
    ablation_sweep, eval_threads, evaluate, train, EpochRecord, Evaluation, Experiment, RunResult, SweepAxis,
    SweepRow, SweepTable, TrainReport, THREADS_ENV,
};
