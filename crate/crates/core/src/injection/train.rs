//! Training loop, evaluation and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationSource;
use crate::autodiff::Tape;
use crate::encoders::ParamGroup;
use crate::error::{Result, VawiError};
use crate::extraction::WeightMode;
use crate::optim::{adam_step, scheduled_lr, warmup_steps, AdamState};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::text::{Label, LabeledExample, TaskKind};

use super::config::{InjectionConfig, InsertionPosition, TrainConfig};
use super::model::{argmax, forward_example, AugmentCache, ForwardContext, ModelConfig, StepKey, VawiModel};

/// Env var capping evaluation threads.
pub const THREADS_ENV: &str = "VAWI_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub loss: f64,
    /// Training accuracy (classification) or MSE (regression) over the
    /// epoch's forward passes.
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub per_epoch: Vec<EpochRecord>,
    /// L2 distance between final and initial tensors, per group name.
    pub group_update_norms: BTreeMap<String, f64>,
    pub steps: usize,
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification { .. } => "accuracy",
        TaskKind::Regression => "mse",
    }
}

/// Per-example score: 1/0 correctness for classification, squared error for
/// regression.
fn example_score(task: TaskKind, prediction: &[f64], label: Label) -> f64 {
    match (task, label) {
        (TaskKind::Classification { .. }, Label::Class(c)) => (argmax(prediction) == c) as u8 as f64,
        (_, Label::Value(y)) => (prediction[0] - y).powi(2),
        _ => f64::NAN,
    }
}

/// Trains the groups the regime leaves trainable. Per step: extract →
/// subsample → augment → inject → forward → backward → Adam.
pub fn train(
    model: &mut VawiModel,
    data: &[LabeledExample],
    inj: &InjectionConfig,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    inj.validate()?;
    tc.validate()?;
    model.set_regime(inj.regime);
    let initial = model.params.clone();
    let trainable = model.params.trainable_ids();
    let shapes: Vec<Vec<usize>> = trainable
        .iter()
        .map(|&i| model.params.entries()[i].tensor.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = AdamState::new(&shape_refs, tc.lr, tc.weight_decay);

    let batches_per_epoch = data.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let warmup = warmup_steps(total_steps, tc.warmup_fraction);
    let mut cache = AugmentCache::new();
    let mut per_epoch = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::new(tc.seed, StreamKey::new(epoch as u64, 0, Purpose::Shuffle)).shuffle(&mut order);
        let (mut loss_sum, mut score_sum) = (0.0, 0.0);
        for (batch, chunk) in order.chunks(tc.batch_size).enumerate() {
            step += 1;
            let grads = {
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let mut total = None;
                for &i in chunk {
                    let mut ctx = ForwardContext {
                        example_index: i,
                        seed: tc.seed,
                        step: StepKey::Train {
                            epoch: epoch as u64,
                            batch: batch as u64,
                        },
                        weight_mode: WeightMode::StraightThrough,
                        cache: &mut cache,
                    };
                    let out = forward_example(model, &bound, &data[i], inj, &mut ctx)?;
                    score_sum += example_score(model.task, out.prediction.data(), data[i].label);
                    total = Some(match total {
                        None => out.loss,
                        Some(t) => out.loss.add(&t)?,
                    });
                }
                let loss = total.expect("non-empty batch").scale(1.0 / chunk.len() as f64);
                let value = loss.value().item();
                if !value.is_finite() {
                    return Err(VawiError::NonFinite { step });
                }
                loss_sum += value;
                tape.backward(loss)?;
                let all = bound.grads();
                trainable.iter().map(|&i| all[i].clone()).collect::<Vec<_>>()
            };
            adam.lr = scheduled_lr(tc.lr, step, warmup);
            let mut refs: Vec<&mut crate::tensor::Tensor> = model
                .params
                .entries_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| trainable.binary_search(i).is_ok())
                .map(|(_, p)| &mut p.tensor)
                .collect();
            adam_step(&mut refs, &grads, &mut adam)?;
        }
        per_epoch.push(EpochRecord {
            loss: loss_sum / batches_per_epoch.max(1) as f64,
            metric: score_sum / data.len().max(1) as f64,
        });
    }

    let group_update_norms = ParamGroup::ALL
        .iter()
        .filter(|&&g| model.params.in_group(g).next().is_some())
        .map(|&g| (g.name().to_string(), model.params.group_distance(&initial, g)))
        .collect();
    Ok(TrainReport {
        per_epoch,
        group_update_norms,
        steps: step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric_name: String,
    /// Accuracy or MSE over the dataset.
    pub metric: f64,
    pub loss: f64,
    pub predictions: Vec<Vec<f64>>,
}

/// Worker count from `VAWI_THREADS`, else the machine's parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Loss and output row of one evaluated example.
type ScoredExample = (f64, Vec<f64>);

fn evaluate_range(
    model: &VawiModel,
    data: &[LabeledExample],
    offset: usize,
    inj: &InjectionConfig,
    seed: u64,
) -> Result<Vec<ScoredExample>> {
    let mut cache = AugmentCache::new();
    let mut frozen = model.params.clone();
    ParamGroup::ALL.iter().for_each(|&g| frozen.set_trainable(g, false));
    let mut out = Vec::with_capacity(data.len());
    for (j, ex) in data.iter().enumerate() {
        let tape = Tape::new();
        let bound = frozen.bind(&tape);
        let mut ctx = ForwardContext {
            example_index: offset + j,
            seed,
            step: StepKey::Eval,
            weight_mode: WeightMode::StraightThrough,
            cache: &mut cache,
        };
        let r = forward_example(model, &bound, ex, inj, &mut ctx)?;
        out.push((r.loss.value().item(), r.prediction.data().to_vec()));
    }
    Ok(out)
}

/// Metric over `data`. Deterministic for any thread count: examples are
/// sharded into contiguous chunks and reduced in dataset order.
pub fn evaluate(model: &VawiModel, data: &[LabeledExample], inj: &InjectionConfig, seed: u64) -> Result<Evaluation> {
    inj.validate()?;
    let threads = eval_threads().min(data.len()).max(1);
    let chunk = data.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<ScoredExample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || evaluate_range(model, part, c * chunk, inj, seed)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut loss = 0.0;
    let mut score = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    let mut i = 0;
    for part in parts {
        for (l, p) in part? {
            loss += l;
            score += example_score(model.task, &p, data[i].label);
            predictions.push(p);
            i += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        metric_name: metric_name(model.task).to_string(),
        metric: score / n,
        loss: loss / n,
        predictions,
    })
}

/// Everything one train-and-evaluate run needs.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub model: &'a ModelConfig,
    pub attributes: &'a crate::text::AttributeTable,
    pub train: &'a [LabeledExample],
    pub test: &'a [LabeledExample],
    pub task: TaskKind,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: VawiModel,
    pub report: TrainReport,
    pub evaluation: Evaluation,
}

impl Experiment<'_> {
    pub fn build(&self, seed: u64, attach_augmentation: bool) -> Result<VawiModel> {
        VawiModel::build(
            self.model,
            self.attributes,
            &[self.train, self.test],
            self.task,
            seed,
            attach_augmentation,
        )
    }

    /// Builds, trains and evaluates a model with augmentation modules.
    pub fn run(&self, inj: &InjectionConfig, tc: &TrainConfig) -> Result<RunResult> {
        self.run_with(inj, tc, true)
    }

    /// The same run on a plain text model with no augmentation modules.
    pub fn run_baseline(&self, tc: &TrainConfig) -> Result<RunResult> {
        let inj = InjectionConfig {
            insertion_position: InsertionPosition::None,
            ..InjectionConfig::default()
        };
        self.run_with(&inj, tc, false)
    }

    fn run_with(&self, inj: &InjectionConfig, tc: &TrainConfig, attach: bool) -> Result<RunResult> {
        let mut model = self.build(tc.seed, attach)?;
        let report = train(&mut model, self.train, inj, tc)?;
        let evaluation = evaluate(&model, self.test, inj, tc.seed)?;
        Ok(RunResult {
            model,
            report,
            evaluation,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    InsertionPosition,
    AugmentationSource,
    VhFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::InsertionPosition => "insertion_position",
            SweepAxis::AugmentationSource => "augmentation_source",
            SweepAxis::VhFraction => "vh_fraction",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::K => &["2", "3", "4", "5"],
            SweepAxis::InsertionPosition => &["after_vh", "before_text", "after_text", "none"],
            SweepAxis::AugmentationSource => &["vl_encoder", "random_noise"],
            SweepAxis::VhFraction => &["0", "0.2", "0.5", "1.0"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &InjectionConfig, value: &str) -> Result<InjectionConfig> {
        let bad = |e: String| VawiError::Config(format!("bad {} value {value:?}: {e}", self.name()));
        let mut cfg = base.clone();
        match self {
            SweepAxis::K => cfg.k = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            SweepAxis::InsertionPosition => cfg.insertion_position = value.parse()?,
            SweepAxis::AugmentationSource => cfg.augmentation_source = AugmentationSource::from_str(value)?,
            SweepAxis::VhFraction => {
                cfg.vh_fraction = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = VawiError;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::K,
            SweepAxis::InsertionPosition,
            SweepAxis::AugmentationSource,
            SweepAxis::VhFraction,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| VawiError::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub metric_name: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\t{}\n", self.axis.name(), self.metric_name);
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}", r.value, r.metric);
        }
        s
    }

    pub fn metric(&self, value: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.value == value).map(|r| r.metric)
    }
}

/// One train-and-evaluate run per value, all from the same seed.
pub fn ablation_sweep(
    exp: &Experiment<'_>,
    base: &InjectionConfig,
    tc: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let cfg = axis.apply(base, v)?;
        let r = exp.run(&cfg, tc)?;
        rows.push(SweepRow {
            value: v.clone(),
            metric: r.evaluation.metric,
        });
    }
    Ok(SweepTable {
        axis,
        metric_name: metric_name(exp.task).to_string(),
        rows,
    })
}
