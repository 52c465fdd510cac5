//! The `vawi` command line: gen, extract, train, eval, sweep, gradcheck,
//! dump-attn.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure.

mod config;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{Dataset, RunConfig, ATTRIBUTES_FILE, TEST_FILE, TRAIN_FILE};

use crate::augmentation::names as reform_names;
use crate::diagnostics::{dump_attention, gradcheck_suite, GRADCHECK_TOLERANCE};
use crate::encoders::{checkpoint, ParamGroup, ParameterPartition};
use crate::error::{Result, VawiError};
use crate::extraction::{extract_lbs, extract_sbs, extract_vabs, Strategy, VhSelection};
use crate::gradcheck::GradCheckOptions;
use crate::injection::{ablation_sweep, evaluate, EpochRecord, SweepAxis, VawiModel};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::text::{annotate, generate_synthetic, save_jsonl, tokenize, Label, LabeledExample, Lexicon, Stopwords};

pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "vawi", version, about = "Visually-augmented toy language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; set values override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// sbs | vabs | lbs
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// full_finetune | prompt_tune
    #[arg(long, global = true)]
    pub regime: Option<String>,
    /// after_vh | before_text | after_text | none
    #[arg(long, global = true)]
    pub position: Option<String>,
    /// vl_encoder | random_noise
    #[arg(long, global = true)]
    pub source: Option<String>,
    /// Fraction of VH-words kept.
    #[arg(long, global = true)]
    pub fraction: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset and attribute table.
    Gen(GenArgs),
    /// Extract VH-words for every line of a text or JSONL file.
    Extract(ExtractArgs),
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a fresh initialization) on the test split.
    Eval(EvalArgs),
    /// Train and evaluate once per value of one ablation axis.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks over the model's differentiable paths.
    Gradcheck(GradcheckArgs),
    /// Dump task-encoder attention for one input before and after augmentation.
    DumpAttn(DumpArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    /// Plain text (one sentence per line) or JSONL with a "text" field.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Drop the augmentation modules and evaluate the plain text model.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// k | insertion_position | augmentation_source | vh_fraction
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; defaults depend on the axis.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 6)]
    pub coords: usize,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Common {
    /// Config file (or defaults) with flag overrides applied and validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let inj = &mut cfg.injection;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = &self.strategy {
            inj.strategy = s.parse()?;
        }
        if let Some(k) = self.k {
            inj.k = k;
        }
        if let Some(t) = self.temperature {
            inj.temperature = t;
        }
        if let Some(r) = &self.regime {
            inj.regime = r.parse()?;
        }
        if let Some(p) = &self.position {
            inj.insertion_position = p.parse()?;
        }
        if let Some(s) = &self.source {
            inj.augmentation_source = s.parse()?;
        }
        if let Some(f) = self.fraction {
            inj.vh_fraction = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| VawiError::Config("this command needs --out DIR".into()))
    }
}

/// Metrics file written by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub metric_name: String,
    pub test_metric: f64,
    pub per_epoch: Vec<EpochRecord>,
    pub group_update_norms: std::collections::BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VawiError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| VawiError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn emit(out: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    match out {
        Some(dir) => write_file(&dir.join(name), contents.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(contents.as_bytes())
                .map_err(|e| VawiError::io("<stdout>", e))
        }
    }
}

/// Builds the model for `cfg`, replacing its tensors with a checkpoint's when
/// one is given.
fn load_model(cfg: &RunConfig, data: &Dataset, ckpt: Option<&Path>) -> Result<VawiModel> {
    let exp = data.experiment(&cfg.model);
    let Some(path) = ckpt else {
        return exp.build(cfg.train.seed, true);
    };
    let loaded = checkpoint::load_checkpoint(path)?;
    let attach = loaded.id(reform_names::QUERY).is_some();
    let mut model = exp.build(cfg.train.seed, attach)?;
    adopt(&mut model.params, loaded)?;
    Ok(model)
}

fn adopt(target: &mut ParameterPartition, loaded: ParameterPartition) -> Result<()> {
    if loaded.len() != target.len() {
        return Err(VawiError::Format(format!(
            "checkpoint has {} tensors, the configured model has {}",
            loaded.len(),
            target.len()
        )));
    }
    for (t, l) in target.entries().iter().zip(loaded.entries()) {
        if t.name != l.name || t.group != l.group || t.tensor.shape() != l.tensor.shape() {
            return Err(VawiError::Format(format!(
                "checkpoint tensor {:?} {:?} does not match model tensor {:?} {:?}",
                l.name,
                l.tensor.shape(),
                t.name,
                t.tensor.shape()
            )));
        }
    }
    *target = loaded;
    Ok(())
}

/// The same model without reformulation layer or extractor.
fn strip_augmentation(model: &VawiModel) -> Result<VawiModel> {
    let mut params = ParameterPartition::new();
    for e in model.params.entries().iter().filter(|e| e.group != ParamGroup::Ref) {
        params.insert(e.name.clone(), e.group, e.tensor.clone())?;
    }
    for g in ParamGroup::ALL {
        params.set_trainable(g, model.params.is_trainable(g));
    }
    Ok(VawiModel {
        params,
        augmentation_attached: false,
        ..model.clone()
    })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let dir = a.common.out_dir()?;
    let targets = [TRAIN_FILE, TEST_FILE, ATTRIBUTES_FILE, MANIFEST_FILE].map(|f| dir.join(f));
    if !a.common.force {
        if let Some(existing) = targets.iter().find(|p| p.exists()) {
            return Err(VawiError::Config(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| VawiError::io(dir, e))?;
    let task = generate_synthetic(&cfg.data, cfg.train.seed)?;
    save_jsonl(&task.train, &targets[0])?;
    save_jsonl(&task.test, &targets[1])?;
    write_file(&targets[2], task.attributes.to_tsv().as_bytes())?;
    let hash = cfg.config_hash()?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &serde_json::json!({
            "config_hash": hash,
            "seed": cfg.train.seed,
            "train": task.train.len(),
            "test": task.test.len(),
            "train_vocab": task.train_vocab.len(),
            "test_vocab": task.test_vocab.len(),
        }),
    )?;
    eprintln!(
        "wrote {} train / {} test sentences to {} (config_hash {hash})",
        task.train.len(),
        task.test.len(),
        dir.display(),
    );
    Ok(())
}

fn read_inputs(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| VawiError::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| VawiError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let t = v.get("text").and_then(|t| t.as_str()).ok_or_else(|| VawiError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "missing string field \"text\"".into(),
            })?;
            lines.push(t.to_string());
        } else {
            lines.push(line.to_string());
        }
    }
    Ok(lines)
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let hash = cfg.config_hash()?;
    let inputs = read_inputs(&a.input)?;
    let (lex, sw) = (Lexicon::bundled(), Stopwords::bundled());
    let inj = &cfg.injection;
    let needs_model = inj.strategy != Strategy::Sbs;
    let model = if needs_model {
        let mut data = cfg.load_data()?;
        // the encoders' vocabularies must cover the extraction inputs
        data.test.extend(
            inputs
                .iter()
                .map(|t| LabeledExample::new(t, Label::Class(0), &lex, &sw)),
        );
        Some(load_model(&cfg, &data, a.checkpoint.as_deref())?)
    } else {
        None
    };
    let mut out = String::new();
    for (i, raw) in inputs.iter().enumerate() {
        let text = annotate(&tokenize(raw), &lex, &sw);
        let sel: VhSelection = match (inj.strategy, &model) {
            (Strategy::Vabs, Some(m)) => extract_vabs(&text, &m.vl, &m.params, inj.k)?,
            (Strategy::Lbs, Some(m)) => {
                let mut rng = RngStream::new(cfg.train.seed, StreamKey::once(Purpose::Gumbel(i as u32)));
                extract_lbs(&text, &m.lbs_models(), &m.params, inj.k, inj.temperature, &mut rng)?
            }
            _ => extract_sbs(&text),
        };
        out.push_str(&serde_json::to_string(&Stamped {
            config_hash: &hash,
            body: &sel,
        })?);
        out.push('\n');
    }
    emit(a.common.out.as_deref(), "selections.jsonl", &out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let dir = a.common.out_dir()?;
    let hash = cfg.config_hash()?;
    let data = cfg.load_data()?;
    let result = data.experiment(&cfg.model).run(&cfg.injection, &cfg.train)?;
    let metrics = MetricsFile {
        config_hash: hash.clone(),
        metric_name: result.evaluation.metric_name.clone(),
        test_metric: result.evaluation.metric,
        per_epoch: result.report.per_epoch.clone(),
        group_update_norms: result.report.group_update_norms.clone(),
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    checkpoint::save_checkpoint(&result.model.params, dir.join(CHECKPOINT_FILE))?;
    eprintln!(
        "{} {:.4} after {} steps (config_hash {hash})",
        metrics.metric_name, metrics.test_metric, result.report.steps
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOut {
    metric_name: String,
    metric: f64,
    loss: f64,
    examples: usize,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let hash = cfg.config_hash()?;
    let data = cfg.load_data()?;
    let mut model = load_model(&cfg, &data, a.checkpoint.as_deref())?;
    if a.baseline {
        model = strip_augmentation(&model)?;
    }
    let ev = evaluate(&model, &data.test, &cfg.injection, cfg.train.seed)?;
    let body = EvalOut {
        metric_name: ev.metric_name,
        metric: ev.metric,
        loss: ev.loss,
        examples: data.test.len(),
    };
    let mut s = serde_json::to_string_pretty(&Stamped {
        config_hash: &hash,
        body: &body,
    })?;
    s.push('\n');
    emit(a.common.out.as_deref(), "eval.json", &s)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let axis: SweepAxis = a.axis.parse()?;
    let values = a.values.clone().unwrap_or_else(|| axis.default_values());
    let data = cfg.load_data()?;
    let table = ablation_sweep(&data.experiment(&cfg.model), &cfg.injection, &cfg.train, axis, &values)?;
    let tsv = format!("# config_hash {}\n{}", cfg.config_hash()?, table.to_tsv());
    if let Some(dir) = &a.common.out {
        write_file(&dir.join(format!("sweep_{}.tsv", axis.name())), tsv.as_bytes())?;
    }
    print!("{tsv}");
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let cfg = a.common.resolve()?;
    let data = cfg.load_data()?;
    let model = data.experiment(&cfg.model).build(cfg.train.seed, true)?;
    let example = data
        .train
        .iter()
        .find(|e| !extract_sbs(&e.text).is_empty())
        .ok_or_else(|| VawiError::Config("no training sentence has VH-words".into()))?;
    let opts = GradCheckOptions {
        max_coords_per_tensor: Some(a.coords.max(1)),
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let results = gradcheck_suite(&model, example, &cfg.injection, &opts)?;
    for r in &results {
        println!(
            "{:<14} max_rel_err {:.3e} {} {:.0e} over {} coords: {}",
            r.name,
            r.max_rel_err,
            if r.passed { "<" } else { ">=" },
            GRADCHECK_TOLERANCE,
            r.checked,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &a.common.out {
        write_json(
            &dir.join("gradcheck.json"),
            &Stamped {
                config_hash: &cfg.config_hash()?,
                body: &serde_json::json!({ "checks": results }),
            },
        )?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn cmd_dump_attn(a: &DumpArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let (lex, sw) = (Lexicon::bundled(), Stopwords::bundled());
    let example = LabeledExample::new(&a.text, Label::Class(0), &lex, &sw);
    let mut data = cfg.load_data()?;
    data.test.push(example.clone());
    let model = load_model(&cfg, &data, a.checkpoint.as_deref())?;
    let dump = dump_attention(&model, &example, &cfg.injection, cfg.train.seed)?;
    let mut s = serde_json::to_string_pretty(&Stamped {
        config_hash: &cfg.config_hash()?,
        body: &dump,
    })?;
    s.push('\n');
    emit(a.common.out.as_deref(), "attention.json", &s)
}

fn exit_code(e: &VawiError) -> i32 {
    if e.is_usage() {
        1
    } else {
        2
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::DumpAttn(a) => cmd_dump_attn(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return 2;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
