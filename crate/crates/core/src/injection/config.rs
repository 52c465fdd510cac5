use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationSource;
use crate::error::{Result, VawiError};
use crate::extraction::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Rows inserted among the word embeddings; PLM, reformulation and head
    /// are trained.
    FullFinetune,
    /// Rows prepended to every layer's input; only the reformulation layer,
    /// extractor and head are trained.
    PromptTune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPosition {
    AfterVh,
    BeforeText,
    AfterText,
    None,
}

impl InsertionPosition {
    pub const ALL: [InsertionPosition; 4] = [
        InsertionPosition::AfterVh,
        InsertionPosition::BeforeText,
        InsertionPosition::AfterText,
        InsertionPosition::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InsertionPosition::AfterVh => "after_vh",
            InsertionPosition::BeforeText => "before_text",
            InsertionPosition::AfterText => "after_text",
            InsertionPosition::None => "none",
        }
    }
}

impl FromStr for InsertionPosition {
    type Err = VawiError;

    fn from_str(s: &str) -> Result<Self> {
        InsertionPosition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| VawiError::Config(format!("unknown insertion position {s:?}")))
    }
}

impl FromStr for Regime {
    type Err = VawiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_finetune" => Ok(Regime::FullFinetune),
            "prompt_tune" => Ok(Regime::PromptTune),
            _ => Err(VawiError::Config(format!(
                "unknown regime {s:?} (expected full_finetune or prompt_tune)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub regime: Regime,
    /// Ignored by `prompt_tune` except for `none`, which disables
    /// augmentation in both regimes.
    pub insertion_position: InsertionPosition,
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub augmentation_source: AugmentationSource,
    pub vh_fraction: f64,
    /// Whether inserted rows receive the position embedding of their slot.
    pub position_embed_inserted: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            regime: Regime::FullFinetune,
            insertion_position: InsertionPosition::AfterVh,
            strategy: Strategy::Sbs,
            k: 3,
            temperature: 1.0,
            augmentation_source: AugmentationSource::VlEncoder,
            vh_fraction: 1.0,
            position_embed_inserted: true,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.vh_fraction) {
            return Err(VawiError::Config(format!("vh_fraction {} outside [0, 1]", self.vh_fraction)));
        }
        if self.k == 0 {
            return Err(VawiError::Config("k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(VawiError::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        Ok(())
    }

    pub fn augments(&self) -> bool {
        self.insertion_position != InsertionPosition::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    /// Toy-scale defaults: the models are trained from scratch, so the step
    /// size is larger than a fine-tuning rate for a pretrained model.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.06,
            epochs: 8,
            batch_size: 16,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    /// Settings for fine-tuning a pretrained encoder: lr 2e-5, weight decay
    /// 0.01, 6% warmup.
    pub fn reference_protocol() -> Self {
        TrainConfig {
            lr: 2e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(VawiError::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(VawiError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VawiError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(VawiError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}
