use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VawiError};
use crate::injection::{Experiment, InjectionConfig, ModelConfig, TrainConfig};
use crate::text::{
    generate_synthetic, load_jsonl, AttributeTable, LabeledExample, Lexicon, Stopwords, SyntheticTaskSpec, TaskKind,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ATTRIBUTES_FILE: &str = "attributes.tsv";

/// One run's complete configuration. `train.seed` seeds everything,
/// including data generation when no data directory is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticTaskSpec,
    /// Directory with `train.jsonl`, `test.jsonl` and `attributes.tsv`;
    /// when absent the synthetic task is generated in memory.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VawiError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| VawiError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.plm.validate()?;
        self.model.vl.validate()?;
        self.injection.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the config serialized with keys in sorted order, so
    /// reordered but equal configs share a hash.
    pub fn config_hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn task_kind(&self) -> TaskKind {
        TaskKind::Classification {
            classes: self.data.attribute_class_count,
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let task = self.task_kind();
        match &self.data_dir {
            Some(dir) => {
                let (lex, sw) = (Lexicon::bundled(), Stopwords::bundled());
                let attributes = AttributeTable::load(&dir.join(ATTRIBUTES_FILE))?;
                let task = TaskKind::Classification {
                    classes: attributes.classes(),
                };
                Ok(Dataset {
                    train: load_jsonl(&dir.join(TRAIN_FILE), task, &lex, &sw)?,
                    test: load_jsonl(&dir.join(TEST_FILE), task, &lex, &sw)?,
                    attributes,
                    task,
                })
            }
            None => {
                let t = generate_synthetic(&self.data, self.train.seed)?;
                Ok(Dataset {
                    train: t.train,
                    test: t.test,
                    attributes: t.attributes,
                    task,
                })
            }
        }
    }
}

pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub attributes: AttributeTable,
    pub task: TaskKind,
}

impl Dataset {
    pub fn experiment<'a>(&'a self, model: &'a ModelConfig) -> Experiment<'a> {
        Experiment {
            model,
            attributes: &self.attributes,
            train: &self.train,
            test: &self.test,
            task: self.task,
        }
    }
}
