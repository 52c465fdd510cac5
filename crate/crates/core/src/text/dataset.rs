//! JSONL dataset files: one `{"text": ..., "label": ...}` object per line.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VawiError};

use super::annotate::{annotate, Lexicon, Stopwords};
use super::tokenize::{tokenize, TokenizedText};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(v),
            Label::Class(_) => None,
        }
    }
}

/// Whether labels are class indices or real values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn output_size(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub text: TokenizedText,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(raw: &str, label: Label, lexicon: &Lexicon, stopwords: &Stopwords) -> Self {
        LabeledExample {
            text: annotate(&tokenize(raw), lexicon, stopwords),
            label,
        }
    }
}

#[derive(Deserialize)]
struct Line {
    text: String,
    label: serde_json::Value,
}

#[derive(Serialize)]
struct LineOut<'a> {
    text: &'a str,
    label: Label,
}

fn parse_label(value: &serde_json::Value, task: TaskKind) -> std::result::Result<Label, String> {
    match task {
        TaskKind::Classification { classes } => {
            let c = value
                .as_u64()
                .ok_or_else(|| format!("label {value} is not a class index"))? as usize;
            if c >= classes {
                return Err(format!("class {c} out of range for {classes} classes"));
            }
            Ok(Label::Class(c))
        }
        TaskKind::Regression => value
            .as_f64()
            .map(Label::Value)
            .ok_or_else(|| format!("label {value} is not a number")),
    }
}

/// Parses JSONL text; blank lines are skipped but still counted for line numbers.
pub fn parse_jsonl(
    contents: &str,
    origin: &Path,
    task: TaskKind,
    lexicon: &Lexicon,
    stopwords: &Stopwords,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| VawiError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let parsed: Line = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let label = parse_label(&parsed.label, task).map_err(bad)?;
        out.push(LabeledExample::new(&parsed.text, label, lexicon, stopwords));
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, task: TaskKind, lexicon: &Lexicon, stopwords: &Stopwords) -> Result<Vec<LabeledExample>> {
    let contents = std::fs::read_to_string(path).map_err(|e| VawiError::io(path, e))?;
    parse_jsonl(&contents, path, task, lexicon, stopwords)
}

pub fn to_jsonl(examples: &[LabeledExample]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        let line = serde_json::to_string(&LineOut {
            text: &ex.text.raw,
            label: ex.label,
        })?;
        let _ = writeln!(s, "{line}");
    }
    Ok(s)
}

pub fn save_jsonl(examples: &[LabeledExample], path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(examples)?).map_err(|e| VawiError::io(path, e))
}
