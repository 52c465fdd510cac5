use serde::{Deserialize, Serialize};

use crate::error::{Result, VawiError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Rows of the token embedding table. Model builders overwrite this with
    /// the size of the vocabulary actually in use.
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub max_sequence_length: usize,
    pub causal: bool,
    pub ffn_multiplier: usize,
}

impl EncoderConfig {
    /// Defaults for the task model: d=64, 2 layers, 4 heads, bidirectional.
    pub fn plm_default() -> Self {
        EncoderConfig {
            vocab_size: 1000,
            hidden_size: 64,
            layer_count: 2,
            head_count: 4,
            max_sequence_length: 48,
            causal: false,
            ffn_multiplier: 2,
        }
    }

    /// Defaults for the aligned encoder: d=32, 2 layers, 4 heads, causal.
    pub fn vl_default() -> Self {
        EncoderConfig {
            vocab_size: 1000,
            hidden_size: 32,
            layer_count: 2,
            head_count: 4,
            max_sequence_length: 48,
            causal: true,
            ffn_multiplier: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.head_count
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
            ("max_sequence_length", self.max_sequence_length),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(VawiError::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.head_count) {
            return Err(VawiError::Config(format!(
                "hidden_size {} is not divisible by head_count {}",
                self.hidden_size, self.head_count
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_dim_and_divisibility() {
        let mut c = EncoderConfig {
            hidden_size: 32,
            head_count: 4,
            ..EncoderConfig::plm_default()
        };
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 8);
        c.hidden_size = 30;
        assert!(matches!(c.validate(), Err(VawiError::Config(_))));
        c.hidden_size = 32;
        c.layer_count = 0;
        assert!(c.validate().is_err());
    }
}
