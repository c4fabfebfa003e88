//! Architecture hyperparameters.

use super::{ModelError, Result};
use serde::{Deserialize, Serialize};

/// Toy decoder-only transformer configuration.
///
/// The defaults are sized so that slope-ordered BOS collapse emerges
/// under CPU-scale pretraining: 6 layers of 8 heads at width 64 over a
/// byte-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 8,
            d_model: 64,
            vocab_size: 256,
            max_seq_len: 128,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_heads.is_power_of_two() || self.n_heads > 32 {
            return Err(ModelError::BadHeadCount(self.n_heads));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.max_seq_len == 0 {
            return Err(ModelError::InvalidConfig(
                "layers, width, and max_seq_len must be positive".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} too small",
                self.vocab_size
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn in_range(&self, layer: usize, head: usize) -> bool {
        layer < self.n_layers && head < self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_head(), 8);
        assert_eq!(cfg.total_heads(), 48);
    }

    #[test]
    fn rejects_non_power_of_two_heads() {
        let cfg = ModelConfig {
            n_heads: 6,
            d_model: 48,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::BadHeadCount(6))));
    }

    #[test]
    fn rejects_oversized_head_count() {
        let cfg = ModelConfig {
            n_heads: 64,
            d_model: 128,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = ModelConfig {
            n_heads: 8,
            d_model: 60,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
