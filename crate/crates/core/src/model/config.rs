use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Harness default: 8 layers, width 64.
    pub const TOY: ModelConfig = ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        vocab_size: 32,
        max_seq: 256,
    };

    /// 7B-class decoder used only by the cost model.
    pub const LLAMA_7B: ModelConfig = ModelConfig {
        n_layers: 32,
        d_model: 4096,
        n_heads: 32,
        d_ff: 11008,
        vocab_size: 32000,
        max_seq: 4096,
    };

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // rotary embedding rotates coordinate pairs within a head
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "head dimension {} must be even",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::TOY.validate().unwrap();
        ModelConfig::LLAMA_7B.validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::TOY
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_count_rejected() {
        let cfg = ModelConfig {
            d_ff: 0,
            ..ModelConfig::TOY
        };
        assert!(cfg.validate().is_err());
    }
}
