use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{contract, Result};
use crate::gate::GateConfig;
use crate::tokenizer::TokenizerConfig;

/// Full architecture description; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub attention: AttentionConfig,
    pub gate: GateConfig,
    pub depth: usize,
    pub tile_size: usize,
    /// Predict the noise and subtract it from the input.
    pub residual: bool,
    /// Display-unit value mapped to 1.0 inside the network.
    pub intensity_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            attention: AttentionConfig::default(),
            gate: GateConfig::default(),
            depth: 4,
            tile_size: 64,
            residual: true,
            intensity_scale: 255.0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration exercising every component; used for
    /// finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig {
                stem_channels: 2,
                embed_dim: 8,
                token_hidden: 0,
                ..TokenizerConfig::default()
            },
            attention: AttentionConfig {
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
                ..AttentionConfig::default()
            },
            gate: GateConfig {
                hidden: 4,
                ..GateConfig::default()
            },
            depth: 1,
            tile_size: 16,
            ..ModelConfig::default()
        }
    }

    /// Laptop-CPU configuration for the synthetic end-to-end experiment.
    pub fn desk() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig {
                stem_channels: 8,
                embed_dim: 32,
                token_hidden: 0,
                ..TokenizerConfig::default()
            },
            attention: AttentionConfig {
                dim: 32,
                heads: 4,
                mlp_ratio: 2,
                ..AttentionConfig::default()
            },
            depth: 2,
            tile_size: 32,
            ..ModelConfig::default()
        }
    }

    /// Desk architecture on 16×16 tiles; the cheapest configuration that
    /// fits a fixed batch quickly.
    pub fn small() -> Self {
        ModelConfig {
            tile_size: 16,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.attention.validate()?;
        self.gate.validate()?;
        if self.depth == 0 {
            return contract("depth must be at least 1");
        }
        if self.tokenizer.embed_dim != self.attention.dim {
            return contract(format!(
                "tokenizer embed_dim {} differs from attention dim {}",
                self.tokenizer.embed_dim, self.attention.dim
            ));
        }
        if self.tile_size < self.tokenizer.coarse_kernel {
            return contract(format!(
                "tile_size {} smaller than coarse kernel {}",
                self.tile_size, self.tokenizer.coarse_kernel
            ));
        }
        if self
            .tokenizer
            .token_grid(self.tile_size, self.tile_size)
            .is_err()
        {
            return contract(format!(
                "tile_size {} yields an empty token grid",
                self.tile_size
            ));
        }
        if !(self.intensity_scale > 0.0) {
            return contract("intensity_scale must be positive");
        }
        Ok(())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.tokenizer
            .token_grid(self.tile_size, self.tile_size)
            .expect("validated config")
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }
}
