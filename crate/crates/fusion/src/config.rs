//! Fusion model configuration.
//!
//! [`FusionConfig`] is the flat key/value form read from config files; the
//! typed views ([`BackboneConfig`], [`LoraConfig`], [`HeadConfig`],
//! [`TrainConfig`]) are derived from it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use crate::FusionError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const VOCAB_SIZE: usize = 3 + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Frozen,
    Lora,
}

/// Which generated text follows the title in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Rationale,
    Summary,
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rationale" => Ok(Self::Rationale),
            "summary" => Ok(Self::Summary),
            other => Err(format!("unknown prompt kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rms_norm_eps: f64,
    pub causal: bool,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub pooling: Pooling,
    pub hidden: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_rounds: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rms_norm_eps: f64,
    pub causal: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub pooling: Pooling,
    /// MLP head width; 0 means `d_model`.
    pub head_hidden: usize,
    pub lambda: f64,
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_rounds: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub prompt: PromptKind,
    /// Also feed the E5 embedding of the generated text as a virtual token.
    pub generated_embedding: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_seq: 256,
            rms_norm_eps: 1e-6,
            causal: true,
            lora_rank: 32,
            lora_alpha: 32.0,
            lora_dropout: 0.15,
            pooling: Pooling::Mean,
            head_hidden: 0,
            lambda: 0.5,
            mode: TrainMode::Lora,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 30,
            early_stopping_rounds: 5,
            clip_norm: 1.0,
            seed: 0,
            prompt: PromptKind::Rationale,
            generated_embedding: false,
        }
    }
}

impl FusionConfig {
    /// Small configuration that trains in seconds on one core.
    pub fn tiny() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            max_seq: 64,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_dropout: 0.05,
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 25,
            early_stopping_rounds: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer, width and head counts must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("head_dim must be even for rotary encoding");
        }
        if self.max_seq < 8 {
            return bad("max_seq must be >= 8");
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
            return bad("lora_rank and lora_alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("lora_dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (the loss needs a batch correlation)");
        }
        if self.max_epochs == 0 || self.early_stopping_rounds == 0 {
            return bad("max_epochs and early_stopping_rounds must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            rms_norm_eps: self.rms_norm_eps,
            causal: self.causal,
            seed: self.seed,
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            pooling: self.pooling,
            hidden: if self.head_hidden == 0 {
                self.d_model
            } else {
                self.head_hidden
            },
            lambda: self.lambda,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stopping_rounds: self.early_stopping_rounds,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }
}

/// `[BOS] + bytes (b -> 3 + b) + [EOS]`, truncated to `max_seq` ids while
/// keeping both markers.
pub fn tokenize(text: &str, max_seq: usize) -> Vec<usize> {
    let budget = max_seq.saturating_sub(2);
    let mut ids = Vec::with_capacity(text.len().min(budget) + 2);
    ids.push(BOS);
    ids.extend(text.bytes().take(budget).map(|b| 3 + b as usize));
    ids.push(EOS);
    ids
}
