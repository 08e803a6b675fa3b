//! Model, training, and evaluation configuration, plus the two built-in
//! hyperparameter profiles.
//!
//! `toy` is the desk-scale profile every test and the acceptance run use.
//! `paper` records the reference system's published values (m = 50, the
//! k-list, Adam lr 1e-4 with 10k warmup, 10-checkpoint averaging); it keeps
//! the desk-scale architecture so commands remain runnable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result};

/// Architecture dimensions. Everything downstream (checkpoint layout,
/// position tables, vocab ids) derives from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension of a raw frame.
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub acoustic_layers: usize,
    pub semantic_layers: usize,
    pub decoder_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Total frame subsampling factor of the convolutional front end
    /// (a power of two; realized as stride-2 layers).
    pub conv_stride: usize,
    /// Integrate-and-fire threshold.
    pub beta: f64,
    /// Offline tail residual threshold: fire a final unit iff residual >= this.
    pub tail_threshold: f64,
    /// Sinusoid table length; bounds any sequence the model sees.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            acoustic_layers: 2,
            semantic_layers: 2,
            decoder_layers: 2,
            src_vocab: 64,
            tgt_vocab: 64,
            conv_stride: 4,
            beta: 1.0,
            tail_threshold: 0.5,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    /// Shared token ids live in 0..eos(); specials follow.
    pub fn eos(&self) -> usize {
        self.src_vocab.max(self.tgt_vocab)
    }

    /// Decoder BOS tag for the transcription task.
    pub fn tag_asr(&self) -> usize {
        self.eos() + 1
    }

    /// Decoder BOS tag for the translation task.
    pub fn tag_st(&self) -> usize {
        self.eos() + 2
    }

    /// Output projection width: shared tokens + EOS + two task tags.
    pub fn decoder_vocab(&self) -> usize {
        self.eos() + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract("d_model must be divisible by n_heads"));
        }
        if !self.conv_stride.is_power_of_two() || self.conv_stride < 2 {
            return Err(Error::contract("conv_stride must be a power of two >= 2"));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::contract("beta must be positive and finite"));
        }
        Ok(())
    }

    /// Serialize into `meta.cfg.*` scalar tensors for the checkpoint container.
    pub fn to_meta(&self) -> Vec<(String, Mat)> {
        let pairs: [(&str, f64); 13] = [
            ("d_in", self.d_in as f64),
            ("d_model", self.d_model as f64),
            ("n_heads", self.n_heads as f64),
            ("d_ff", self.d_ff as f64),
            ("acoustic_layers", self.acoustic_layers as f64),
            ("semantic_layers", self.semantic_layers as f64),
            ("decoder_layers", self.decoder_layers as f64),
            ("src_vocab", self.src_vocab as f64),
            ("tgt_vocab", self.tgt_vocab as f64),
            ("conv_stride", self.conv_stride as f64),
            ("beta", self.beta),
            ("tail_threshold", self.tail_threshold),
            ("max_positions", self.max_positions as f64),
        ];
        pairs
            .iter()
            .map(|(k, v)| (format!("meta.cfg.{k}"), Mat::scalar(*v)))
            .collect()
    }

    pub fn from_meta(tensors: &BTreeMap<String, Mat>) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let m = tensors
                .get(&format!("meta.cfg.{k}"))
                .ok_or_else(|| Error::data(format!("checkpoint missing meta.cfg.{k}")))?;
            if !m.is_scalar() {
                return Err(Error::data(format!("meta.cfg.{k} is not scalar")));
            }
            Ok(m.data[0])
        };
        let cfg = ModelConfig {
            d_in: get("d_in")? as usize,
            d_model: get("d_model")? as usize,
            n_heads: get("n_heads")? as usize,
            d_ff: get("d_ff")? as usize,
            acoustic_layers: get("acoustic_layers")? as usize,
            semantic_layers: get("semantic_layers")? as usize,
            decoder_layers: get("decoder_layers")? as usize,
            src_vocab: get("src_vocab")? as usize,
            tgt_vocab: get("tgt_vocab")? as usize,
            conv_stride: get("conv_stride")? as usize,
            beta: get("beta")?,
            tail_threshold: get("tail_threshold")?,
            max_positions: get("max_positions")? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Offline training schedule: masked pretraining, then the two supervised
/// stages, then dev-checkpoint averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Weight on the unit-count loss in the stage-2 objective.
    pub lambda_cif: f64,
    pub label_smoothing: f64,
    /// Average the best-dev stage-2 checkpoints (top n).
    pub keep_best: usize,
    /// Masked pretraining: target fraction of positions covered by spans.
    pub mask_coverage: f64,
    /// Masked pretraining: span length range, inclusive.
    pub mask_span: (usize, usize),
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            warmup_steps: 1000,
            batch_size: 8,
            pretrain_epochs: 2,
            stage1_epochs: 12,
            stage2_epochs: 20,
            lambda_cif: 1.0,
            label_smoothing: 0.1,
            keep_best: 3,
            mask_coverage: 0.5,
            mask_span: (2, 5),
            clip_norm: 5.0,
        }
    }
}

/// Distillation schedule for adapting the encoder to masked future context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadConfig {
    /// Number of mask embeddings appended to each prefix.
    pub m: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// m <= 10 starves the student of future context; require explicit
    /// opt-in for such runs.
    pub allow_small_m: bool,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for FadConfig {
    fn default() -> Self {
        FadConfig {
            m: 20,
            epochs: 3,
            lr: 1e-3,
            warmup_steps: 200,
            batch_size: 8,
            allow_small_m: false,
            clip_norm: 5.0,
        }
    }
}

impl FadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m <= 10 && !self.allow_small_m {
            return Err(Error::contract(format!(
                "m = {} is too small for useful future context; pass allow_small_m to override",
                self.m
            )));
        }
        Ok(())
    }
}

/// Streaming evaluation defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub m: usize,
    /// Fraction of appended mask positions discarded after encoding.
    pub p: f64,
    /// Frames consumed per read.
    pub chunk_frames: usize,
}

pub const DEFAULT_K_LIST: [usize; 9] = [1, 3, 5, 7, 9, 12, 15, 20, 30];

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: DEFAULT_K_LIST.to_vec(),
            m: 20,
            p: 1.0,
            chunk_frames: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::contract(format!("unknown profile '{other}'"))),
        }
    }
}

impl Profile {
    pub fn model(self) -> ModelConfig {
        ModelConfig::default()
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Toy => TrainConfig::default(),
            Profile::Paper => TrainConfig {
                lr: 1e-4,
                warmup_steps: 10_000,
                keep_best: 10,
                ..TrainConfig::default()
            },
        }
    }

    pub fn fad(self) -> FadConfig {
        match self {
            Profile::Toy => FadConfig::default(),
            Profile::Paper => FadConfig {
                m: 50,
                lr: 1e-4,
                warmup_steps: 10_000,
                ..FadConfig::default()
            },
        }
    }

    pub fn eval(self) -> EvalConfig {
        match self {
            Profile::Toy => EvalConfig::default(),
            Profile::Paper => EvalConfig {
                m: 50,
                ..EvalConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_vocab_ids_are_contiguous() {
        let c = ModelConfig::default();
        assert_eq!(c.eos(), 64);
        assert_eq!(c.tag_asr(), 65);
        assert_eq!(c.tag_st(), 66);
        assert_eq!(c.decoder_vocab(), 67);
    }

    #[test]
    fn meta_roundtrip_is_exact() {
        let c = ModelConfig { beta: 1.25, tail_threshold: 0.4375, ..ModelConfig::default() };
        let meta: BTreeMap<String, Mat> = c.to_meta().into_iter().collect();
        let back = ModelConfig::from_meta(&meta).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn profiles_pin_published_values() {
        assert_eq!(Profile::Paper.fad().m, 50);
        assert_eq!(Profile::Paper.train().lr, 1e-4);
        assert_eq!(Profile::Paper.train().warmup_steps, 10_000);
        assert_eq!(Profile::Paper.train().keep_best, 10);
        assert_eq!(Profile::Toy.fad().m, 20);
        assert_eq!(Profile::Toy.eval().k_list, DEFAULT_K_LIST.to_vec());
    }

    #[test]
    fn small_m_requires_override() {
        let bad = FadConfig { m: 5, ..FadConfig::default() };
        assert!(bad.validate().is_err());
        let ok = FadConfig { m: 5, allow_small_m: true, ..FadConfig::default() };
        assert!(ok.validate().is_ok());
        assert!(FadConfig::default().validate().is_ok());
    }
}
