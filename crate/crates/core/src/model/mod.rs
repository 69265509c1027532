//! Decoder-only causal transformer over the joint vocabulary.
//!
//! Blocks are pre-RMS-norm: multi-head causal attention followed by a
//! SiLU-gated MLP, with learned token and position embeddings. Image tokens
//! use positions anchored at `IMG_START` (`text_max + j`), so a grid cell
//! always sees the same position whatever the prompt length.

mod checkpoint;
mod decoder;
mod lora;
mod params;
mod select;
mod tape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_VERSION};
pub use decoder::{forward_logits, Decoder};
pub use lora::{count_trainable_params, format_millions, merge_lora, CountMode, LoraAdapterSet, LoraConfig, LoraPair, LoraTarget};
pub use params::{LayerParams, ModelParams};
pub use select::{select_trainable, SelectedTensor, Selection, Stage};
pub use tape::{bind, image_loss, TapeModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;
use crate::vocab::TokenSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence needs {needed} positions but context is {limit}")]
    Overlong { needed: usize, limit: usize },
    #[error("prompt of {len} tokens exceeds text_max {limit}")]
    PromptTooLong { len: usize, limit: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    BadToken { id: u32, size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("adapters already merged into these parameters")]
    AlreadyMerged,
    #[error("stage2-lora selected but no adapters attached")]
    MissingAdapters,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Where a set of parameters came from; personalization checks it to keep
/// the stages in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Init,
    Pretrained,
    Stage1,
    Stage2Full,
    Stage2Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Positions reserved for prompt tokens before `IMG_START`.
    pub text_max: usize,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// Default desk-scale shape (L=4, d=128, h=4, context 320).
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            vocab_size,
            context_len: 320,
            text_max: 62,
            rms_eps: 1e-5,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        // 4d / 1.5
        self.hidden * 8 / 3
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return err("layers, hidden and heads must be positive");
        }
        if self.hidden % self.heads != 0 {
            return err("hidden must be divisible by heads");
        }
        if self.vocab_size < 2 {
            return err("vocabulary too small");
        }
        if self.text_max + 2 > self.context_len {
            return err("context too short for text_max");
        }
        if !(self.rms_eps > 0.0) {
            return err("rms_eps must be positive");
        }
        Ok(())
    }

    /// Checks that a `text_max`-token prompt plus an `h×w` image run fit.
    pub fn fits_image(&self, h: usize, w: usize) -> bool {
        self.context_len >= self.text_max + h * w + 2
    }

    /// Position ids for a sequence; see the module docs for the layout.
    pub fn positions(&self, seq: &TokenSequence, vocab_img_start: u32) -> Result<Vec<usize>> {
        let n = seq.ids.len();
        let tl = seq.text_len.min(n);
        let image_prompt = tl > 0 && seq.ids[tl - 1] == vocab_img_start;
        if !image_prompt {
            // plain text: positions run straight through
            if n > self.context_len {
                return Err(ModelError::Overlong {
                    needed: n,
                    limit: self.context_len,
                });
            }
            return Ok((0..n).collect());
        }
        let prompt_len = tl - 1;
        if prompt_len > self.text_max {
            return Err(ModelError::PromptTooLong {
                len: prompt_len,
                limit: self.text_max,
            });
        }
        let needed = self.text_max + (n - prompt_len);
        if needed > self.context_len {
            return Err(ModelError::Overlong {
                needed,
                limit: self.context_len,
            });
        }
        Ok((0..n)
            .map(|t| if t < prompt_len { t } else { self.text_max + (t - prompt_len) })
            .collect())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_anchor_on_img_start() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            vocab_size: 20,
            context_len: 16,
            text_max: 6,
            rms_eps: 1e-5,
        };
        let seq = TokenSequence::new(vec![0, 9, 9, 2, 15, 15], 4);
        assert_eq!(cfg.positions(&seq, 2).unwrap(), vec![0, 1, 2, 6, 7, 8]);
        let seq = TokenSequence::new(vec![4, 2, 15], 2);
        assert_eq!(cfg.positions(&seq, 2).unwrap(), vec![0, 6, 7]);
        let mut long = vec![0; 8];
        long.push(2);
        let long = TokenSequence::new(long, 9);
        assert!(matches!(cfg.positions(&long, 2), Err(ModelError::PromptTooLong { .. })));
        let text = TokenSequence::new(vec![0; 12], 12);
        assert_eq!(cfg.positions(&text, 2).unwrap().len(), 12);
        let mut ids = vec![0, 2];
        ids.extend(std::iter::repeat(15).take(10));
        let over = TokenSequence::new(ids, 2);
        assert!(matches!(cfg.positions(&over, 2), Err(ModelError::Overlong { .. })));
        assert!(cfg.fits_image(2, 4));
        assert!(!cfg.fits_image(3, 3));
    }
}
