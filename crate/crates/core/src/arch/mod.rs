//! The restoration network: a CNN-wrapped transformer whose decoder is
//! conditioned on prior queries, and the prior learning module that
//! produces those queries from an image.
//!
//! All forward functions record onto a caller-supplied [`Tape`] and read their
//! weights from a [`Bound`] parameter set, so the same code serves training
//! (trainable binding), frozen sub-networks and inference.
//!
//! [`Tape`]: crate::tape::Tape
//! [`Bound`]: crate::params::Bound

mod network;
mod patch;
mod transformer;

pub use network::{
    backbone_forward, cnn_decode, cnn_encode, init_backbone, init_plm, plm_forward, BackboneTrace,
};
pub use patch::{patchify, patchify_index, unpatchify};
pub use transformer::{decoder_block, encoder_block, multi_head_attention, AttentionTrace, DecoderTrace};

use crate::error::{Error, Result};
use crate::tape::Var;
use serde::{Deserialize, Serialize};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` of the CNN encoder/decoder and the prior extractor.
    pub channels: usize,
    /// Side `P` of the square token patches.
    pub patch_size: usize,
    pub heads: usize,
    /// Number of transformer encoder blocks.
    pub encoder_blocks: usize,
    /// Width of the first layer of the prior feature extractor.
    pub extractor_hidden: usize,
    /// FFN hidden width as a multiple of the token dimension.
    pub ffn_multiplier: usize,
    /// Largest token count the position encodings and prior embeddings cover.
    pub max_tokens: usize,
    pub layernorm_eps: f64,
    /// Add the input image to the decoder output, so the network predicts a
    /// correction rather than the whole image.
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            patch_size: 4,
            heads: 2,
            encoder_blocks: 1,
            extractor_hidden: 32,
            ffn_multiplier: 2,
            // 64x64 inputs at P = 4
            max_tokens: 256,
            layernorm_eps: 1e-5,
            global_residual: false,
        }
    }
}

impl ModelConfig {
    /// Token width `D = C·P²`.
    pub fn token_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Token count `N = HW/P²` for an `h × w` input.
    pub fn tokens(&self, h: usize, w: usize) -> Result<usize> {
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dimension(format!(
                "image size {h}x{w} is not divisible by patch_size {p}"
            )));
        }
        let n = (h / p) * (w / p);
        if n > self.max_tokens {
            return Err(Error::Dimension(format!(
                "image size {h}x{w} yields {n} tokens but the model covers at most {}",
                self.max_tokens
            )));
        }
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if self.channels == 0 {
            return field("channels", "must be positive");
        }
        if self.patch_size == 0 {
            return field("patch_size", "must be positive");
        }
        if self.heads == 0 || self.token_dim() % self.heads != 0 {
            return field(
                "heads",
                &format!("token dimension {} is not divisible by {} heads", self.token_dim(), self.heads),
            );
        }
        if self.extractor_hidden == 0 || self.ffn_multiplier == 0 {
            return field("extractor_hidden/ffn_multiplier", "must be positive");
        }
        if self.max_tokens == 0 {
            return field("max_tokens", "must be positive");
        }
        if !(self.layernorm_eps > 0.0) {
            return field("layernorm_eps", "must be positive");
        }
        Ok(())
    }
}

/// Prior queries `Q`: one `D`-vector per token position, shape `[N, D]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorQueries(pub Var);
