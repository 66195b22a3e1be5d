use serde::{Deserialize, Serialize};

use crate::error::{Result, TufaError};
use crate::prompt::PromptCodecConfig;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(height, width)` of the input crop in pixels.
    pub image_size: (usize, usize),
    /// `(height, width)` of one patch in pixels.
    pub patch_size: (usize, usize),
    pub channels: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub ffn_ratio: usize,
    /// Hidden width of the regression MLP.
    pub head_hidden: usize,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (32, 32),
            patch_size: (8, 8),
            channels: 32,
            heads: 4,
            encoder_depth: 2,
            decoder_depth: 6,
            ffn_ratio: 4,
            head_hidden: 32,
            tau: 10000.0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks: 4 patches, `C = 16`.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: (32, 32),
            patch_size: (16, 16),
            channels: 16,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 2,
            ffn_ratio: 4,
            head_hidden: 16,
            tau: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (hi, wi) = self.image_size;
        let (hp, wp) = self.patch_size;
        if hp == 0 || wp == 0 || hi == 0 || wi == 0 {
            return Err(TufaError::InvalidArgument("image and patch sizes must be positive".into()));
        }
        if hi % hp != 0 || wi % wp != 0 {
            return Err(TufaError::InvalidArgument(format!(
                "image {hi}x{wi} is not divisible into {hp}x{wp} patches"
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(TufaError::InvalidArgument(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.decoder_depth == 0 {
            return Err(TufaError::InvalidArgument("decoder depth must be at least 1".into()));
        }
        if self.ffn_ratio == 0 || self.head_hidden == 0 {
            return Err(TufaError::InvalidArgument("ffn ratio and head width must be positive".into()));
        }
        self.codec().validate()
    }

    pub fn patch_count(&self) -> usize {
        (self.image_size.0 / self.patch_size.0) * (self.image_size.1 / self.patch_size.1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size.0 * self.patch_size.1 * 3
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn codec(&self) -> PromptCodecConfig {
        PromptCodecConfig {
            channels: self.channels,
            tau: self.tau,
        }
    }

    /// Multiply-add floating point operations (2 per MAC) of the matrix
    /// products in one decoder pass over `n_queries` prompts.
    pub fn decoder_flops(&self, n_queries: usize) -> u64 {
        let n = n_queries as u64;
        let c = self.channels as u64;
        let h = self.heads as u64;
        let ch = self.head_dim() as u64;
        let l = self.patch_count() as u64;
        let hidden = (self.ffn_ratio * self.channels) as u64;
        // per head: q,k,v projections, scores, weighted sum; then output proj
        let msa = h * (3 * n * ch * ch + n * ch * n + n * n * ch) + n * c * c;
        let mca = h * (n * ch * ch + 2 * l * ch * ch + n * ch * l + n * l * ch) + n * c * c;
        let ffn = n * c * hidden + n * hidden * c;
        2 * self.decoder_depth as u64 * (msa + mca + ffn)
    }
}
