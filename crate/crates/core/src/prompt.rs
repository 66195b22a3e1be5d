//! Sinusoidal structure prompts for plane coordinates.
//!
//! Each axis is encoded into `C/2` values: for frequency index
//! `c ∈ [0, C/4)` the pair `(sin(v/w_c), cos(v/w_c))` with
//! `w_c = τ^(2c / (C/2))`. A point's prompt is the x encoding followed by
//! the y encoding. Shifting `v` by `δ` rotates every pair by a fixed 2×2
//! matrix, so offsets on the plane act linearly on the prompt.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TufaError};
use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptCodecConfig {
    pub channels: usize,
    pub tau: f64,
}

impl Default for PromptCodecConfig {
    fn default() -> Self {
        PromptCodecConfig {
            channels: 256,
            tau: 10000.0,
        }
    }
}

impl PromptCodecConfig {
    pub fn new(channels: usize, tau: f64) -> Result<Self> {
        let cfg = PromptCodecConfig { channels, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(TufaError::InvalidArgument(format!(
                "prompt channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(TufaError::InvalidArgument(format!(
                "tau must be a finite value > 1, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> usize {
        self.channels / 4
    }

    /// Wavelength divisor `τ^(2c / (C/2))` for frequency index `c`.
    pub fn wavelength(&self, c: usize) -> f64 {
        let half = 0.5 * self.channels as f64;
        self.tau.powf(2.0 * c as f64 / half)
    }
}

/// One encoded plane point: x half then y half.
#[derive(Debug, Clone, PartialEq)]
pub struct StructurePrompt {
    pub values: Vec<f64>,
}

pub fn encode_axis(v: f64, config: &PromptCodecConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.channels / 2);
    for c in 0..config.frequencies() {
        let (s, co) = (v / config.wavelength(c)).sin_cos();
        out.push(s);
        out.push(co);
    }
    out
}

pub fn encode_point(p: Point, config: &PromptCodecConfig) -> StructurePrompt {
    let mut values = encode_axis(p[0], config);
    values.extend(encode_axis(p[1], config));
    StructurePrompt { values }
}

/// Encodes `points` into an `N × C` matrix, one prompt per row.
pub fn encode_points(points: &[Point], config: &PromptCodecConfig) -> Array2<f64> {
    let mut out = Array2::zeros((points.len(), config.channels));
    for (i, p) in points.iter().enumerate() {
        let e = encode_point(*p, config);
        for (j, v) in e.values.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Rotation that maps the `(sin, cos)` pair at frequency `c` of `E(v)` onto
/// the pair of `E(v + delta)`.
pub fn shift_rotation_matrix(delta: f64, c: usize, config: &PromptCodecConfig) -> [[f64; 2]; 2] {
    let (s, co) = (delta / config.wavelength(c)).sin_cos();
    [[co, s], [-s, co]]
}

/// Applies the per-frequency shift rotations to a whole axis encoding.
pub fn shift_axis_encoding(encoded: &[f64], delta: f64, config: &PromptCodecConfig) -> Vec<f64> {
    let mut out = encoded.to_vec();
    for c in 0..config.frequencies() {
        let r = shift_rotation_matrix(delta, c, config);
        let (s, co) = (encoded[2 * c], encoded[2 * c + 1]);
        out[2 * c] = r[0][0] * s + r[0][1] * co;
        out[2 * c + 1] = r[1][0] * s + r[1][1] * co;
    }
    out
}
