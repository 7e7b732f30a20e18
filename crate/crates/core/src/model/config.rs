use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden width multiplier of the position-wise MLP in every block.
pub const MLP_RATIO: usize = 4;

/// Architecture hyperparameters of the two-tower transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_audio_latent: usize,
    pub d_video_feat: usize,
    pub d_text: usize,
    pub t_audio: usize,
    pub guidance_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_audio_latent: 16,
            d_video_feat: 16,
            d_text: 16,
            t_audio: 32,
            guidance_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_audio_latent", self.d_audio_latent),
            ("d_video_feat", self.d_video_feat),
            ("d_text", self.d_text),
            ("t_audio", self.t_audio),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    ///
    /// With `D = d_model`, `H = MLP_RATIO * D`, `L = n_layers`:
    ///
    /// ```text
    /// stems   = (a+1)D + (v+1)D + (x+1)D + D + 2(D^2+D) + (D+1)a
    /// audio_l = 9D^2+9D + 8(D^2+D) + 2DH + H + D
    /// video_l = 6D^2+6D + 4(D^2+D) + 2DH + H + D
    /// avmm_l  = 2(2D^2 + D)
    /// total   = stems + L (audio_l + video_l + avmm_l)
    /// ```
    /// where `a`, `v`, `x` are the audio latent, video feature and text widths.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = MLP_RATIO * d;
        let (a, v, x) = (self.d_audio_latent, self.d_video_feat, self.d_text);
        let stems = (a + 1) * d + (v + 1) * d + (x + 1) * d + d + 2 * (d * d + d) + (d + 1) * a;
        let mlp = 2 * d * h + h + d;
        let audio = 9 * d * d + 9 * d + 8 * (d * d + d) + mlp;
        let video = 6 * d * d + 6 * d + 4 * (d * d + d) + mlp;
        let avmm = 2 * (2 * d * d + d);
        stems + self.n_layers * (audio + video + avmm)
    }
}
