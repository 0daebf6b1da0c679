use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_rope_fraction() -> f64 {
    0.5
}

fn default_time_freq_dim() -> usize {
    64
}

/// Architecture hyperparameters of the cross-U transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XutConfig {
    pub model_dim: usize,
    pub context_dim: usize,
    pub mlp_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_depth: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Plain blocks ahead of the routed region (N).
    pub tread_before: usize,
    /// Plain blocks after the routed region (M).
    pub tread_after: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_rope_fraction")]
    pub rope_fraction: f64,
    #[serde(default = "default_time_freq_dim")]
    pub time_freq_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DerivedCounts {
    pub total_blocks: usize,
    pub total_attention_layers: usize,
    /// Tokens for a 256x256 image behind an 8x-downsampling latent encoder.
    pub seq_len_at_256_latent: usize,
    /// Tokens for a 256x256 image patchified directly in pixel space.
    pub seq_len_at_256_pixel: usize,
}

pub fn derived_counts(cfg: &XutConfig) -> DerivedCounts {
    let u_blocks = (cfg.n_enc + cfg.n_dec) * cfg.n_depth;
    let total_blocks = u_blocks + cfg.tread_before + cfg.tread_after;
    let p = cfg.patch_size.max(1);
    DerivedCounts {
        total_blocks,
        total_attention_layers: total_blocks + cfg.n_depth,
        seq_len_at_256_latent: (256 / (8 * p)).pow(2),
        seq_len_at_256_pixel: (256 / p).pow(2),
    }
}

impl XutConfig {
    fn published_scale(model_dim: usize, context_dim: usize, mlp_dim: usize, n_heads: usize, head_dim: usize, n_dec: usize) -> Self {
        Self {
            model_dim,
            context_dim,
            mlp_dim,
            n_heads,
            head_dim,
            n_depth: 4,
            n_enc: 1,
            n_dec,
            tread_before: 1,
            tread_after: 3,
            patch_size: 2,
            in_channels: 4,
            rope_base: default_rope_base(),
            rope_fraction: default_rope_fraction(),
            time_freq_dim: 256,
        }
    }

    pub fn xut_small() -> Self {
        Self::published_scale(896, 640, 3072, 14, 64, 2)
    }

    pub fn xut_base() -> Self {
        Self::published_scale(1024, 1024, 3072, 16, 64, 3)
    }

    pub fn xut_large() -> Self {
        Self::published_scale(1152, 1152, 5120, 12, 96, 3)
    }

    /// Desk-scale training config: about 1.8M parameters, 32x32 RGB at patch 2.
    pub fn toy() -> Self {
        Self {
            model_dim: 128,
            context_dim: 64,
            mlp_dim: 512,
            n_heads: 4,
            head_dim: 32,
            n_depth: 2,
            n_enc: 1,
            n_dec: 2,
            tread_before: 1,
            tread_after: 1,
            patch_size: 2,
            in_channels: 3,
            rope_base: default_rope_base(),
            rope_fraction: default_rope_fraction(),
            time_freq_dim: 64,
        }
    }

    /// Tiny config for gradient checks and fast invariant tests.
    pub fn micro() -> Self {
        Self {
            model_dim: 16,
            context_dim: 8,
            mlp_dim: 32,
            n_heads: 2,
            head_dim: 8,
            n_depth: 2,
            n_enc: 1,
            n_dec: 2,
            tread_before: 1,
            tread_after: 1,
            patch_size: 2,
            in_channels: 3,
            rope_base: default_rope_base(),
            rope_fraction: default_rope_fraction(),
            time_freq_dim: 8,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "xut-small" | "small" => Some(Self::xut_small()),
            "xut-base" | "base" => Some(Self::xut_base()),
            "xut-large" | "large" => Some(Self::xut_large()),
            "toy" => Some(Self::toy()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_heads * self.head_dim != self.model_dim {
            return bad(format!(
                "n_heads ({}) x head_dim ({}) != model_dim ({})",
                self.n_heads, self.head_dim, self.model_dim
            ));
        }
        if self.n_depth == 0 {
            return bad("n_depth must be at least 1".into());
        }
        if self.n_dec == 0 {
            return bad("n_dec must be at least 1: the first decoder block hosts the skip cross-attention".into());
        }
        if self.patch_size == 0 || self.in_channels == 0 {
            return bad("patch_size and in_channels must be positive".into());
        }
        if self.context_dim == 0 || self.mlp_dim == 0 {
            return bad("context_dim and mlp_dim must be positive".into());
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return bad(format!("time_freq_dim must be even and positive, got {}", self.time_freq_dim));
        }
        crate::geometry::RopeFrequencies::new(self.head_dim, self.rope_fraction, self.rope_base)?;
        Ok(())
    }

    pub fn derived(&self) -> DerivedCounts {
        derived_counts(self)
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Parameter counts by top-level module, computed without building the model.
    pub fn param_counts(&self) -> std::collections::BTreeMap<String, usize> {
        let lin = |i: usize, o: usize| i * o + o;
        let d = self.model_dim;
        let inner = self.n_heads * self.head_dim;
        let attn = 3 * lin(d, inner) + lin(inner, d);
        let block = attn + lin(d, self.mlp_dim) + lin(self.mlp_dim, d);
        let u_level = self.n_enc * block + self.n_dec * block + attn;
        let mut out = std::collections::BTreeMap::new();
        out.insert("patch_embed".into(), lin(self.tokens_per_patch(), d));
        out.insert("text_proj".into(), lin(self.context_dim, d));
        out.insert("time".into(), lin(self.time_freq_dim, d) + lin(d, d));
        out.insert("adaln".into(), lin(d, 6 * d));
        out.insert("pre".into(), self.tread_before * block);
        out.insert("enc".into(), self.n_depth * self.n_enc * block);
        out.insert("dec".into(), self.n_depth * (u_level - self.n_enc * block));
        out.insert("post".into(), self.tread_after * block);
        out.insert("head".into(), lin(d, self.tokens_per_patch()));
        out
    }

    /// Image tokens for an `h x w` pixel image.
    pub fn image_tokens(&self, h: usize, w: usize) -> usize {
        (h / self.patch_size) * (w / self.patch_size)
    }
}
