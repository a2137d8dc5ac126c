//! Model configuration and its JSON form.
//!
//! The JSON schema is strict: unknown keys are rejected so typos surface as
//! errors naming the offending field. Grids are `[h, w]` pairs; the input
//! image size is implied by `lookup_grid * patch`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Switches that remove parts of the architecture or objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Compressed tokens only: no lookup stream, no cross-attention, single
    /// head on the compressed tokens.
    pub no_lookup_tokens: bool,
    /// Keep the gather direction but never update the lookup tokens from the
    /// compressed ones.
    pub no_infuse: bool,
    /// Drop the lookup-head loss term (the compressed term gets weight 1).
    pub no_lookup_loss: bool,
    /// Drop the compressed-head loss term (the lookup term gets weight 1).
    pub no_compressed_loss: bool,
    /// Learn the layer-0 compressed tokens as a free table instead of
    /// resizing the lookup features.
    pub random_compressed_init: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Architecture hyperparameters. See the crate README for the JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked blocks.
    pub depth: usize,
    /// Embedding dimension D.
    pub dim: usize,
    pub heads: usize,
    /// Compressed-MLP width factor (hidden = p * dim).
    #[serde(default = "default_p")]
    pub p: usize,
    /// Lookup-MLP narrowing factor (hidden = dim / q).
    #[serde(default = "default_q")]
    pub q: usize,
    /// (patch_h, patch_w).
    pub patch: [usize; 2],
    /// (h_l, w_l); the image is lookup_grid * patch pixels.
    pub lookup_grid: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Menu of compressed grids; multi-resolution training draws uniformly
    /// from this list per batch.
    pub compressed_grids: Vec<[usize; 2]>,
    pub num_classes: usize,
    #[serde(default)]
    pub flags: AblationFlags,
    /// Scale attention logits by 1/sqrt(dim/heads).
    #[serde(default = "default_true")]
    pub scale_attention: bool,
    /// Post-merge projections in both cross-attention directions. On by
    /// default; this is the configuration whose counted MACs equal the
    /// closed-form block cost exactly.
    #[serde(default = "default_true")]
    pub output_projections: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_p() -> usize {
    4
}

fn default_q() -> usize {
    2
}

fn default_channels() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be >= 2".into()));
        }
        if self.heads < 1 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.p < 1 || self.q < 1 {
            return Err(Error::Config(format!("p={}, q={} must be >= 1", self.p, self.q)));
        }
        if !self.dim.is_multiple_of(self.q) {
            return Err(Error::Config(format!(
                "dim {} must be divisible by q {}",
                self.dim, self.q
            )));
        }
        if self.patch.contains(&0) || self.lookup_grid.contains(&0) {
            return Err(Error::Config("patch and lookup_grid extents must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.compressed_grids.is_empty() {
            return Err(Error::Config("compressed_grids must not be empty".into()));
        }
        for g in &self.compressed_grids {
            if g[0] == 0 || g[1] == 0 || g[0] > self.lookup_grid[0] || g[1] > self.lookup_grid[1] {
                return Err(Error::Config(format!(
                    "compressed grid {}x{} must fit inside lookup grid {}x{}",
                    g[0], g[1], self.lookup_grid[0], self.lookup_grid[1]
                )));
            }
        }
        if self.flags.no_lookup_loss && self.flags.no_compressed_loss {
            return Err(Error::Config(
                "no_lookup_loss and no_compressed_loss together leave no trainable objective"
                    .into(),
            ));
        }
        if self.flags.no_lookup_tokens && self.flags.no_compressed_loss {
            return Err(Error::Config(
                "no_lookup_tokens trains on the compressed head; no_compressed_loss removes it"
                    .into(),
            ));
        }
        if self.flags.random_compressed_init && self.compressed_grids.len() != 1 {
            return Err(Error::Config(
                "random_compressed_init learns a fixed-size table and needs exactly one \
                 compressed grid"
                    .into(),
            ));
        }
        Ok(())
    }

    /// (h, w, c) of the expected input image.
    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.lookup_grid[0] * self.patch[0],
            self.lookup_grid[1] * self.patch[1],
            self.channels,
        ]
    }

    /// N = h_l * w_l.
    pub fn num_lookup_tokens(&self) -> usize {
        self.lookup_grid[0] * self.lookup_grid[1]
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
