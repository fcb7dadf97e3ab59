use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear layers inside a transformer block that can be factorized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    AttnQ,
    AttnK,
    AttnV,
    AttnProj,
    MlpFc1,
    MlpFc2,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::AttnQ,
        Target::AttnK,
        Target::AttnV,
        Target::AttnProj,
        Target::MlpFc1,
        Target::MlpFc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::AttnQ => "attn_q",
            Target::AttnK => "attn_k",
            Target::AttnV => "attn_v",
            Target::AttnProj => "attn_proj",
            Target::MlpFc1 => "mlp_fc1",
            Target::MlpFc2 => "mlp_fc2",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown spectral target `{s}`")))
    }
}

/// Shape and adaptation layout of the vision transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub spectral_targets: Vec<Target>,
    /// One `qkv` projection instead of separate q, k, v layers.
    #[serde(default)]
    pub fused_qkv: bool,
    /// Final blocks whose singular values are never trained.
    pub frozen_tail_blocks: usize,
    /// Final blocks whose spectral layers feed the diversity loss.
    pub dm_tail_blocks: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            spectral_targets: Target::ALL.to_vec(),
            fused_qkv: false,
            frozen_tail_blocks: 1,
            dm_tail_blocks: 1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        for (field, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.image_size % self.patch_size != 0 {
            return bad("patch_size", "must divide image_size");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("heads", "must divide embed_dim");
        }
        if self.frozen_tail_blocks + 1 > self.depth {
            return bad("frozen_tail_blocks", "at least one block must stay trainable");
        }
        if self.dm_tail_blocks > self.depth {
            return bad("dm_tail_blocks", "exceeds depth");
        }
        let mut seen = self.spectral_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.spectral_targets.len() {
            return bad("spectral_targets", "duplicate target");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn has_target(&self, t: Target) -> bool {
        self.spectral_targets.contains(&t)
    }

    /// First block index whose singular values are frozen.
    pub fn trainable_blocks(&self) -> usize {
        self.depth - self.frozen_tail_blocks
    }

    pub fn is_dm_block(&self, block: usize) -> bool {
        block + self.dm_tail_blocks >= self.depth
    }
}
