use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Shape hyperparameters of the fusion transformer and the merging stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of self/cross attention blocks.
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// Output channels of the geometric head.
    pub out_dim_geometric: usize,
    /// Output channels of the semantic head.
    pub out_dim_semantic: usize,
    pub in_dim_semantic: usize,
    pub in_dim_geometric: usize,
    /// Channels of the object-level (DINO-role) map merged in last.
    pub dino_dim: usize,
    /// Adds fixed 2-D sinusoidal encodings to the projected tokens.
    pub positional_encoding: bool,
    /// Layer-normalizes attention inputs before projection.
    pub pre_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_blocks: 8,
            hidden_dim: 512,
            num_heads: 8,
            patch_size: 2,
            out_dim_geometric: 256,
            out_dim_semantic: 768,
            in_dim_semantic: 1280,
            in_dim_geometric: 640,
            dino_dim: 1024,
            positional_encoding: false,
            pre_norm: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("out_dim_geometric", self.out_dim_geometric),
            ("out_dim_semantic", self.out_dim_semantic),
            ("in_dim_semantic", self.in_dim_semantic),
            ("in_dim_geometric", self.in_dim_geometric),
            ("dino_dim", self.dino_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return config(format!("{name} must be at least 1"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.out_dim_semantic.is_multiple_of(self.out_dim_geometric) {
            return config(format!(
                "out_dim_semantic {} is not divisible by out_dim_geometric {}",
                self.out_dim_semantic, self.out_dim_geometric
            ));
        }
        if !self.dino_dim.is_multiple_of(self.merged_dim()) {
            return config(format!(
                "dino_dim {} is not divisible by the merged dimension {}",
                self.dino_dim,
                self.merged_dim()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Channel stride applied to the semantic descriptor, `D_s / D_g`.
    pub fn semantic_stride(&self) -> usize {
        self.out_dim_semantic / self.out_dim_geometric
    }

    /// Channels of the geometric ⊕ strided-semantic concatenation.
    pub fn merged_dim(&self) -> usize {
        self.out_dim_geometric + self.out_dim_semantic / self.semantic_stride()
    }

    /// Channel stride applied to the DINO-role map, `D_d / D_t`.
    pub fn dino_stride(&self) -> usize {
        self.dino_dim / self.merged_dim()
    }

    pub fn unified_dim(&self) -> usize {
        self.merged_dim() + self.dino_dim / self.dino_stride()
    }
}
