//! Dynamic fusion of semantic and geometric backbone features, and the static
//! merge into a single unified descriptor.

mod config;
mod forward;
mod params;

pub use config::FusionConfig;
pub use forward::{
    align_inputs, fusion_block, fusion_forward, merge_light, merge_unified, multi_head_attention,
    multi_head_attention_traced, patchify, patchify_index, positional_encoding, unpatchify, unpatchify_index,
    AttentionTrace, FusedFeatures, FusionTrace, TokenMatrix,
};
pub(crate) use forward::LAYER_NORM_EPS;
pub use params::{AttentionIds, Branch, BranchIds, FusionParams, LinearIds, ParamBlock, ParamLayout};
