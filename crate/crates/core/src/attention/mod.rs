//! Memory cross-attention: bank containers, pooling, and every kernel
//! variant (exact, pooled, and the ablation baselines).

pub mod bank;
pub mod kernels;
pub mod pooling;
pub mod variant;

pub use bank::{
    project, AttentionProjections, MemoryBank, PoolingSpec, ProjectedBank, SpatialGrid,
};
pub use kernels::{
    bank_cross_attention, biased_attention, cross_attention, efficient_cross_attention,
    key_offset_cross_attention, linear_cross_attention, linformer_cross_attention,
    local_windowed_cross_attention, DEFAULT_SEGMENTS, LINEAR_FEATURE_EPS,
};
pub use pooling::{expand_surrogate, pool_bank, pool_spatial_tokens, surrogate_bank};
pub use variant::AttentionVariant;
