use std::fmt;

use serde::{Deserialize, Serialize};

use super::bank::{PoolingSpec, ProjectedBank};
use super::kernels;
use crate::error::{AttnError, Result};
use crate::tensor::TokenMatrix;

/// A cross-attention kernel choice, carrying the parameters it needs.
///
/// Only the pooled variants carry a [`PoolingSpec`]; the local-windowed
/// baseline carries its segment count. Linear attention always uses the
/// shifted-ReLU feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttentionVariant {
    Exact,
    EfficientRebalanced { pooling: PoolingSpec },
    KeyOffset { pooling: PoolingSpec },
    Linformer { pooling: PoolingSpec },
    LocalWindowed { segments: usize },
    Linear,
}

impl AttentionVariant {
    /// Variant names accepted by [`AttentionVariant::from_name`].
    pub const NAMES: [&'static str; 6] = [
        "exact",
        "efficient",
        "key-offset",
        "linformer",
        "local-windowed",
        "linear",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::EfficientRebalanced { .. } => "efficient",
            Self::KeyOffset { .. } => "key-offset",
            Self::Linformer { .. } => "linformer",
            Self::LocalWindowed { .. } => "local-windowed",
            Self::Linear => "linear",
        }
    }

    /// Builds a variant from its name; `pooling` is attached to pooled
    /// variants and `segments` to the local-windowed one.
    pub fn from_name(name: &str, pooling: PoolingSpec, segments: usize) -> Option<Self> {
        Some(match name {
            "exact" => Self::Exact,
            "efficient" => Self::EfficientRebalanced { pooling },
            "key-offset" => Self::KeyOffset { pooling },
            "linformer" => Self::Linformer { pooling },
            "local-windowed" => Self::LocalWindowed { segments },
            "linear" => Self::Linear,
            _ => return None,
        })
    }

    pub fn pooling(&self) -> Option<PoolingSpec> {
        match *self {
            Self::EfficientRebalanced { pooling }
            | Self::KeyOffset { pooling }
            | Self::Linformer { pooling } => Some(pooling),
            _ => None,
        }
    }

    /// Runs this variant with queries `q` against a projected bank.
    pub fn attend(&self, q: &TokenMatrix, bank: &ProjectedBank) -> Result<TokenMatrix> {
        match *self {
            Self::Exact => kernels::bank_cross_attention(q, bank),
            Self::EfficientRebalanced { pooling } => {
                kernels::efficient_cross_attention(q, bank, pooling)
            }
            Self::KeyOffset { pooling } => kernels::key_offset_cross_attention(q, bank, pooling),
            Self::Linformer { pooling } => kernels::linformer_cross_attention(q, bank, pooling),
            Self::LocalWindowed { segments } => {
                check_dim(q, bank)?;
                kernels::local_windowed_cross_attention(
                    q,
                    &bank.keys().flatten(),
                    &bank.values().flatten(),
                    segments,
                )
            }
            Self::Linear => {
                check_dim(q, bank)?;
                kernels::linear_cross_attention(q, &bank.keys().flatten(), &bank.values().flatten())
            }
        }
    }
}

fn check_dim(q: &TokenMatrix, bank: &ProjectedBank) -> Result<()> {
    if q.cols() != bank.dim() {
        return Err(AttnError::Shape {
            op: "AttentionVariant::attend",
            left: q.shape(),
            right: (bank.keys().len(), bank.dim()),
        });
    }
    Ok(())
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LocalWindowed { segments } => write!(f, "{}[{segments}]", self.name()),
            _ => match self.pooling() {
                Some(p) => write!(f, "{}[{p}]", self.name()),
                None => f.write_str(self.name()),
            },
        }
    }
}
