use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeVariant {
    /// Lightweight cross-attention with Former-side projections only.
    CrossAttention,
    /// Softmax over raw dot products, no learned projections.
    InnerProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvFormerConfig {
    /// Fusion width `C` shared by image and text streams.
    pub channels: usize,
    /// Number of classes `K`.
    pub classes: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub bottleneck_expansion: usize,
    pub downsample_kernel: usize,
    pub downsample_stride: usize,
    /// Stacked units. 0 disables fusion entirely.
    pub depth: usize,
    pub bridge_variant: BridgeVariant,
    /// Zero the last affine map of every branch so a fresh stack is the identity.
    pub zero_init_out_proj: bool,
}

impl Default for ConvFormerConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            classes: 4,
            heads: 4,
            ffn_expansion: 2,
            bottleneck_expansion: 4,
            downsample_kernel: 3,
            downsample_stride: 3,
            depth: 6,
            bridge_variant: BridgeVariant::CrossAttention,
            zero_init_out_proj: false,
        }
    }
}

impl ConvFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.classes == 0 {
            return fail("channels and classes must be >= 1".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.ffn_expansion == 0 || self.bottleneck_expansion == 0 {
            return fail("expansions must be >= 1".into());
        }
        if self.downsample_kernel == 0 || self.downsample_stride == 0 {
            return fail("downsample kernel and stride must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// True when the patch aggregation differs from the 3x3 / stride-3 default.
    pub fn downsample_overridden(&self) -> bool {
        self.downsample_kernel != 3 || self.downsample_stride != 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_deep() {
        let c = ConvFormerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.depth, 6);
        assert_eq!(c.ffn_expansion, 2);
        assert_eq!((c.downsample_kernel, c.downsample_stride), (3, 3));
    }

    #[test]
    fn head_divisibility() {
        let c = ConvFormerConfig {
            channels: 16,
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
