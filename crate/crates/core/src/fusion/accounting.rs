//! Closed-form parameter and multiply-accumulate counts.
//!
//! MAC counts cover matrix products and convolutions only; bias adds,
//! activations, normalisation and softmax are not counted. 1 MAC = 2 FLOPs.

use serde::{Deserialize, Serialize};

use super::attention::padded_extent;
use super::config::{BridgeVariant, ConvFormerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub conv_block: usize,
    pub former_block: usize,
    /// Patch-aggregation convolution of Conv2Former.
    pub bridge_c2f_downsample: usize,
    /// `W_Q`, `W_O` and their biases.
    pub bridge_c2f_projections: usize,
    /// `W_K`, `W_V` and their biases.
    pub bridge_f2c_projections: usize,
    pub per_unit: usize,
    pub total: usize,
    /// Projection matrices of one bridge pair as configured (biases excluded).
    pub bridge_pair_matrices: usize,
    pub bridge_pair_biases: usize,
    /// Learned projections applied to the image operand. Always zero.
    pub conv_side_projections: usize,
    /// Bridge pair with conv-side projections restored: Conv2Former gains
    /// `W_K`, `W_V`; Former2Conv gains `W_Q`. 7C^2.
    pub full_bridge_matrices: usize,
    /// As above plus an output projection on Former2Conv. 8C^2.
    pub full_bridge_matrices_with_f2c_out: usize,
    /// `full_bridge_matrices` minus the lightweight pair's 4C^2.
    pub removed_conv_side_matrices: usize,
}

impl ParamCounts {
    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("conv_block", self.conv_block),
            ("former_block", self.former_block),
            ("bridge_c2f_downsample", self.bridge_c2f_downsample),
            ("bridge_c2f_projections", self.bridge_c2f_projections),
            ("bridge_f2c_projections", self.bridge_f2c_projections),
            ("per_unit", self.per_unit),
            ("total", self.total),
            ("bridge_pair_matrices", self.bridge_pair_matrices),
            ("bridge_pair_biases", self.bridge_pair_biases),
            ("conv_side_projections", self.conv_side_projections),
            ("full_bridge_matrices", self.full_bridge_matrices),
            ("full_bridge_matrices_with_f2c_out", self.full_bridge_matrices_with_f2c_out),
            ("removed_conv_side_matrices", self.removed_conv_side_matrices),
        ]
    }
}

pub fn count_params(cfg: &ConvFormerConfig) -> ParamCounts {
    let c = cfg.channels;
    let e = c * cfg.bottleneck_expansion;
    let f = c * cfg.ffn_expansion;
    let k = cfg.downsample_kernel;
    let cross = cfg.bridge_variant == BridgeVariant::CrossAttention;

    let conv_block = (c * e + e) + (9 * e + e) + (e * c + c);
    let former_block = 4 * (c * c + c) + (c * f + f) + (f * c + c) + 4 * c;
    let bridge_c2f_downsample = k * k * c * c + c;
    let pair = |n: usize| if cross { n * (c * c + c) } else { 0 };
    let bridge_c2f_projections = pair(2);
    let bridge_f2c_projections = pair(2);
    let per_unit = conv_block + former_block + bridge_c2f_downsample + bridge_c2f_projections + bridge_f2c_projections;
    let bridge_pair_matrices = if cross { 4 * c * c } else { 0 };
    ParamCounts {
        conv_block,
        former_block,
        bridge_c2f_downsample,
        bridge_c2f_projections,
        bridge_f2c_projections,
        per_unit,
        total: per_unit * cfg.depth,
        bridge_pair_matrices,
        bridge_pair_biases: if cross { 4 * c } else { 0 },
        conv_side_projections: 0,
        full_bridge_matrices: 7 * c * c,
        full_bridge_matrices_with_f2c_out: 8 * c * c,
        removed_conv_side_matrices: 7 * c * c - 4 * c * c,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTable {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub depth: usize,
    /// Patch tokens per unit after padding.
    pub tokens: usize,
    pub downsample: u64,
    pub bridge_c2f: u64,
    pub conv_block: u64,
    pub former_attention: u64,
    pub former_ffn: u64,
    pub bridge_f2c: u64,
    pub per_unit: u64,
    pub fusion: u64,
    pub score_map: u64,
    pub total: u64,
}

impl MacTable {
    pub fn rows(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("downsample", self.downsample),
            ("bridge_c2f", self.bridge_c2f),
            ("conv_block", self.conv_block),
            ("former_attention", self.former_attention),
            ("former_ffn", self.former_ffn),
            ("bridge_f2c", self.bridge_f2c),
            ("per_unit", self.per_unit),
            ("fusion", self.fusion),
            ("score_map", self.score_map),
            ("total", self.total),
        ]
    }

    /// `component,macs,flops` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,macs,flops\n");
        for (name, macs) in self.rows() {
            s.push_str(&format!("{name},{macs},{}\n", 2 * macs));
        }
        s
    }
}

/// MACs of the fusion stack and score map on an `H x W` feature map with `K`
/// classes.
pub fn estimate_flops(cfg: &ConvFormerConfig, height: usize, width: usize, classes: usize) -> MacTable {
    let u = |v: usize| v as u64;
    let (c, kk) = (u(cfg.channels), u(classes));
    let e = c * u(cfg.bottleneck_expansion);
    let f = c * u(cfg.ffn_expansion);
    let p = u(height * width);
    let (ks, st) = (cfg.downsample_kernel, cfg.downsample_stride);
    let oh = (padded_extent(height, ks, st) - ks) / st + 1;
    let ow = (padded_extent(width, ks, st) - ks) / st + 1;
    let m = u(oh * ow);
    let cross = cfg.bridge_variant == BridgeVariant::CrossAttention;
    let proj = |n: u64| if cross { n * kk * c * c } else { 0 };

    let downsample = m * u(ks * ks) * c * c;
    let bridge_c2f = proj(2) + 2 * kk * m * c;
    let conv_block = p * c * e + p * 9 * e + p * e * c;
    let former_attention = 4 * kk * c * c + 2 * kk * kk * c;
    let former_ffn = 2 * kk * c * f;
    let bridge_f2c = proj(2) + 2 * p * kk * c;
    let per_unit = downsample + bridge_c2f + conv_block + former_attention + former_ffn + bridge_f2c;
    let fusion = per_unit * u(cfg.depth);
    let score_map = p * kk * c;
    MacTable {
        height,
        width,
        classes,
        depth: cfg.depth,
        tokens: oh * ow,
        downsample,
        bridge_c2f,
        conv_block,
        former_attention,
        former_ffn,
        bridge_f2c,
        per_unit,
        fusion,
        score_map,
        total: fusion + score_map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_and_score_map_definitions() {
        let cfg = ConvFormerConfig {
            channels: 8,
            bottleneck_expansion: 1,
            depth: 0,
            ..Default::default()
        };
        let t = estimate_flops(&cfg, 5, 7, 3);
        assert_eq!(t.score_map, 5 * 7 * 3 * 8);
        // expand and project are both H*W*C*C when the expansion is 1
        assert_eq!(t.conv_block, 2 * 35 * 64 + 35 * 9 * 8);
        assert_eq!(t.fusion, 0);
    }

    #[test]
    fn heads_do_not_change_counts() {
        let a = ConvFormerConfig { channels: 16, heads: 1, ..Default::default() };
        let b = ConvFormerConfig { channels: 16, heads: 8, ..Default::default() };
        assert_eq!(count_params(&a), count_params(&b));
        assert_eq!(estimate_flops(&a, 6, 6, 4), estimate_flops(&b, 6, 6, 4));
    }

    #[test]
    fn inner_product_has_no_bridge_projections() {
        let cfg = ConvFormerConfig { bridge_variant: BridgeVariant::InnerProduct, ..Default::default() };
        let p = count_params(&cfg);
        assert_eq!(p.bridge_pair_matrices, 0);
        assert_eq!(p.bridge_c2f_projections + p.bridge_f2c_projections, 0);
    }

    #[test]
    fn macs_increase_with_depth() {
        let mut last = 0;
        for depth in 0..8 {
            let t = estimate_flops(&ConvFormerConfig { depth, ..Default::default() }, 6, 6, 4);
            assert!(depth == 0 || t.total > last);
            last = t.total;
        }
    }
}
