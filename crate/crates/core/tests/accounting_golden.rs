//! Documented example: C=64, K=8, H=W=16, heads=4, depth=6, expansions 4/2.

use convformer_core::fusion::{count_params, estimate_flops, BridgeVariant, ConvFormerConfig};

fn example() -> ConvFormerConfig {
    ConvFormerConfig { channels: 64, classes: 8, heads: 4, depth: 6, ..Default::default() }
}

#[test]
fn parameter_counts_match_hand_derivation() {
    let p = count_params(&example());
    assert_eq!(p.conv_block, 35_648);
    assert_eq!(p.former_block, 33_472);
    assert_eq!(p.bridge_c2f_downsample, 36_928);
    assert_eq!(p.bridge_c2f_projections, 8_320);
    assert_eq!(p.bridge_f2c_projections, 8_320);
    assert_eq!(p.per_unit, 122_688);
    assert_eq!(p.total, 736_128);
    assert_eq!(p.conv_side_projections, 0);
}

#[test]
fn bridge_delta_is_three_c_squared() {
    let p = count_params(&example());
    assert_eq!(p.bridge_pair_matrices, 4 * 64 * 64);
    assert_eq!(p.full_bridge_matrices, 7 * 64 * 64);
    assert_eq!(p.full_bridge_matrices_with_f2c_out, 8 * 64 * 64);
    assert_eq!(p.removed_conv_side_matrices, 12_288);
}

#[test]
fn mac_counts_match_hand_derivation() {
    let t = estimate_flops(&example(), 16, 16, 8);
    assert_eq!(t.tokens, 36);
    assert_eq!(t.downsample, 1_327_104);
    assert_eq!(t.bridge_c2f, 102_400);
    assert_eq!(t.conv_block, 8_978_432);
    assert_eq!(t.former_attention, 139_264);
    assert_eq!(t.former_ffn, 131_072);
    assert_eq!(t.bridge_f2c, 327_680);
    assert_eq!(t.per_unit, 11_005_952);
    assert_eq!(t.fusion, 66_035_712);
    assert_eq!(t.score_map, 131_072);
    assert_eq!(t.total, 66_166_784);
}

#[test]
fn former_block_formula() {
    // 4C^2 + (C*2C + 2C*C) + 4C (LN) + biases (4C + 2C + C)
    let c = 64;
    let want = 4 * c * c + 4 * c * c + 4 * c + (4 * c + 2 * c + c);
    assert_eq!(count_params(&example()).former_block, want);
}

#[test]
fn inner_product_variant_drops_only_projections() {
    let full = count_params(&example());
    let ip = count_params(&ConvFormerConfig { bridge_variant: BridgeVariant::InnerProduct, ..example() });
    assert_eq!(full.per_unit - ip.per_unit, 2 * 8_320);
}
