use convformer_core::fusion::{BridgeVariant, ConvFormerConfig, FusionStack};
use convformer_core::nn::{ParamStore, Session};
use convformer_core::pipeline::{stub_text_encoder, PipelineConfig, SegmentationPipeline};
use convformer_core::tensor::{Rng, Tensor};
use proptest::prelude::*;

fn variant(cross: bool) -> BridgeVariant {
    if cross {
        BridgeVariant::CrossAttention
    } else {
        BridgeVariant::InnerProduct
    }
}

/// Rows of `t` reordered so row `i` is row `perm[i]`.
fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let c = t.shape()[1];
    let data = perm.iter().flat_map(|&p| t.data()[p * c..(p + 1) * c].to_vec()).collect();
    Tensor::new(&[perm.len(), c], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fusion_preserves_shapes(
        head_dim in 1usize..4,
        heads in 1usize..4,
        k in 2usize..7,
        depth in 0usize..3,
        h in 1usize..10,
        w in 1usize..10,
        cross in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let c = head_dim * heads;
        let cfg = ConvFormerConfig { channels: c, heads, classes: k, depth, bridge_variant: variant(cross), ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let stack = FusionStack::new(&mut store, &mut Rng::new(seed), "fusion", &cfg).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let s = Session::new(&store);
        let i = s.constant(rng.normal_tensor(&[h, w, c], 1.0));
        let t = s.constant(rng.normal_tensor(&[k, c], 1.0));
        let (io, to) = stack.forward(&s, &i, &t).unwrap();
        prop_assert_eq!(io.shape(), vec![h, w, c]);
        prop_assert_eq!(to.shape(), vec![k, c]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn fusion_is_class_permutation_equivariant(
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        cross in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = ConvFormerConfig { channels: 16, heads: 4, classes: 5, depth: 2, bridge_variant: variant(cross), ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let stack = FusionStack::new(&mut store, &mut Rng::new(seed), "fusion", &cfg).unwrap();
        let mut rng = Rng::new(seed ^ 2);
        let image = rng.normal_tensor::<f32>(&[7, 6, 16], 1.0);
        let text = rng.normal_tensor::<f32>(&[5, 16], 1.0);
        let s = Session::new(&store);
        let (i1, t1) = stack.forward(&s, &s.constant(image.clone()), &s.constant(text.clone())).unwrap();
        let (i2, t2) = stack.forward(&s, &s.constant(image), &s.constant(permute_rows(&text, &perm))).unwrap();
        prop_assert!(i1.value().max_abs_diff(&i2.value()) <= 1e-5);
        prop_assert!(permute_rows(&t1.value(), &perm).max_abs_diff(&t2.value()) <= 1e-5);
    }

    #[test]
    fn score_map_is_class_permutation_equivariant(
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let fc = ConvFormerConfig { channels: 16, heads: 4, classes: 4, depth: 2, ..Default::default() };
        let pc = PipelineConfig { text_channels: 16, vis_channels: 16, decoder_channels: 8, ..Default::default() };
        let names: Vec<String> = ["background", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let text = stub_text_encoder::<f32>(&names, 16, 3).unwrap();
        let p = SegmentationPipeline::new(&fc, &pc, text.clone(), seed).unwrap();
        let image = Rng::new(seed ^ 3).uniform_tensor::<f32>(&[32, 32, 3], 0.0, 1.0);
        let s = Session::frozen(&p.store);
        let a = p.forward_with_text(&s, &image, &text).unwrap();
        let b = p.forward_with_text(&s, &image, &text.permuted(&perm).unwrap()).unwrap();
        prop_assert!(a.fused_image.value().max_abs_diff(&b.fused_image.value()) <= 1e-5);
        let (sa, sb) = (a.score_map.value(), b.score_map.value());
        for px in 0..16 {
            for (k, &pk) in perm.iter().enumerate() {
                prop_assert!((sb.data()[px * 4 + k] - sa.data()[px * 4 + pk]).abs() <= 1e-5);
            }
        }
    }
}
