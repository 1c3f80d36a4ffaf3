//! Finite-difference checks for every differentiable operation, each block
//! and the end-to-end pipeline.

use super::{CheckOutcome, SuiteReport};
use crate::autograd::{finite_diff_gradcheck, Var};
use crate::error::Result;
use crate::fusion::{
    cross_attention_c2f, cross_attention_f2c, downsample_patches, inner_product_attend, multi_head_attention,
    BridgeVariant, ConvBlock, ConvFormerConfig, ConvFormerUnit, FormerBlock, FusionStack,
};
use crate::nn::{ParamStore, Session};
use crate::pipeline::{compute_score_map, fuse_and_concat, stub_text_encoder, PipelineConfig, SegmentationPipeline, IGNORE_INDEX};
use crate::tensor::{Rng, Tensor};

/// Tolerance for single operations and blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole pipeline.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
/// Standard deviation of the noise added to parameters before checking.
const JITTER: f64 = 0.05;
/// At initialisation the Former's attention over `K` text rows is nearly
/// uniform, so its query/key gradients are ~1e-7 and drown in the O(1)
/// loss's roundoff. Larger noise gives the check a well-conditioned point.
const END_TO_END_JITTER: f64 = 0.3;

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn project(y: &Var<f64>, rng_seed: u64) -> Result<Var<f64>> {
    let w = Rng::new(rng_seed).normal_tensor(&y.shape(), 1.0);
    y.mul(&y.graph().constant(w))?.sum()
}

struct Suite {
    rng: Rng,
    checks: Vec<CheckOutcome>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.rng.normal_tensor(shape, 1.0)
    }

    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
    {
        let seed = self.rng.below(1 << 30) as u64;
        let report = finite_diff_gradcheck(|v: &[Var<f64>]| project(&f(v)?, seed), &inputs, STEP)?;
        self.checks.push(CheckOutcome::new(name, 1, report.max_rel_err, OP_TOLERANCE));
        Ok(())
    }

    /// Checks gradients with respect to `data` and every parameter in `store`
    /// whose name starts with `prefix`.
    #[allow(clippy::too_many_arguments)]
    fn module<F>(
        &mut self,
        name: &str,
        tolerance: f64,
        jitter_std: f64,
        store: &ParamStore<f64>,
        prefix: &str,
        data: Vec<Tensor<f64>>,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Session<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
    {
        let seed = self.rng.below(1 << 30) as u64;
        let nd = data.len();
        let mut inputs = data;
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
        // Zero-initialised biases put ReLU6 inputs exactly on the kink
        // wherever a neighbourhood is fully clamped; evaluate at a generic
        // point instead.
        let mut jitter = self.rng.fork(seed);
        inputs.extend(ids.iter().map(|&id| {
            let t = store.get(id);
            let noise = jitter.normal_tensor::<f64>(t.shape(), jitter_std);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        }));
        let report = finite_diff_gradcheck(
            |v: &[Var<f64>]| {
                let s = Session::with_graph(v[0].graph().clone(), store);
                for (id, var) in ids.iter().zip(&v[nd..]) {
                    s.bind(*id, var.clone());
                }
                let y = f(&s, &v[..nd])?;
                if y.shape().is_empty() || y.shape() == [1] {
                    Ok(y)
                } else {
                    project(&y, seed)
                }
            },
            &inputs,
            STEP,
        )?;
        let mut outcome = CheckOutcome::new(name, 1, report.max_rel_err, tolerance);
        if let Some(w) = report.inputs.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)) {
            let label = match w.index.checked_sub(nd) {
                Some(i) => store.name(ids[i]).to_string(),
                None => format!("input {}", w.index),
            };
            outcome = outcome.with_worst(label);
        }
        self.checks.push(outcome);
        Ok(())
    }
}

/// Runs every gradient check from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let mut s = Suite { rng: Rng::new(seed), checks: Vec::new() };
    elementwise(&mut s)?;
    structural(&mut s)?;
    blocks(&mut s)?;
    end_to_end(&mut s)?;
    Ok(SuiteReport::new(s.checks))
}

fn elementwise(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.randn(&[2, 3, 4]), s.randn(&[2, 3, 4]));
    s.op("add", vec![a.clone(), b.clone()], |v| v[0].add(&v[1]))?;
    s.op("sub", vec![a.clone(), b.clone()], |v| v[0].sub(&v[1]))?;
    s.op("mul", vec![a.clone(), b], |v| v[0].mul(&v[1]))?;
    let row = s.randn(&[3, 4]);
    s.op("add_broadcast", vec![a.clone(), row.clone()], |v| v[0].add(&v[1]))?;
    s.op("mul_broadcast", vec![a.clone(), row], |v| v[0].mul(&v[1]))?;
    s.op("scale", vec![a.clone()], |v| v[0].scale(-1.7))?;
    let spread = s.rng.uniform_tensor(&[5, 6], -2.0, 8.0);
    s.op("relu6", vec![spread], |v| v[0].relu6())?;
    let wide = s.rng.normal_tensor(&[4, 5], 2.0);
    s.op("gelu", vec![wide], |v| v[0].gelu())?;
    s.op("square", vec![a.clone()], |v| v[0].square())?;
    s.op("sum", vec![a.clone()], |v| v[0].sum())?;
    s.op("mean", vec![a], |v| v[0].mean())?;
    Ok(())
}

fn structural(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.randn(&[2, 3, 4]), s.randn(&[2, 4, 5]));
    s.op("matmul_batched", vec![a.clone(), b], |v| v[0].matmul(&v[1]))?;
    let w = s.randn(&[4, 5]);
    s.op("matmul_shared_rhs", vec![a.clone(), w], |v| v[0].matmul(&v[1]))?;

    let x = s.randn(&[5, 5, 3]);
    let (wt, bias) = (s.randn(&[3, 3, 3, 4]), s.randn(&[4]));
    s.op("conv2d", vec![x.clone(), wt, bias], |v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1, 1))?;
    let x6 = s.randn(&[5, 4, 6]);
    let dw = s.randn(&[3, 3, 1, 6]);
    s.op("conv2d_depthwise", vec![x6.clone(), dw], |v| v[0].conv2d(&v[1], None, 1, 1, 6))?;
    let grouped = s.randn(&[2, 2, 3, 4]);
    s.op("conv2d_grouped", vec![x6, grouped], |v| v[0].conv2d(&v[1], None, 1, 0, 2))?;
    s.op("pad_bottom_right", vec![x.clone()], |v| v[0].pad_bottom_right(1, 2))?;

    s.op("reshape", vec![a.clone()], |v| v[0].reshape(&[6, 4]))?;
    s.op("permute", vec![a.clone()], |v| v[0].permute(&[2, 0, 1]))?;
    s.op("transpose", vec![a.clone()], |v| v[0].transpose())?;
    s.op("narrow", vec![a.clone()], |v| v[0].narrow(2, 1, 2))?;
    let other = s.randn(&[2, 3, 2]);
    s.op("concat", vec![a.clone(), other], |v| Var::concat(&[v[0].clone(), v[1].clone()], 2))?;
    s.op("softmax_last", vec![a.clone()], |v| v[0].softmax(2))?;
    s.op("softmax_first", vec![a.clone()], |v| v[0].softmax(0))?;
    let (gamma, beta) = (s.randn(&[4]), s.randn(&[4]));
    s.op("layer_norm", vec![a, gamma, beta], |v| v[0].layer_norm(&v[1], &v[2], 1e-5))?;
    let small = s.randn(&[3, 2, 2]);
    s.op("upsample_bilinear_x2", vec![small.clone()], |v| v[0].upsample_bilinear(2))?;
    s.op("upsample_bilinear_x8", vec![small], |v| v[0].upsample_bilinear(8))?;
    let logits = s.randn(&[6, 4]);
    s.op("cross_entropy", vec![logits], |v| v[0].cross_entropy(&[0, 3, IGNORE_INDEX, 1, 2, 2], IGNORE_INDEX))?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let (q, k, v) = (s.randn(&[3, 4]), s.randn(&[5, 4]), s.randn(&[5, 4]));
    s.op("multi_head_attention", vec![q, k, v], |v| multi_head_attention(&v[0], &v[1], &v[2], 2))?;

    let (text, tokens) = (s.randn(&[3, 4]), s.randn(&[5, 4]));
    let ws: Vec<_> = (0..2).flat_map(|_| [s.rng.normal_tensor(&[4, 4], 0.5), s.randn(&[4])]).collect();
    let mut inputs = vec![text.clone(), tokens.clone()];
    inputs.extend(ws.iter().cloned());
    s.op("cross_attention_c2f", inputs.clone(), |v| {
        cross_attention_c2f(&v[0], &v[1], &v[2], Some(&v[3]), &v[4], Some(&v[5]), 2)
    })?;
    let pixels = s.randn(&[6, 4]);
    inputs[0] = pixels;
    inputs[1] = text;
    s.op("cross_attention_f2c", inputs, |v| cross_attention_f2c(&v[0], &v[1], &v[2], Some(&v[3]), &v[4], Some(&v[5]), 2))?;
    let q = s.randn(&[6, 4]);
    s.op("inner_product_attend", vec![q, tokens], |v| inner_product_attend(&v[0], &v[1]))?;

    let image = s.randn(&[4, 5, 4]);
    let (dw, db) = (s.rng.normal_tensor(&[3, 3, 4, 4], 0.3), s.randn(&[4]));
    s.op("downsample_patches", vec![image.clone(), dw, db], |v| downsample_patches(&v[0], &v[1], Some(&v[2]), 3, 3))?;

    let mut rng = s.rng.fork(1);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "conv", 4, 2)?;
    s.module("conv_block", OP_TOLERANCE, JITTER, &store, "", vec![image.clone()], |ss, v| block.forward(ss, &v[0]))?;

    let mut store = ParamStore::new();
    let former = FormerBlock::new(&mut store, &mut rng, "former", 4, 2, 2)?;
    let t = s.randn(&[3, 4]);
    s.module("former_block", OP_TOLERANCE, JITTER, &store, "", vec![t.clone()], |ss, v| former.forward(ss, &v[0]))?;

    for (name, variant) in [
        ("conv_former_unit", BridgeVariant::CrossAttention),
        ("conv_former_unit_inner_product", BridgeVariant::InnerProduct),
    ] {
        let cfg = ConvFormerConfig { channels: 4, classes: 3, heads: 2, depth: 1, bridge_variant: variant, ..Default::default() };
        let mut store = ParamStore::new();
        let unit = ConvFormerUnit::new(&mut store, &mut rng, "unit", &cfg)?;
        s.module(name, OP_TOLERANCE, JITTER, &store, "", vec![image.clone(), t.clone()], |ss, v| {
            let (i, tt) = unit.forward(ss, &v[0], &v[1])?;
            let flat = Var::concat(&[i.reshape(&[20, 4])?, tt], 0)?;
            Ok(flat)
        })?;
    }

    let cfg = ConvFormerConfig { channels: 4, classes: 3, heads: 2, depth: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let stack = FusionStack::new(&mut store, &mut rng, "fusion", &cfg)?;
    s.module("fusion_stack", OP_TOLERANCE, JITTER, &store, "", vec![image.clone(), t.clone()], |ss, v| {
        let (i, tt) = stack.forward(ss, &v[0], &v[1])?;
        Var::concat(&[i.reshape(&[20, 4])?, tt], 0)
    })?;

    s.op("compute_score_map", vec![image.clone(), t.clone()], |v| compute_score_map(&v[0], &v[1], 0.7))?;
    let scores = s.randn(&[4, 5, 3]);
    s.op("fuse_and_concat", vec![image, scores], |v| fuse_and_concat(&v[0], &v[1]))?;
    Ok(())
}

/// Tiny pipeline: `H = W = 8`, `C = 8`, `K = 3`, depth 1.
pub fn tiny_pipeline(seed: u64) -> Result<SegmentationPipeline<f64>> {
    let fusion = ConvFormerConfig { channels: 8, classes: 3, depth: 1, ..Default::default() };
    let pipeline = PipelineConfig { text_channels: 8, vis_channels: 8, decoder_channels: 8, ..Default::default() };
    let names: Vec<String> = ["background", "red square", "blue circle"].iter().map(|s| s.to_string()).collect();
    let text = stub_text_encoder(&names, 8, seed)?;
    SegmentationPipeline::new(&fusion, &pipeline, text, seed)
}

fn end_to_end(s: &mut Suite) -> Result<()> {
    let p = tiny_pipeline(s.rng.below(1 << 30) as u64)?;
    let mut rng = s.rng.fork(2);

    let feat = rng.normal_tensor(&[2, 2, 8], 1.0);
    let text = p.text().matrix().clone();
    s.module("align_channels", OP_TOLERANCE, JITTER, &p.store, "align.", vec![feat, text], |ss, v| {
        let (i, t) = p.align_channels(ss, &v[0], &v[1])?;
        Var::concat(&[i.reshape(&[4, 8])?, t], 0)
    })?;
    let x = rng.normal_tensor(&[2, 2, 11], 1.0);
    s.module("decode", OP_TOLERANCE, JITTER, &p.store, "decoder.", vec![x], |ss, v| p.decode(ss, &v[0]))?;

    let image = rng.uniform_tensor::<f64>(&[8, 8, 3], 0.0, 1.0);
    let labels: Vec<usize> = (0..64).map(|_| rng.below(3)).collect();
    s.module("pipeline_end_to_end", END_TO_END_TOLERANCE, END_TO_END_JITTER, &p.store, "", Vec::new(), |ss, _| {
        let out = p.forward(ss, &image)?;
        p.loss(&out, &labels)
    })?;
    Ok(())
}

