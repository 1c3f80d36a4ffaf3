//! Library kernels versus the naive references on random small shapes.

use super::naive::{self, Conv2dArgs, Params, UnitArgs};
use super::{CheckOutcome, SuiteReport};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::fusion::{
    cross_attention_c2f, cross_attention_f2c, downsample_patches, inner_product_attend, BridgeVariant, ConvBlock,
    ConvFormerConfig, ConvFormerUnit, FormerBlock,
};
use crate::nn::{ParamStore, Session, LN_EPS};
use crate::pipeline::compute_score_map;
use crate::tensor::{Rng, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-12;
/// Largest extent drawn for any axis.
pub const MAX_EXTENT: usize = 6;

fn extent(rng: &mut Rng) -> usize {
    1 + rng.below(MAX_EXTENT)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle and library lengths differ");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Channels and heads with `heads | channels` and `channels <= MAX_EXTENT`.
fn channels_heads(rng: &mut Rng) -> (usize, usize) {
    let c = extent(rng);
    let divisors: Vec<usize> = (1..=c).filter(|h| c.is_multiple_of(*h)).collect();
    (c, divisors[rng.below(divisors.len())])
}

/// Replaces every parameter with standard-normal values so biases and
/// normalisation affine terms are exercised.
fn randomise(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let name = store.name(id).to_string();
        store.assign(&name, rng.normal_tensor(&shape, 0.5)).expect("same shape");
    }
}

fn params(store: &ParamStore<f64>, prefix: &str) -> Params {
    Params::from_named(prefix, store.iter().map(|(_, n, t)| (n, t.data().to_vec())))
}

fn run(name: &str, cases: usize, rng: &mut Rng, mut case: impl FnMut(&mut Rng) -> Result<f64>) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        worst = worst.max(case(rng)?);
    }
    Ok(CheckOutcome::new(name, cases, worst, ORACLE_TOLERANCE))
}

fn c(g: &Graph<f64>, t: &Tensor<f64>) -> Var<f64> {
    g.constant(t.clone())
}

/// Every oracle check, `cases` random draws each.
pub fn oracle_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let root = Rng::new(seed);
    let mut checks = Vec::new();

    checks.push(run("matmul", cases, &mut root.fork(1), |rng| {
        let (b, m, k, n) = (1 + rng.below(3), extent(rng), extent(rng), extent(rng));
        let a = randn(rng, &[b, m, k]);
        let w = randn(rng, &[b, k, n]);
        let g = Graph::new();
        let lib = c(&g, &a).matmul(&c(&g, &w))?.value();
        let mut want = Vec::new();
        for i in 0..b {
            want.extend(naive::matmul(&a.data()[i * m * k..][..m * k], &w.data()[i * k * n..][..k * n], m, k, n));
        }
        Ok(max_err(lib.data(), &want))
    })?);

    checks.push(run("conv2d", cases, &mut root.fork(2), |rng| {
        let groups = 1 + rng.below(3);
        let cin = groups * (1 + rng.below(MAX_EXTENT / groups));
        let cout = groups * (1 + rng.below(MAX_EXTENT / groups));
        let (h, w) = (extent(rng), extent(rng));
        let padding = rng.below(2);
        let kernel = 1 + rng.below(3.min(h.min(w) + 2 * padding));
        let stride = 1 + rng.below(3);
        let x = randn(rng, &[h, w, cin]);
        let wt = randn(rng, &[kernel, kernel, cin / groups, cout]);
        let b = randn(rng, &[cout]);
        let g = Graph::new();
        let lib = c(&g, &x).conv2d(&c(&g, &wt), Some(&c(&g, &b)), stride, padding, groups)?.value();
        let args = Conv2dArgs { h, w, cin, cout, kernel, stride, padding, groups };
        Ok(max_err(lib.data(), &naive::conv2d(x.data(), wt.data(), Some(b.data()), args)))
    })?);

    checks.push(run("softmax", cases, &mut root.fork(3), |rng| {
        let rank = 1 + rng.below(3);
        let shape: Vec<usize> = (0..rank).map(|_| extent(rng)).collect();
        let axis = rng.below(rank);
        let x = rng.normal_tensor::<f64>(&shape, 3.0);
        let g = Graph::new();
        let lib = c(&g, &x).softmax(axis)?.value();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Ok(max_err(lib.data(), &naive::softmax(x.data(), outer, shape[axis], inner)))
    })?);

    checks.push(run("downsample_patches", cases, &mut root.fork(4), |rng| {
        let (h, w, ch) = (extent(rng), extent(rng), extent(rng));
        let (k, s) = (1 + rng.below(3), 1 + rng.below(3));
        let x = randn(rng, &[h, w, ch]);
        let wt = randn(rng, &[k, k, ch, ch]);
        let b = randn(rng, &[ch]);
        let g = Graph::new();
        let lib = downsample_patches(&c(&g, &x), &c(&g, &wt), Some(&c(&g, &b)), k, s)?.value();
        Ok(max_err(lib.data(), &naive::downsample(x.data(), h, w, ch, wt.data(), b.data(), k, s).0))
    })?);

    checks.push(run("cross_attention_c2f", cases, &mut root.fork(5), |rng| {
        let (ch, heads) = channels_heads(rng);
        let (k, m) = (extent(rng), extent(rng));
        let text = randn(rng, &[k, ch]);
        let tokens = randn(rng, &[m, ch]);
        let ws: Vec<Tensor<f64>> = [[ch, ch], [1, ch], [ch, ch], [1, ch]].iter().map(|s| randn(rng, &s[..])).collect();
        let g = Graph::new();
        let bias = |t: &Tensor<f64>| c(&g, &t.reshaped(&[ch]).expect("same size"));
        let lib = cross_attention_c2f(
            &c(&g, &text),
            &c(&g, &tokens),
            &c(&g, &ws[0]),
            Some(&bias(&ws[1])),
            &c(&g, &ws[2]),
            Some(&bias(&ws[3])),
            heads,
        )?
        .value();
        let p = Params(
            [("bridge_c2f.query.weight", 0), ("bridge_c2f.query.bias", 1), ("bridge_c2f.out.weight", 2), ("bridge_c2f.out.bias", 3)]
                .iter()
                .map(|&(n, i)| (n.to_string(), ws[i].data().to_vec()))
                .collect(),
        );
        Ok(max_err(lib.data(), &naive::c2f(text.data(), tokens.data(), k, m, ch, heads, &p)))
    })?);

    checks.push(run("cross_attention_f2c", cases, &mut root.fork(6), |rng| {
        let (ch, heads) = channels_heads(rng);
        let (n, k) = (extent(rng) * extent(rng), extent(rng));
        let pixels = randn(rng, &[n, ch]);
        let text = randn(rng, &[k, ch]);
        let ws: Vec<Tensor<f64>> = [[ch, ch], [1, ch], [ch, ch], [1, ch]].iter().map(|s| randn(rng, &s[..])).collect();
        let g = Graph::new();
        let bias = |t: &Tensor<f64>| c(&g, &t.reshaped(&[ch]).expect("same size"));
        let lib = cross_attention_f2c(
            &c(&g, &pixels),
            &c(&g, &text),
            &c(&g, &ws[0]),
            Some(&bias(&ws[1])),
            &c(&g, &ws[2]),
            Some(&bias(&ws[3])),
            heads,
        )?
        .value();
        let p = Params(
            [("bridge_f2c.key.weight", 0), ("bridge_f2c.key.bias", 1), ("bridge_f2c.value.weight", 2), ("bridge_f2c.value.bias", 3)]
                .iter()
                .map(|&(n, i)| (n.to_string(), ws[i].data().to_vec()))
                .collect(),
        );
        Ok(max_err(lib.data(), &naive::f2c(pixels.data(), text.data(), n, k, ch, heads, &p)))
    })?);

    checks.push(run("inner_product_attend", cases, &mut root.fork(7), |rng| {
        let (nq, nt, ch) = (extent(rng), extent(rng), extent(rng));
        let q = randn(rng, &[nq, ch]);
        let t = randn(rng, &[nt, ch]);
        let g = Graph::new();
        let lib = inner_product_attend(&c(&g, &q), &c(&g, &t))?.value();
        Ok(max_err(lib.data(), &naive::inner_product(q.data(), t.data(), nq, nt, ch)))
    })?);

    checks.push(run("conv_block", cases, &mut root.fork(8), |rng| {
        let (h, w, ch, e) = (extent(rng), extent(rng), extent(rng), 1 + rng.below(4));
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, rng, "u.conv", ch, e)?;
        randomise(&mut store, rng);
        let x = randn(rng, &[h, w, ch]);
        let s = Session::new(&store);
        let lib = block.forward(&s, &s.constant(x.clone()))?.value();
        Ok(max_err(lib.data(), &naive::conv_block(x.data(), h, w, ch, e, &params(&store, "u"))))
    })?);

    checks.push(run("former_block", cases, &mut root.fork(9), |rng| {
        let (ch, heads) = channels_heads(rng);
        let (k, f) = (extent(rng), 1 + rng.below(4));
        let mut store = ParamStore::new();
        let block = FormerBlock::new(&mut store, rng, "u.former", ch, f, heads)?;
        randomise(&mut store, rng);
        let t = randn(rng, &[k, ch]);
        let s = Session::new(&store);
        let lib = block.forward(&s, &s.constant(t.clone()))?.value();
        Ok(max_err(lib.data(), &naive::former_block(t.data(), k, ch, f, heads, LN_EPS, &params(&store, "u"))))
    })?);

    for (name, variant, stream) in [
        ("conv_former_unit", BridgeVariant::CrossAttention, 10),
        ("conv_former_unit_inner_product", BridgeVariant::InnerProduct, 11),
    ] {
        checks.push(run(name, cases, &mut root.fork(stream), |rng| {
            let (ch, heads) = channels_heads(rng);
            let cfg = ConvFormerConfig {
                channels: ch,
                heads,
                classes: 2 + rng.below(MAX_EXTENT - 1),
                bottleneck_expansion: 1 + rng.below(4),
                ffn_expansion: 1 + rng.below(4),
                bridge_variant: variant,
                depth: 1,
                ..Default::default()
            };
            let (h, w) = (extent(rng), extent(rng));
            let mut store = ParamStore::new();
            let unit = ConvFormerUnit::new(&mut store, rng, "u", &cfg)?;
            randomise(&mut store, rng);
            let image = randn(rng, &[h, w, ch]);
            let text = randn(rng, &[cfg.classes, ch]);
            let s = Session::new(&store);
            let (li, lt) = unit.forward(&s, &s.constant(image.clone()), &s.constant(text.clone()))?;
            let args = UnitArgs {
                h,
                w,
                c: ch,
                k: cfg.classes,
                heads,
                bottleneck: cfg.bottleneck_expansion,
                ffn: cfg.ffn_expansion,
                ds_kernel: cfg.downsample_kernel,
                ds_stride: cfg.downsample_stride,
                cross_attention: variant == BridgeVariant::CrossAttention,
                eps: LN_EPS,
            };
            let (oi, ot) = naive::unit(image.data(), text.data(), args, &params(&store, "u"));
            Ok(max_err(li.value().data(), &oi).max(max_err(lt.value().data(), &ot)))
        })?);
    }

    checks.push(run("compute_score_map", cases, &mut root.fork(12), |rng| {
        let (h, w, k, ch) = (extent(rng), extent(rng), extent(rng), extent(rng));
        let tau = rng.uniform(0.25, 2.0);
        let i = randn(rng, &[h, w, ch]);
        let t = randn(rng, &[k, ch]);
        let g = Graph::new();
        let lib = compute_score_map(&c(&g, &i), &c(&g, &t), tau)?.value();
        Ok(max_err(lib.data(), &naive::score_map(i.data(), t.data(), h * w, k, ch, tau)))
    })?);

    Ok(SuiteReport::new(checks))
}
