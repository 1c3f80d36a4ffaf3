//! Straight-line reference implementations over flat `f64` buffers.
//!
//! Nothing here touches the autograd graph. Layouts match the library:
//! row-major, channels last, conv weights `[kh, kw, cin / groups, cout]`,
//! dense weights `[in, out]`.

use std::collections::HashMap;

/// `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dArgs {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dArgs {
    pub fn out_extent(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

/// Cross-correlation with zero padding; returns `[h', w', cout]`.
pub fn conv2d(x: &[f64], weight: &[f64], bias: Option<&[f64]>, a: Conv2dArgs) -> Vec<f64> {
    let (oh, ow) = a.out_extent();
    let cin_g = a.cin / a.groups;
    let cout_g = a.cout / a.groups;
    let mut out = vec![0.0; oh * ow * a.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..a.cout {
                let g = co / cout_g;
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ky in 0..a.kernel {
                    for kx in 0..a.kernel {
                        let iy = (oy * a.stride + ky) as isize - a.padding as isize;
                        let ix = (ox * a.stride + kx) as isize - a.padding as isize;
                        if iy < 0 || ix < 0 || iy >= a.h as isize || ix >= a.w as isize {
                            continue;
                        }
                        for ci in 0..cin_g {
                            let xv = x[(iy as usize * a.w + ix as usize) * a.cin + g * cin_g + ci];
                            let wv = weight[((ky * a.kernel + kx) * cin_g + ci) * a.cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * a.cout + co] = acc;
            }
        }
    }
    out
}

/// Softmax over the axis of extent `len`, with `outer` slices before it and
/// `inner` elements after it.
pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}

/// `x W + b` for `x: [n, fin]`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut out = matmul(x, w, n, fin, fout);
    if let Some(b) = b {
        for r in 0..n {
            for c in 0..fout {
                out[r * fout + c] += b[c];
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / c {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

pub fn relu6(x: f64) -> f64 {
    x.clamp(0.0, 6.0)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Multi-head scaled dot-product attention, `q: [nq, c]`, `k, v: [nk, c]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, c: usize, heads: usize) -> Vec<f64> {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    for h in 0..heads {
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for j in 0..nk {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                scores[j] = dot * scale;
            }
            let weights = softmax(&scores, 1, nk, 1);
            for t in 0..d {
                let mut acc = 0.0;
                for j in 0..nk {
                    acc += weights[j] * v[j * c + h * d + t];
                }
                out[i * c + h * d + t] = acc;
            }
        }
    }
    out
}

/// `softmax(q t^T) t`, unscaled, one head.
pub fn inner_product(q: &[f64], t: &[f64], nq: usize, nt: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; nq * c];
    for i in 0..nq {
        let scores: Vec<f64> = (0..nt).map(|j| (0..c).map(|p| q[i * c + p] * t[j * c + p]).sum()).collect();
        let w = softmax(&scores, 1, nt, 1);
        for p in 0..c {
            out[i * c + p] = (0..nt).map(|j| w[j] * t[j * c + p]).sum();
        }
    }
    out
}

/// Zero-pads `[h, w, c]` at the bottom/right to `[h2, w2, c]`.
pub fn pad(x: &[f64], h: usize, w: usize, c: usize, h2: usize, w2: usize) -> Vec<f64> {
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out[(y * w2 + xx) * c + ch] = x[(y * w + xx) * c + ch];
            }
        }
    }
    out
}

/// Smallest `n' >= n` with `(n' - k) % s == 0`.
pub fn tiled_extent(n: usize, k: usize, s: usize) -> usize {
    let mut m = n.max(k);
    while !(m - k).is_multiple_of(s) {
        m += 1;
    }
    m
}

/// Patch tokens `[m, c]` from a strided full convolution of the padded image.
#[allow(clippy::too_many_arguments)]
pub fn downsample(x: &[f64], h: usize, w: usize, c: usize, weight: &[f64], bias: &[f64], k: usize, s: usize) -> (Vec<f64>, usize) {
    let (h2, w2) = (tiled_extent(h, k, s), tiled_extent(w, k, s));
    let padded = pad(x, h, w, c, h2, w2);
    let args = Conv2dArgs { h: h2, w: w2, cin: c, cout: c, kernel: k, stride: s, padding: 0, groups: 1 };
    let (oh, ow) = args.out_extent();
    (conv2d(&padded, weight, Some(bias), args), oh * ow)
}

/// Weights of one unit keyed by name relative to the unit, e.g.
/// `conv.expand.weight`.
#[derive(Debug, Clone, Default)]
pub struct Params(pub HashMap<String, Vec<f64>>);

impl Params {
    /// Collects every `(name, data)` whose name starts with `prefix.`.
    pub fn from_named<'a>(prefix: &str, entries: impl IntoIterator<Item = (&'a str, Vec<f64>)>) -> Self {
        let lead = format!("{prefix}.");
        Self(
            entries
                .into_iter()
                .filter_map(|(n, d)| n.strip_prefix(&lead).map(|rest| (rest.to_string(), d)))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.0.get(name).unwrap_or_else(|| panic!("oracle weights lack {name}"))
    }
}

pub fn conv_block(x: &[f64], h: usize, w: usize, c: usize, e: usize, p: &Params) -> Vec<f64> {
    let ec = c * e;
    let pw = |cin, cout| Conv2dArgs { h, w, cin, cout, kernel: 1, stride: 1, padding: 0, groups: 1 };
    let mut a = conv2d(x, p.get("conv.expand.weight"), Some(p.get("conv.expand.bias")), pw(c, ec));
    a.iter_mut().for_each(|v| *v = relu6(*v));
    let dw = Conv2dArgs { h, w, cin: ec, cout: ec, kernel: 3, stride: 1, padding: 1, groups: ec };
    let mut b = conv2d(&a, p.get("conv.depthwise.weight"), Some(p.get("conv.depthwise.bias")), dw);
    b.iter_mut().for_each(|v| *v = relu6(*v));
    let out = conv2d(&b, p.get("conv.project.weight"), Some(p.get("conv.project.bias")), pw(ec, c));
    add(&out, x)
}

pub fn former_block(t: &[f64], k: usize, c: usize, f: usize, heads: usize, eps: f64, p: &Params) -> Vec<f64> {
    let lin = |x: &[f64], name: &str, fin: usize, fout: usize| {
        linear(x, p.get(&format!("{name}.weight")), Some(p.get(&format!("{name}.bias"))), k, fin, fout)
    };
    let q = lin(t, "former.attn.query", c, c);
    let kk = lin(t, "former.attn.key", c, c);
    let v = lin(t, "former.attn.value", c, c);
    let attn = lin(&attention(&q, &kk, &v, k, k, c, heads), "former.attn.out", c, c);
    let t1 = layer_norm(&add(t, &attn), p.get("former.norm1.gamma"), p.get("former.norm1.beta"), c, eps);
    let mut hidden = lin(&t1, "former.ffn.fc1", c, c * f);
    hidden.iter_mut().for_each(|v| *v = gelu(*v));
    let ffn = lin(&hidden, "former.ffn.fc2", c * f, c);
    layer_norm(&add(&t1, &ffn), p.get("former.norm2.gamma"), p.get("former.norm2.beta"), c, eps)
}

#[derive(Debug, Clone, Copy)]
pub struct UnitArgs {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub heads: usize,
    pub bottleneck: usize,
    pub ffn: usize,
    pub ds_kernel: usize,
    pub ds_stride: usize,
    pub cross_attention: bool,
    pub eps: f64,
}

/// Conv2Former with projections: `T + (MHSA(T Wq, x, x) Wo)` is left to the
/// caller; this returns the injected term.
pub fn c2f(text: &[f64], tokens: &[f64], k: usize, m: usize, c: usize, heads: usize, p: &Params) -> Vec<f64> {
    let q = linear(text, p.get("bridge_c2f.query.weight"), Some(p.get("bridge_c2f.query.bias")), k, c, c);
    let ctx = attention(&q, tokens, tokens, k, m, c, heads);
    linear(&ctx, p.get("bridge_c2f.out.weight"), Some(p.get("bridge_c2f.out.bias")), k, c, c)
}

/// Former2Conv: `MHSA(pixels, T Wk, T Wv)`, no output projection.
pub fn f2c(pixels: &[f64], text: &[f64], n: usize, k: usize, c: usize, heads: usize, p: &Params) -> Vec<f64> {
    let kk = linear(text, p.get("bridge_f2c.key.weight"), Some(p.get("bridge_f2c.key.bias")), k, c, c);
    let v = linear(text, p.get("bridge_f2c.value.weight"), Some(p.get("bridge_f2c.value.bias")), k, c, c);
    attention(pixels, &kk, &v, n, k, c, heads)
}

/// One fusion unit; returns `(image', text')`.
pub fn unit(image: &[f64], text: &[f64], a: UnitArgs, p: &Params) -> (Vec<f64>, Vec<f64>) {
    let (tokens, m) = downsample(
        image,
        a.h,
        a.w,
        a.c,
        p.get("bridge_c2f.downsample.weight"),
        p.get("bridge_c2f.downsample.bias"),
        a.ds_kernel,
        a.ds_stride,
    );
    let injected = if a.cross_attention {
        c2f(text, &tokens, a.k, m, a.c, a.heads, p)
    } else {
        inner_product(text, &tokens, a.k, m, a.c)
    };
    let text = add(text, &injected);
    let image_c = conv_block(image, a.h, a.w, a.c, a.bottleneck, p);
    let text_f = former_block(&text, a.k, a.c, a.ffn, a.heads, a.eps, p);
    let n = a.h * a.w;
    let context = if a.cross_attention {
        f2c(&image_c, &text_f, n, a.k, a.c, a.heads, p)
    } else {
        inner_product(&image_c, &text_f, n, a.k, a.c)
    };
    (add(&image_c, &context), text_f)
}

/// `S[p, k] = <image[p], text[k]> / tau` by explicit double loop.
pub fn score_map(image: &[f64], text: &[f64], n: usize, k: usize, c: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for p in 0..n {
        for j in 0..k {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += image[p * c + ch] * text[j * c + ch];
            }
            out[p * k + j] = dot / tau;
        }
    }
    out
}
