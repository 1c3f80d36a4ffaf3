use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::linear;
use crate::tensor::Scalar;

/// Smallest extent `>= n` that a `kernel`/`stride` window tiles exactly.
pub fn padded_extent(n: usize, kernel: usize, stride: usize) -> usize {
    let steps = n.saturating_sub(kernel).div_ceil(stride);
    steps * stride + kernel
}

/// Aggregates each `kernel x kernel x C` patch of `[H, W, C]` into one token
/// with a strided convolution, zero-padding the bottom/right edges so every
/// pixel falls in a patch. Returns tokens `[M, C]` in row-major patch order.
pub fn downsample_patches<T: Scalar>(
    image: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    kernel: usize,
    stride: usize,
) -> Result<Var<T>> {
    let shape = image.shape();
    let &[h, w, _] = shape.as_slice() else {
        return Err(Error::shape("downsample", format!("expected [H, W, C], got {shape:?}")));
    };
    let (ph, pw) = (padded_extent(h, kernel, stride) - h, padded_extent(w, kernel, stride) - w);
    let x = if ph + pw > 0 { image.pad_bottom_right(ph, pw)? } else { image.clone() };
    let y = x.conv2d(weight, bias, stride, 0, 1)?;
    let ys = y.shape();
    y.reshape(&[ys[0] * ys[1], ys[2]])
}

/// Scaled dot-product attention over `heads` equal channel slices.
/// `q: [Nq, C]`, `k, v: [Nk, C]` -> `[Nq, C]`.
pub fn multi_head_attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let (&[nq, c], &[nk, ck], &[nv, cv]) = (qs.as_slice(), ks.as_slice(), vs.as_slice()) else {
        return Err(Error::shape("attention", format!("expected 2-D operands, got {qs:?} {ks:?} {vs:?}")));
    };
    if c != ck || c != cv || nk != nv {
        return Err(Error::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by heads {heads}")));
    }
    let d = c / heads;
    let split = |x: &Var<T>, n: usize| x.reshape(&[n, heads, d])?.permute(&[1, 0, 2]);
    let qh = split(q, nq)?;
    let kt = k.reshape(&[nk, heads, d])?.permute(&[1, 2, 0])?;
    let vh = split(v, nk)?;
    let scores = qh.matmul(&kt)?.scale(T::lit(1.0 / (d as f64).sqrt()))?;
    let weights = scores.softmax(2)?;
    weights.matmul(&vh)?.permute(&[1, 0, 2])?.reshape(&[nq, c])
}

/// Conv2Former: `MHSA(T W_Q, x, x) W_O`, shape `[K, C]`. Keys and values are
/// the raw patch tokens `x`. The caller adds the result into `T`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_c2f<T: Scalar>(
    text: &Var<T>,
    tokens: &Var<T>,
    w_q: &Var<T>,
    b_q: Option<&Var<T>>,
    w_o: &Var<T>,
    b_o: Option<&Var<T>>,
    heads: usize,
) -> Result<Var<T>> {
    let q = linear(text, w_q, b_q)?;
    let ctx = multi_head_attention(&q, tokens, tokens, heads)?;
    linear(&ctx, w_o, b_o)
}

/// Former2Conv: `MHSA(pix, T W_K, T W_V)`, shape `[H*W, C]`. Queries are the
/// raw pixels and there is no output projection. The caller adds the result
/// into the feature map.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_f2c<T: Scalar>(
    pixels: &Var<T>,
    text: &Var<T>,
    w_k: &Var<T>,
    b_k: Option<&Var<T>>,
    w_v: &Var<T>,
    b_v: Option<&Var<T>>,
    heads: usize,
) -> Result<Var<T>> {
    let k = linear(text, w_k, b_k)?;
    let v = linear(text, w_v, b_v)?;
    multi_head_attention(pixels, &k, &v, heads)
}

/// Parameter-free bridge used by the inner-product ablation:
/// `softmax(queries tokens^T) tokens`, unscaled and single-headed.
pub fn inner_product_attend<T: Scalar>(queries: &Var<T>, tokens: &Var<T>) -> Result<Var<T>> {
    queries.matmul(&tokens.transpose()?)?.softmax(1)?.matmul(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::{Rng, Tensor};

    #[test]
    fn padded_extents() {
        assert_eq!(padded_extent(6, 3, 3), 6);
        assert_eq!(padded_extent(5, 3, 3), 6);
        assert_eq!(padded_extent(1, 3, 3), 3);
        assert_eq!(padded_extent(7, 3, 3), 9);
        assert_eq!(padded_extent(8, 2, 2), 8);
    }

    #[test]
    fn six_by_six_gives_four_tokens() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(0);
        let i = g.constant(rng.normal_tensor(&[6, 6, 2], 1.0));
        let w = g.constant(rng.normal_tensor(&[3, 3, 2, 2], 1.0));
        assert_eq!(downsample_patches(&i, &w, None, 3, 3).unwrap().shape(), vec![4, 2]);
    }

    #[test]
    fn center_pick_single_patch() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(1);
        let it = rng.normal_tensor::<f64>(&[3, 3, 2], 1.0);
        let mut k = Tensor::zeros(&[3, 3, 2, 2]);
        // center tap, identity over channels
        k.data_mut()[(4 * 2) * 2] = 1.0;
        k.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let tok = downsample_patches(&g.constant(it.clone()), &g.constant(k), None, 3, 3)
            .unwrap()
            .value();
        assert_eq!(tok.shape(), &[1, 2]);
        assert_eq!(tok.data(), &[it.at(&[1, 1, 0]), it.at(&[1, 1, 1])]);
    }

    #[test]
    fn single_key_c2f_broadcasts_value() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(2);
        let t = g.constant(rng.normal_tensor(&[3, 4], 1.0));
        let x = g.constant(rng.normal_tensor(&[1, 4], 1.0));
        let wq = g.constant(rng.normal_tensor(&[4, 4], 1.0));
        let wo = g.constant(rng.normal_tensor(&[4, 4], 1.0));
        let out = cross_attention_c2f(&t, &x, &wq, None, &wo, None, 2).unwrap().value();
        let want = x.matmul(&wo).unwrap().value();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.at(&[r, c]) - want.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_class_f2c_gives_value_row() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(3);
        let pix = g.constant(rng.normal_tensor(&[5, 4], 1.0));
        let t = g.constant(rng.normal_tensor(&[1, 4], 1.0));
        let wk = g.constant(rng.normal_tensor(&[4, 4], 1.0));
        let wv = g.constant(rng.normal_tensor(&[4, 4], 1.0));
        let out = cross_attention_f2c(&pix, &t, &wk, None, &wv, None, 4).unwrap().value();
        let want = t.matmul(&wv).unwrap().value();
        for r in 0..5 {
            for c in 0..4 {
                assert!((out.at(&[r, c]) - want.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f2c_is_key_order_invariant() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(4);
        let pix = g.constant(rng.normal_tensor(&[6, 4], 1.0));
        let tt = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let wk = g.constant(rng.normal_tensor(&[4, 4], 0.5));
        let wv = g.constant(rng.normal_tensor(&[4, 4], 0.5));
        let a = cross_attention_f2c(&pix, &g.constant(tt.clone()), &wk, None, &wv, None, 2).unwrap().value();
        let rows = [2usize, 0, 1];
        let perm: Vec<f64> = rows.iter().flat_map(|&r| (0..4).map(move |c| (r, c))).map(|(r, c)| tt.at(&[r, c])).collect();
        let tp = g.constant(Tensor::from_f64(&[3, 4], &perm).unwrap());
        let b = cross_attention_f2c(&pix, &tp, &wk, None, &wv, None, 2).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn inner_product_identical_tokens_average() {
        let g = Graph::<f64>::new();
        let tok = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let q = g.constant(Tensor::from_f64(&[2, 2], &[0.3, -4.0, 7.0, 1.0]).unwrap());
        let out = inner_product_attend(&q, &tok).unwrap().value();
        for r in 0..2 {
            assert!((out.at(&[r, 0]) - 1.0).abs() < 1e-12 && (out.at(&[r, 1]) - 2.0).abs() < 1e-12);
        }
        let single = g.constant(Tensor::from_f64(&[1, 2], &[5.0, -1.0]).unwrap());
        let out = inner_product_attend(&q, &single).unwrap().value();
        assert_eq!(out.data(), &[5.0, -1.0, 5.0, -1.0]);
    }

    #[test]
    fn head_divisibility_error() {
        let g = Graph::<f64>::new();
        let q = g.constant(Tensor::ones(&[2, 4]));
        assert!(multi_head_attention(&q, &q, &q, 3).is_err());
    }
}
