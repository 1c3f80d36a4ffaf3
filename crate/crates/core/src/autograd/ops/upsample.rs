use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps `(i0, i1, frac)` for each output coordinate, using the
/// half-pixel (align-corners = false) mapping `src = (dst + 0.5) / f - 0.5`,
/// clamped at the borders.
fn taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct Bilinear {
    h: usize,
    w: usize,
    c: usize,
    ty: Vec<(usize, usize, f64)>,
    tx: Vec<(usize, usize, f64)>,
}

impl<T: Scalar> BackwardOp<T> for Bilinear {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (w, c) = (self.w, self.c);
        let ow = self.tx.len();
        let mut gx = vec![T::zero(); self.h * w * c];
        for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = &grad[(oy * ow + ox) * c..][..c];
                let corners = [
                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                    (y0, x1, (T::one() - fy) * fx),
                    (y1, x0, fy * (T::one() - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wgt) in corners {
                    let dst = &mut gx[(yy * w + xx) * c..][..c];
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += wgt * gv;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Var<T> {
    /// Channelwise bilinear upsampling of a `[H, W, C]` map by an integer
    /// factor (align-corners = false).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<T>> {
        if factor == 0 {
            return Err(Error::shape("upsample", "factor must be >= 1"));
        }
        let (value, op) = {
            let x = self.tensor_ref();
            let &[h, w, c] = x.shape() else {
                return Err(Error::shape("upsample", format!("expected [H, W, C], got {:?}", x.shape())));
            };
            let (ty, tx) = (taps(h, factor), taps(w, factor));
            let xd = x.data();
            let mut out = Vec::with_capacity(ty.len() * tx.len() * c);
            for &(y0, y1, fy) in &ty {
                let fy = T::lit(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::lit(fx);
                    let p = |yy: usize, xx: usize, ch: usize| xd[(yy * w + xx) * c + ch];
                    for ch in 0..c {
                        let top = p(y0, x0, ch) * (T::one() - fx) + p(y0, x1, ch) * fx;
                        let bot = p(y1, x0, ch) * (T::one() - fx) + p(y1, x1, ch) * fx;
                        out.push(top * (T::one() - fy) + bot * fy);
                    }
                }
            }
            (Tensor::new(&[h * factor, w * factor, c], out)?, Bilinear { h, w, c, ty, tx })
        };
        self.graph.record("upsample", value, &[self], op)
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::{Rng, Tensor};

    fn up(t: Tensor<f64>, f: usize) -> Tensor<f64> {
        Graph::new().constant(t).upsample_bilinear(f).unwrap().value()
    }

    #[test]
    fn factor_one_is_identity() {
        let t: Tensor<f64> = Rng::new(3).normal_tensor(&[3, 4, 2], 1.0);
        assert_eq!(up(t.clone(), 1), t);
    }

    #[test]
    fn constant_stays_constant() {
        let y = up(Tensor::full(&[3, 2, 2], 1.5), 4);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_hand_values() {
        // Half-pixel mapping at factor 2: output coordinates map to source
        // positions 0, 0.25, 0.75, 1 (the first clamped from -0.25).
        let y = up(Tensor::from_f64(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]).unwrap(), 2);
        let pos = [0.0, 0.25, 0.75, 1.0];
        for (oy, &sy) in pos.iter().enumerate() {
            for (ox, &sx) in pos.iter().enumerate() {
                let want = 2.0 * sy + sx;
                assert!((y.at(&[oy, ox, 0]) - want).abs() < 1e-6);
            }
        }
    }
}
