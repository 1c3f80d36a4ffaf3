use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct LayerNorm<T> {
    c: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for LayerNorm<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let c = self.c;
        let inv_c = T::one() / T::lit(c as f64);
        let mut gx = vec![T::zero(); grad.len()];
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for (row, rstd) in self.rstd.iter().enumerate() {
            let g = &grad[row * c..(row + 1) * c];
            let xh = &self.xhat[row * c..(row + 1) * c];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..c {
                let d = g[j] * gamma[j];
                mean_d += d;
                mean_dx += d * xh[j];
                gg[j] += g[j] * xh[j];
                gb[j] += g[j];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for j in 0..c {
                let d = g[j] * gamma[j];
                gx[row * c + j] = *rstd * (d - mean_d - xh[j] * mean_dx);
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }
}

impl<T: Scalar> Var<T> {
    /// Normalises over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (value, op) = {
            let x = self.tensor_ref();
            let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            let (g, b) = (gamma.tensor_ref(), beta.tensor_ref());
            for p in [&g, &b] {
                if p.shape() != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "layer_norm",
                        lhs: x.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            let inv_c = T::one() / T::lit(c as f64);
            let eps = T::lit(eps);
            let rows = x.len() / c;
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut y = Vec::with_capacity(x.len());
            for r in x.data().chunks_exact(c) {
                let mean = r.iter().copied().sum::<T>() * inv_c;
                let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (j, &v) in r.iter().enumerate() {
                    let xh = (v - mean) * rs;
                    xhat.push(xh);
                    y.push(xh * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape(), y)?, LayerNorm { c, xhat, rstd })
        };
        self.graph.record("layer_norm", value, &[self, gamma, beta], op)
    }
}
