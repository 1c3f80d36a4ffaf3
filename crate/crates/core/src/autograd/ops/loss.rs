use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct CrossEntropy<T> {
    probs: Vec<T>,
    labels: Vec<Option<usize>>,
    k: usize,
    count: usize,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropy<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.probs.len()];
        if self.count == 0 {
            return vec![Some(g)];
        }
        let s = grad[0] / T::lit(self.count as f64);
        for (row, label) in self.labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            let p = &self.probs[row * self.k..(row + 1) * self.k];
            let gr = &mut g[row * self.k..(row + 1) * self.k];
            for (gv, &pv) in gr.iter_mut().zip(p) {
                *gv = s * pv;
            }
            gr[label] -= s;
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Var<T> {
    /// Mean negative log-softmax of `labels` over `[N, K]` logits. Rows whose
    /// label equals `ignore_index` are skipped; if every row is skipped the
    /// loss is 0 with a zero gradient.
    pub fn cross_entropy(&self, labels: &[usize], ignore_index: usize) -> Result<Var<T>> {
        let (value, op) = {
            let x = self.tensor_ref();
            let &[n, k] = x.shape() else {
                return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {:?}", x.shape())));
            };
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let mut probs = Vec::with_capacity(n * k);
            let mut kept = Vec::with_capacity(n);
            let mut total = T::zero();
            let mut count = 0;
            for (row, &label) in x.data().chunks_exact(k).zip(labels) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + z.ln();
                probs.extend(row.iter().map(|&v| (v - max).exp() / z));
                if label == ignore_index {
                    kept.push(None);
                    continue;
                }
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
                total += lse - row[label];
                count += 1;
                kept.push(Some(label));
            }
            let loss = if count == 0 { T::zero() } else { total / T::lit(count as f64) };
            (
                Tensor::scalar(loss),
                CrossEntropy {
                    probs,
                    labels: kept,
                    k,
                    count,
                },
            )
        };
        self.graph.record("cross_entropy", value, &[self], op)
    }
}
