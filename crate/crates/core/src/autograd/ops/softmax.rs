use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

struct Softmax {
    outer: usize,
    n: usize,
    inner: usize,
}

impl<T: Scalar> BackwardOp<T> for Softmax {
    fn backward(&self, _inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let y = output.data();
        let mut gx = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |j: usize| (o * self.n + j) * self.inner + i;
                let dot: T = (0..self.n).map(|j| y[at(j)] * grad[at(j)]).sum();
                for j in 0..self.n {
                    gx[at(j)] = y[at(j)] * (grad[at(j)] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Var<T> {
    /// Softmax along `axis`, stabilised by subtracting each slice's maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let (value, op) = {
            let x = self.tensor_ref();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::InvalidAxis { op: "softmax", axis, rank: shape.len() });
            }
            let (outer, n, inner) = (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]));
            let xd = x.data();
            let mut y = vec![T::zero(); xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for j in 0..n {
                        let e = (xd[at(j)] - max).exp();
                        y[at(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        y[at(j)] /= total;
                    }
                }
            }
            (Tensor::new(shape, y)?, Softmax { outer, n, inner })
        };
        self.graph.record("softmax", value, &[self], op)
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::{Rng, Tensor};

    fn softmax(v: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        g.constant(Tensor::from_f64(&[v.len()], v).unwrap())
            .softmax(0)
            .unwrap()
            .value()
            .into_data()
    }

    #[test]
    fn uniform_and_known_values() {
        for p in softmax(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (p, w) in softmax(&[1.0, 2.0, 3.0]).iter().zip(want) {
            assert!((p - w).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_invariant() {
        let a = softmax(&[0.0, 1.7]);
        let b = softmax(&[1000.0, 1001.7]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn slices_sum_to_one_on_inner_axis() {
        let mut rng = Rng::new(2);
        let t: Tensor<f64> = rng.normal_tensor(&[3, 4, 5], 4.0);
        let g = Graph::new();
        let y = g.constant(t).softmax(1).unwrap().value();
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|j| y.at(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_axis() {
        let g = Graph::<f64>::new();
        assert!(g.constant(Tensor::ones(&[2])).softmax(1).is_err());
    }
}
