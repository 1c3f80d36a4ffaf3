use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (of shape `shape`) into the layout obtained by permuting
/// axes with `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct Reshape;

impl<T: Scalar> BackwardOp<T> for Reshape {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Permute {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for Permute {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(permute_data(grad, &self.out_shape, &self.inverse))]
    }
}

/// Splits along `axis` viewed as `[outer, extent, inner]`.
struct AxisSplit {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl AxisSplit {
    fn total(&self) -> usize {
        self.extents.iter().sum()
    }
}

struct Concat {
    split: AxisSplit,
}

impl<T: Scalar> BackwardOp<T> for Concat {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let AxisSplit { outer, inner, .. } = self.split;
        let total = self.split.total();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.split.extents.len());
        for &e in &self.split.extents {
            let mut g = Vec::with_capacity(outer * e * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                g.extend_from_slice(&grad[base..base + e * inner]);
            }
            out.push(Some(g));
            start += e;
        }
        out
    }
}

struct Narrow {
    outer: usize,
    inner: usize,
    extent: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> BackwardOp<T> for Narrow {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); self.outer * self.extent * self.inner];
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.extent + self.start) * self.inner;
            g[dst..dst + chunk].copy_from_slice(&grad[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Var<T> {
    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.tensor_ref().reshaped(shape)?;
        self.graph.record("reshape", value, &[self], Reshape)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let (value, out_shape) = {
            let x = self.tensor_ref();
            let rank = x.rank();
            let mut seen = vec![false; rank];
            let valid = perm.len() == rank
                && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {rank} axes")));
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            (Tensor::new(&out_shape, permute_data(x.data(), x.shape(), perm))?, out_shape)
        };
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.record("permute", value, &[self], Permute { out_shape, inverse })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<T>> {
        let rank = self.tensor_ref().rank();
        if rank < 2 {
            return Err(Error::InvalidAxis { op: "transpose", axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let (value, op) = {
            let x = self.tensor_ref();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::InvalidAxis { op: "narrow", axis, rank: shape.len() });
            }
            if len == 0 || start + len > shape[axis] {
                return Err(Error::shape("narrow", format!("range {start}..{} outside extent {}", start + len, shape[axis])));
            }
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let extent = shape[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            let op = Narrow { outer, inner, extent, start, len };
            (Tensor::new(&out_shape, data)?, op)
        };
        self.graph.record("narrow", value, &[self], op)
    }

    /// Order-preserving concatenation along `axis`.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (value, split) = {
            let refs: Vec<_> = parts.iter().map(|p| p.tensor_ref()).collect();
            let base = refs[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::InvalidAxis { op: "concat", axis, rank: base.len() });
            }
            for r in &refs[1..] {
                let s = r.shape();
                let off_axis_equal = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !off_axis_equal {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
            }
            let outer = numel(&base[..axis]);
            let inner = numel(&base[axis + 1..]);
            let extents: Vec<usize> = refs.iter().map(|r| r.shape()[axis]).collect();
            let total: usize = extents.iter().sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (r, &e) in refs.iter().zip(&extents) {
                    data.extend_from_slice(&r.data()[o * e * inner..(o + 1) * e * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            (Tensor::new(&shape, data)?, AxisSplit { outer, inner, extents })
        };
        let parents: Vec<&Var<T>> = parts.iter().collect();
        first.graph.record("concat", value, &parents, Concat { split })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use proptest::prelude::*;

    #[test]
    fn reshape_keeps_row_major_order() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = x.reshape(&[3, 2]).unwrap().value();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn concat_cases() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 1]));
        let b = g.constant(Tensor::full(&[2, 2], 2.0));
        let c = Var::concat(&[a.clone(), b], 1).unwrap().value();
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
        assert_eq!(Var::concat(std::slice::from_ref(&a), 0).unwrap().value(), a.value());

        let i = g.constant(Tensor::zeros(&[4, 4, 16]));
        let s = g.constant(Tensor::zeros(&[4, 4, 5]));
        assert_eq!(Var::concat(&[i, s], 2).unwrap().shape(), vec![4, 4, 21]);

        let bad = g.constant(Tensor::ones(&[3, 1]));
        assert!(Var::concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn invalid_permutation_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 3]));
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
    }

    proptest! {
        #[test]
        fn permute_inverse_roundtrip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let mut rng = crate::tensor::Rng::new(seed);
            let t: Tensor<f64> = rng.normal_tensor(&shape, 1.0);
            let mut perm: Vec<usize> = (0..shape.len()).collect();
            rng.shuffle(&mut perm);
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            let g = Graph::new();
            let x = g.constant(t.clone());
            let back = x.permute(&perm).unwrap().permute(&inv).unwrap().value();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn concat_then_narrow_recovers_parts(a in 1usize..4, b in 1usize..4, rows in 1usize..4, seed in any::<u64>()) {
            let mut rng = crate::tensor::Rng::new(seed);
            let ta: Tensor<f64> = rng.normal_tensor(&[rows, a], 1.0);
            let tb: Tensor<f64> = rng.normal_tensor(&[rows, b], 1.0);
            let g = Graph::new();
            let c = Var::concat(&[g.constant(ta.clone()), g.constant(tb.clone())], 1).unwrap();
            prop_assert_eq!(c.narrow(1, 0, a).unwrap().value(), ta);
            prop_assert_eq!(c.narrow(1, a, b).unwrap().value(), tb);
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut rng = crate::tensor::Rng::new(0);
        let t: Tensor<f64> = rng.normal_tensor(&[4, 5, 8], 1.0);
        let g = Graph::new();
        let x = g.constant(t.clone());
        let back = x.reshape(&[20, 8]).unwrap().reshape(&[4, 5, 8]).unwrap().value();
        assert_eq!(back, t);
    }
}
