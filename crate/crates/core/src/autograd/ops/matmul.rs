use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(err());
    }
    let (la, lb) = (&a[..ra - 2], &b[..rb - 2]);
    let lead = if la == lb || lb.is_empty() {
        la
    } else if la.is_empty() {
        lb
    } else {
        return Err(err());
    };
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    let dims = MatmulDims {
        batch: lead.iter().product(),
        a_batched: !la.is_empty(),
        b_batched: !lb.is_empty(),
        m,
        k,
        n,
    };
    Ok((dims, shape))
}

struct Matmul {
    dims: MatmulDims,
}

impl<T: Scalar> BackwardOp<T> for Matmul {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let MatmulDims { batch, a_batched, b_batched, m, k, n } = self.dims;
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let bo = if b_batched { i * k * n } else { 0 };
            let g = &grad[i * m * n..(i + 1) * m * n];
            gemm_nt(g, &b[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
            gemm_tn(&a[ao..ao + m * k], g, &mut gb[bo..bo + k * n], m, k, n);
        }
        vec![Some(ga), Some(gb)]
    }
}

impl<T: Scalar> Var<T> {
    /// Batched matrix product over the last two axes. Leading axes must agree,
    /// or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (dims, shape, data) = {
            let (a, b) = (self.tensor_ref(), other.tensor_ref());
            let (dims, shape) = matmul_dims(a.shape(), b.shape())?;
            let MatmulDims { batch, a_batched, b_batched, m, k, n } = dims;
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm_nn(
                    &a.data()[ao..ao + m * k],
                    &b.data()[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            (dims, shape, out)
        };
        self.graph
            .record("matmul", Tensor::new(&shape, data)?, &[self, other], Matmul { dims })
    }
}
