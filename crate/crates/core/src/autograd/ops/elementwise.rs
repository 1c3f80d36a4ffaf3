use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// Output shape of a binary op. Shapes are right-aligned; an operand may
/// only broadcast along a leading run of singleton (or missing) extents.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(mismatch());
        }
        out.push(x.max(y));
    }
    for p in [&pa, &pb] {
        // Once an extent matches the output, every later extent must too.
        let mut matched = false;
        for (&d, &o) in p.iter().zip(&out) {
            if d == o && o != 1 {
                matched = true;
            } else if d != o && matched {
                return Err(mismatch());
            }
        }
    }
    Ok(out)
}

struct Binary {
    kind: BinKind,
}

impl<T: Scalar> BackwardOp<T> for Binary {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (na, nb) = (a.len(), b.len());
        let mut ga = vec![T::zero(); na];
        let mut gb = vec![T::zero(); nb];
        for (i, &g) in grad.iter().enumerate() {
            let (ia, ib) = (i % na, i % nb);
            match self.kind {
                BinKind::Add => {
                    ga[ia] += g;
                    gb[ib] += g;
                }
                BinKind::Sub => {
                    ga[ia] += g;
                    gb[ib] -= g;
                }
                BinKind::Mul => {
                    ga[ia] += g * b.data()[ib];
                    gb[ib] += g * a.data()[ia];
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

struct Unary<F> {
    deriv: F,
}

impl<T: Scalar, F: Fn(T, T) -> T> BackwardOp<T> for Unary<F> {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad)
            .map(|((&x, &y), &g)| g * (self.deriv)(x, y))
            .collect();
        vec![Some(g)]
    }
}

struct SumAll;

impl<T: Scalar> BackwardOp<T> for SumAll {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; inputs[0].len()])]
    }
}

const GELU_K: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Scalar>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// tanh approximation of GELU.
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = sqrt_2_over_pi::<T>() * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let a = sqrt_2_over_pi::<T>();
    let k = T::lit(GELU_K);
    let t = (a * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * a * (T::one() + T::lit(3.0) * k * x * x)
}

impl<T: Scalar> Var<T> {
    fn binary(&self, other: &Var<T>, kind: BinKind, op: &'static str) -> Result<Var<T>> {
        let (a, b) = (self.tensor_ref(), other.tensor_ref());
        let shape = broadcast_shape(op, a.shape(), b.shape())?;
        let n = numel(&shape);
        let (na, nb) = (a.len(), b.len());
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % na], bd[i % nb]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                }
            })
            .collect();
        drop((a, b));
        self.graph
            .record(op, Tensor::new(&shape, data)?, &[self, other], Binary { kind })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        deriv: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        let value = {
            let x = self.tensor_ref();
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?
        };
        self.graph.record(op, value, &[self], Unary { deriv })
    }

    pub fn scale(&self, factor: T) -> Result<Var<T>> {
        self.unary("scale", move |x| x * factor, move |_, _| factor)
    }

    /// `min(max(x, 0), 6)`; the subgradient at both kinks is 0.
    pub fn relu6(&self) -> Result<Var<T>> {
        let six = T::lit(6.0);
        self.unary(
            "relu6",
            move |x| x.max(T::zero()).min(six),
            move |x, _| {
                if x > T::zero() && x < six {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn gelu(&self) -> Result<Var<T>> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_deriv(x))
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let s: T = self.tensor_ref().data().iter().copied().sum();
        self.graph.record("sum", Tensor::scalar(s), &[self], SumAll)
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = T::lit(self.tensor_ref().len() as f64);
        self.sum()?.scale(T::one() / n)
    }
}
