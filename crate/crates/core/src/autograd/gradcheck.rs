//! Central finite-difference verification of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the shared denominator of the relative error. One ulp of an O(1)
/// function over a 2e-5 central difference is ~1e-11, so an input whose true
/// gradient is exactly zero (e.g. a key bias under softmax shift invariance)
/// needs a floor far above that; this one makes the relative tolerance act
/// as an absolute one of `tol * 1e-5` on such inputs.
pub const DENOMINATOR_GUARD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputReport {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_abs_err: f64,
    /// `max_j |analytic_j - numeric_j|` divided by the shared denominator
    /// `max(max_j |analytic_j|, max_j |numeric_j|, DENOMINATOR_GUARD)`.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn from_gradients(shapes: &[Vec<usize>], analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> Self {
        let inputs: Vec<InputReport> = shapes
            .iter()
            .zip(analytic.iter().zip(numeric))
            .enumerate()
            .map(|(index, (shape, (a, n)))| {
                let max_abs_err = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let scale = a
                    .iter()
                    .chain(n)
                    .map(|v| v.abs())
                    .fold(DENOMINATOR_GUARD, f64::max);
                InputReport {
                    index,
                    shape: shape.clone(),
                    max_abs_err,
                    max_rel_err: max_abs_err / scale,
                }
            })
            .collect();
        let max_rel_err = inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        Self { max_rel_err, inputs }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&vars)?;
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(v)
}

/// Analytic gradients of a scalar function from one reverse pass.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| g.leaf(t.detached().with_requires_grad()))
        .collect();
    let y = f(&vars)?;
    g.backward(&y)?;
    Ok(vars
        .iter()
        .map(|v| v.grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; v.value().len()]))
        .collect())
}

/// `(f(x + h e_j) - f(x - h e_j)) / 2h` for every coordinate of every input.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detached).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..work.len() {
        let mut grad = Vec::with_capacity(work[i].len());
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences with step `step`.
pub fn finite_diff_gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradcheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, step)?;
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    Ok(GradcheckReport::from_gradients(&shapes, &analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let f = |v: &[Var<f64>]| v[0].square()?.sum();
        let a = analytic_gradient(&f, std::slice::from_ref(&x)).unwrap();
        assert_eq!(a[0], vec![2.0, 4.0]);
        let r = finite_diff_gradcheck(f, &[x], 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let f = |v: &[Var<f64>]| v[0].square()?.sum();
        let inputs = [x];
        let mut a = analytic_gradient(&f, &inputs).unwrap();
        a[0].iter_mut().for_each(|g| *g *= 2.0);
        let n = numeric_gradient(&f, &inputs, 1e-6).unwrap();
        let r = GradcheckReport::from_gradients(&[vec![3]], &a, &n);
        assert!(!r.passes(1e-4));
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::from_f64(&[1], &[1e200]).unwrap();
        let f = |v: &[Var<f64>]| v[0].square()?.sum();
        assert!(finite_diff_gradcheck(f, &[x], 1e-6).is_err());
    }
}
