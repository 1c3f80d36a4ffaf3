//! AdamW with decoupled weight decay and per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::pipeline::SegmentationPipeline;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<ParamId>,
}

/// Backbone at `base_lr / 10`, everything else at `base_lr`.
pub fn make_param_groups<T: Scalar>(pipeline: &SegmentationPipeline<T>, base_lr: f64) -> Result<Vec<ParamGroup>> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
    }
    let (backbone, rest) = pipeline.param_groups();
    Ok(vec![
        ParamGroup { name: "backbone".into(), lr: base_lr * 0.1, params: backbone },
        ParamGroup { name: "rest".into(), lr: base_lr, params: rest },
    ])
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    step: u64,
    /// First and second moments, indexed like the store.
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, groups: Vec<ParamGroup>, config: AdamWConfig) -> Result<Self> {
        let mut moments = vec![None; store.len()];
        for g in &groups {
            for &id in &g.params {
                let slot = &mut moments[id.0];
                if slot.is_some() {
                    return Err(Error::Config(format!("parameter {} is in two groups", store.name(id))));
                }
                let n = store.get(id).len();
                *slot = Some((vec![T::zero(); n], vec![T::zero(); n]));
            }
        }
        Ok(Self { config, groups, step: 0, moments })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in the store:
    /// `p <- p (1 - lr wd)`, then `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for g in &self.groups {
            if let Some(&id) = g.params.iter().find(|&&id| store.get(id).grad().is_none()) {
                return Err(Error::MissingGrad(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        for g in &self.groups {
            let lr = T::lit(g.lr);
            let decay = T::lit(1.0 - g.lr * c.weight_decay);
            for &id in &g.params {
                let (m, v) = self.moments[id.0].as_mut().expect("registered at construction");
                let p = store.get_mut(id);
                let grad = p.grad().expect("checked above").to_vec();
                for (i, (w, gi)) in p.data_mut().iter_mut().zip(grad).enumerate() {
                    m[i] = b1 * m[i] + (T::one() - b1) * gi;
                    v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[1], &[p]).unwrap()).unwrap();
        (s, id)
    }

    fn opt(store: &ParamStore<f64>, id: ParamId, lr: f64, wd: f64) -> AdamW<f64> {
        let groups = vec![ParamGroup { name: "all".into(), lr, params: vec![id] }];
        AdamW::new(store, groups, AdamWConfig { weight_decay: wd, ..Default::default() }).unwrap()
    }

    #[test]
    fn single_step_hand_value() {
        let (mut s, id) = scalar_store(1.0);
        let mut o = opt(&s, id, 0.1, 0.0);
        s.get_mut(id).set_grad(vec![1.0]).unwrap();
        o.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = scalar_store(0.7);
        let mut o = opt(&s, id, 0.1, 0.0);
        for _ in 0..5 {
            s.get_mut(id).set_grad(vec![0.0]).unwrap();
            o.step(&mut s).unwrap();
        }
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn decay_is_multiplicative_before_update() {
        let (mut s, id) = scalar_store(2.0);
        let mut o = opt(&s, id, 0.1, 0.01);
        s.get_mut(id).set_grad(vec![0.0]).unwrap();
        o.step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut s, id) = scalar_store(1.0);
        let mut o = opt(&s, id, 0.1, 0.0);
        assert!(matches!(o.step(&mut s), Err(Error::MissingGrad(n)) if n == "p"));
    }

    #[test]
    fn duplicate_group_membership_rejected() {
        let (s, id) = scalar_store(1.0);
        let g = ParamGroup { name: "a".into(), lr: 0.1, params: vec![id] };
        assert!(AdamW::new(&s, vec![g.clone(), g], AdamWConfig::default()).is_err());
    }
}
