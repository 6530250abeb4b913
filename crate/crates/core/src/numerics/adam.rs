use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Weight decay is not applied here; the L2 term
/// lives in the loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get("p").unwrap().get(0, 0), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s, &grad(1.0)).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().get(0, 0) - expected).abs() < 1e-15);
        assert!((s.get("p").unwrap().get(0, 0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn repeated_steps_bounded_by_lr() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(0.05);
        let mut prev = 0.0;
        for _ in 0..50 {
            adam.step(&mut s, &grad(3.0)).unwrap();
            let now = s.get("p").unwrap().get(0, 0);
            assert!((now - prev).abs() <= 0.05 * (1.0 + 1e-8));
            prev = now;
        }
        assert_eq!(adam.steps_taken(), 50);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = scalar_store(0.0);
        let mut adam = Adam::new(0.1);
        let g = BTreeMap::from([("p".to_string(), Tensor::zeros(2, 1))]);
        assert!(adam.step(&mut s, &g).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
