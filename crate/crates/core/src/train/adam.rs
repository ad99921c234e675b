//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::params::Named;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 2e-6,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter list, in its order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Named<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One update of every parameter. `grads[i]` belongs to `params[i]`; a
/// missing entry is an error naming that parameter, and nothing is changed.
pub fn adam_step<T: Scalar>(
    params: &mut [Named<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {}", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let th = theta.to_f64_lossy();
            let gj = g[j].to_f64_lossy() + c.weight_decay * th;
            let mj = c.beta1 * m[j].to_f64_lossy() + (1.0 - c.beta1) * gj;
            let vj = c.beta2 * v[j].to_f64_lossy() + (1.0 - c.beta2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let (m_hat, v_hat) = (mj / bc1, vj / bc2);
            *theta = T::from_f64_lossy(th - c.lr * m_hat / (v_hat.sqrt() + c.epsilon));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Vec<Named<f64>> {
        vec![Named {
            name: "theta".into(),
            value: Tensor::scalar(value),
        }]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        adam_step(&mut p, &[Some(Tensor::scalar(3.0))], &mut s).unwrap();
        assert!((p[0].value.item().unwrap() - (1.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = one(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[None], &mut s).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
        assert_eq!(s.t, 0);
    }
}
