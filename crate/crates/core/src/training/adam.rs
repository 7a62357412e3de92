use serde::{Deserialize, Serialize};

use crate::networks::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction. `t` is the 1-based step count after
/// this update. Returns the squared L2 norm of the applied change.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    hyper: &AdamHyper,
    t: u64,
) -> f64 {
    assert_eq!(param.len(), grad.len(), "adam_update: grad length");
    assert_eq!(param.len(), m.len(), "adam_update: first moment length");
    assert_eq!(param.len(), v.len(), "adam_update: second moment length");
    let t = t.max(1) as i32;
    let c1 = (1.0 - f64::from(hyper.beta1).powi(t)) as f32;
    let c2 = (1.0 - f64::from(hyper.beta2).powi(t)) as f32;
    let mut change = 0.0f64;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let before = param[i];
        param[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        let d = f64::from(param[i] - before);
        change += d * d;
    }
    change
}

/// Per-network optimizer state: moment buffers mirror the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.push(name, crate::tensor::Tensor::zeros(t.shape()));
        }
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one step to every parameter; returns the L2 norm of the
    /// total change.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>], hyper: &AdamHyper) -> f64 {
        self.t += 1;
        let mut change = 0.0;
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(moments) {
            change += adam_update(p.data_mut(), g, m.data_mut(), v.data_mut(), hyper, self.t);
        }
        change.sqrt()
    }
}
