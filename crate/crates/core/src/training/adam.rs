use crate::architecture::{ParamId, ParamStore};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update at step `t` (1-based) with decoupled weight decay `−lr·wd·θ`.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    lr: f64,
    weight_decay: f64,
    h: AdamHyper,
) {
    assert_eq!(theta.len(), grad.len(), "parameter and gradient sizes differ");
    let c1 = 1.0 - h.beta1.powf(t as f64);
    let c2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + h.eps) + lr * weight_decay * theta[i];
    }
}

/// Adam over every trainable tensor of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, weight_decay: f64) -> Self {
        Self {
            hyper,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let theta = store.get_mut(*id);
            let state = self.moments[id.index()].get_or_insert_with(|| Moments::zeros(g.numel()));
            adam_step(theta.data_mut(), g.data(), state, self.step, lr, self.weight_decay, self.hyper);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut theta = vec![0.3, -2.0];
        let mut s = Moments::zeros(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut s, 1, 1e-3, 0.0, AdamHyper::default());
        assert_eq!(theta, vec![0.3, -2.0]);
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut theta = vec![1.0];
        let mut s = Moments::zeros(1);
        let g = theta[0];
        adam_step(&mut theta, &[g], &mut s, 1, 1e-2, 0.0, AdamHyper::default());
        assert!(theta[0] < 1.0);
    }

    #[test]
    fn decay_only_shrinks_norm() {
        let mut theta = vec![3.0, -4.0];
        let mut s = Moments::zeros(2);
        let mut last = 5.0;
        for t in 1..=20 {
            adam_step(&mut theta, &[0.0, 0.0], &mut s, t, 1e-2, 2e-4 * 100.0, AdamHyper::default());
            let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < last);
            last = norm;
        }
    }
}
