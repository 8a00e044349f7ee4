use crate::nn::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update of `params` in place. `t` is the 1-based step.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, t: u64) {
    assert!(t >= 1, "adam step count starts at 1");
    assert!(params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len());
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam state for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParameterStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            adam_step(&mut p.value, &p.grad, m, v, &self.cfg, self.t);
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = vec![0.3, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut w, &[0.0, 0.0], &mut m, &mut v, &AdamConfig::default(), 1);
        assert_eq!(w, vec![0.3, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        for g in [1e-3, 0.5, -7.0] {
            let mut w = vec![1.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_step(&mut w, &[g], &mut m, &mut v, &cfg, 1);
            assert!(((1.0 - w[0]) - 0.01 * g.signum()).abs() < 1e-7, "{g}: {}", w[0]);
        }
    }

    #[test]
    fn minimizes_square() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut w = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for t in 1..=200 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut m, &mut v, &cfg, t);
        }
        assert!(w[0].abs() < 0.05, "{}", w[0]);
    }
}
