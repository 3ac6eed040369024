//! Named parameter storage and the Adam optimizer.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Named parameter tensors with one gradient slot each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(invalid(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.params.push(value);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn grad(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.grads[i]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Add `scale * delta[i]` into every gradient slot.
    pub fn add_grads(&mut self, delta: &[Tensor], scale: f64) -> Result<()> {
        if delta.len() != self.grads.len() {
            return Err(invalid(format!("{} gradients for {} parameters", delta.len(), self.grads.len())));
        }
        for (g, d) in self.grads.iter_mut().zip(delta) {
            g.axpy(scale, d)?;
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Overwrite every parameter with `f(name, current)`.
    pub fn map_params(&mut self, mut f: impl FnMut(&str, &Tensor) -> Tensor) {
        for (n, p) in self.names.iter().zip(self.params.iter_mut()) {
            *p = f(n, p);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update, in place. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.m.len() != params.len() || self.m.iter().zip(&params.params).any(|(m, p)| m.shape() != p.shape()) {
            return Err(invalid("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.params.iter_mut().zip(&params.grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::scalar(v)).unwrap();
        ps
    }

    #[test]
    fn grads_start_at_zero_and_reset() {
        let mut ps = scalar_set(1.0);
        assert_eq!(ps.grad(0).item(), 0.0);
        ps.grad_mut(0).data_mut()[0] = 3.0;
        ps.zero_grads();
        assert_eq!(ps.grad(0).item(), 0.0);
        assert!(ps.push("p", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [2.5, -0.01, 1e3] {
            let mut ps = scalar_set(0.0);
            ps.grad_mut(0).data_mut()[0] = g;
            let cfg = AdamConfig::default();
            let mut st = AdamState::new(&ps, cfg);
            st.step(&mut ps).unwrap();
            let expected = -cfg.lr * g.signum();
            let slack = (cfg.lr * cfg.eps / g.abs()).abs();
            assert!((ps.param(0).item() - expected).abs() <= slack + 1e-18);
            assert_eq!(ps.grad(0).item(), g);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_set(0.7);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        for _ in 0..5 {
            st.step(&mut ps).unwrap();
        }
        assert_eq!(ps.param(0).item(), 0.7);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // Reference recurrence written out independently of AdamState.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut p_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut ps = scalar_set(0.0);
        let mut st = AdamState::new(&ps, AdamConfig { lr, beta1: b1, beta2: b2, eps });
        for t in 1..=100 {
            let g = 2.0 * (p_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);

            ps.zero_grads();
            ps.grad_mut(0).data_mut()[0] = 2.0 * (ps.param(0).item() - 3.0);
            st.step(&mut ps).unwrap();
        }
        assert_eq!(ps.param(0).item(), p_ref);
        assert!((p_ref - 3.0).abs() < 0.1, "p = {p_ref}");
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut ps = scalar_set(0.0);
        let st_src = scalar_set(0.0);
        let mut st = AdamState::new(&st_src, AdamConfig::default());
        ps.push("q", Tensor::scalar(1.0)).unwrap();
        assert!(st.step(&mut ps).is_err());
    }
}
