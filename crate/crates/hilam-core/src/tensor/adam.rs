//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::ParamSet;

/// Per-parameter first/second moments plus a shared step counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments }
    }

    /// One Adam update. `grads` must cover every parameter in `params`, in
    /// any order; a missing gradient is an error.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, m, v) in &mut self.moments {
            let (_, g) = grads
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("adam: missing gradient for parameter {name:?}"));
            let p = params.get_mut(name);
            assert_eq!(
                g.len(),
                p.numel(),
                "adam: gradient length {} does not match parameter {name:?} of {} elements",
                g.len(),
                p.numel()
            );
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).with_grad());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(0.5);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[("w".into(), vec![0.0])]);
        assert_eq!(params.get("w").data[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With g = 1: m̂ = v̂ = 1 after bias correction, so the update is
        // -lr / (1 + eps) ≈ -1e-3.
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[("w".into(), vec![1.0])]);
        let delta = params.get("w").data[0];
        assert!((delta + 1e-3).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn constant_gradient_gives_near_constant_steps() {
        // Hand evaluation of the recurrence: with identical gradients every
        // step, m̂ = v̂ = g at each step, so step sizes agree within 1%.
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(&params, 1e-3);
        let g = vec![("w".to_string(), vec![0.7])];
        adam.step(&mut params, &g);
        let first = params.get("w").data[0];
        adam.step(&mut params, &g);
        let second = params.get("w").data[0] - first;
        assert!(((second / first) - 1.0).abs() < 0.01, "steps {first} then {second}");
    }

    #[test]
    #[should_panic(expected = "missing gradient")]
    fn missing_gradient_is_an_error() {
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[]);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut params = one_param(0.0);
        let mut adam = AdamState::new(&params, 1e-3);
        assert_eq!(adam.step, 0);
        adam.step(&mut params, &[("w".into(), vec![1.0])]);
        assert_eq!(adam.step, 1);
        adam.step(&mut params, &[("w".into(), vec![1.0])]);
        assert_eq!(adam.step, 2);
    }
}
