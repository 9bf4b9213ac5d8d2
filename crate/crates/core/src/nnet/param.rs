use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;

/// Adadelta hyperparameters. `lr` multiplies the classic Adadelta update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 0.05,
        }
    }
}

/// A trainable tensor with its gradient accumulator and Adadelta state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
    /// Running average of squared gradients, E[g²].
    pub sq_grad: Tensor2,
    /// Running average of squared updates, E[Δx²].
    pub sq_update: Tensor2,
}

impl Param {
    pub fn new(value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Tensor2::zeros(r, c),
            sq_grad: Tensor2::zeros(r, c),
            sq_update: Tensor2::zeros(r, c),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Tensor2::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_optimizer(&mut self) {
        self.sq_grad.fill(0.0);
        self.sq_update.fill(0.0);
    }

    /// One Adadelta update from the accumulated gradient, which is then zeroed.
    pub fn adadelta_step(&mut self, opt: &Adadelta) {
        let Adadelta { rho, eps, lr } = *opt;
        let value = self.value.data_mut();
        let grad = self.grad.data_mut();
        let eg2 = self.sq_grad.data_mut();
        let edx2 = self.sq_update.data_mut();
        for i in 0..value.len() {
            let g = grad[i];
            eg2[i] = rho * eg2[i] + (1.0 - rho) * g * g;
            let delta = -((edx2[i] + eps) / (eg2[i] + eps)).sqrt() * g;
            edx2[i] = rho * edx2[i] + (1.0 - rho) * delta * delta;
            value[i] += lr * delta;
            grad[i] = 0.0;
        }
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn adadelta_step(&mut self, opt: &Adadelta) {
        self.visit_params_mut(&mut |_, p| p.adadelta_step(opt));
    }

    fn reset_optimizer(&mut self) {
        self.visit_params_mut(&mut |_, p| p.reset_optimizer());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Scales every accumulated gradient, e.g. to average over a batch.
    fn scale_grads(&mut self, a: f64) {
        self.visit_params_mut(&mut |_, p| p.grad.scale(a));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor2::from_vec(1, 1, vec![v]).unwrap());
        p.grad.set(0, 0, g);
        p
    }

    #[test]
    fn zero_grad_keeps_value_and_decays_state() {
        let mut p = scalar(1.5, 0.0);
        p.sq_grad.set(0, 0, 0.4);
        p.sq_update.set(0, 0, 0.2);
        let opt = Adadelta::default();
        p.adadelta_step(&opt);
        assert_eq!(p.value.get(0, 0), 1.5);
        assert!((p.sq_grad.get(0, 0) - 0.95 * 0.4).abs() < 1e-15);
        assert!((p.sq_update.get(0, 0) - 0.95 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (rho, eps, lr, g) = (0.95, 1e-6, 0.05, 0.3);
        let mut p = scalar(2.0, g);
        p.adadelta_step(&Adadelta { rho, eps, lr });
        let delta = -(eps / ((1.0 - rho) * g * g + eps)).sqrt() * g;
        assert!((p.value.get(0, 0) - (2.0 + lr * delta)).abs() < 1e-15);
        assert!((p.sq_update.get(0, 0) - (1.0 - rho) * delta * delta).abs() < 1e-20);
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn deterministic_and_lr_zero_freezes_values() {
        let mut a = scalar(1.0, 0.7);
        let mut b = a.clone();
        let opt = Adadelta::default();
        a.adadelta_step(&opt);
        b.adadelta_step(&opt);
        assert_eq!(a, b);

        let mut c = scalar(1.0, 0.7);
        c.adadelta_step(&Adadelta { lr: 0.0, ..opt });
        assert_eq!(c.value.get(0, 0), 1.0);
        assert!(c.sq_grad.get(0, 0) > 0.0 && c.sq_update.get(0, 0) > 0.0);
    }
}
