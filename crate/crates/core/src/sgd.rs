//! Stochastic gradient descent with momentum and L2 weight decay.
//!
//! Update order per parameter, matching the common deep-learning
//! convention: decay folds into the gradient first, then momentum, then
//! the step —
//!
//! ```text
//! g <- g + weight_decay * theta
//! v <- momentum * v + g
//! theta <- theta - lr * v
//! ```
//!
//! Parameters whose gradient is `None` in a step are untouched: no decay,
//! no velocity change. Alternating optimization (e.g. a main step that
//! freezes the rectification gate followed by a gate-only step) is
//! expressed by handing each step only the gradients it owns.

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Optimizer state: one velocity buffer per parameter in store order.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    momentum: T,
    weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, cfg: SgdConfig) -> Self {
        let velocity = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Sgd {
            momentum: T::from_f64c(cfg.momentum),
            weight_decay: T::from_f64c(cfg.weight_decay),
            velocity,
        }
    }

    /// Applies one update. `grads[i]` pairs with parameter `i` of the
    /// store; `None` leaves that parameter (and its velocity) untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: T) {
        assert_eq!(grads.len(), self.velocity.len(), "gradient count");
        assert_eq!(store.values().len(), self.velocity.len(), "store layout changed");
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let theta = store.value_mut(crate::params::ParamId(i));
            assert_eq!(g.shape(), theta.shape(), "gradient shape for param {i}");
            let v = self.velocity[i].data_mut();
            let td = theta.data_mut();
            let gd = g.data();
            for j in 0..td.len() {
                let decayed = gd[j] + self.weight_decay * td[j];
                v[j] = self.momentum * v[j] + decayed;
                td[j] = td[j] - lr * v[j];
            }
        }
    }

    /// Velocity buffers in store order (for checkpointing).
    pub fn state(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Restores velocity buffers; shapes must match the current layout.
    pub fn load_state(&mut self, state: Vec<Tensor<T>>) {
        assert_eq!(state.len(), self.velocity.len(), "state length");
        for (new, old) in state.iter().zip(&self.velocity) {
            assert_eq!(new.shape(), old.shape(), "velocity shape");
        }
        self.velocity = state;
    }
}

/// Polynomial learning-rate decay: `lr0 * (1 - iter/max_iters)^power`.
pub fn poly_lr(lr0: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    assert!(max_iters > 0 && iter <= max_iters, "iteration out of range");
    lr0 * (1.0 - iter as f64 / max_iters as f64).powf(power)
}
