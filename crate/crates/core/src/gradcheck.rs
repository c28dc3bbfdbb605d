//! Finite-difference gradient checking for tape-built functions.
//!
//! Central differences in `f64` serve as the independent oracle for every
//! analytic backward implementation. Keep probe tensors small: the cost is
//! two forward passes per input element.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Worst-case deviation between analytic and numerical gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Central-difference gradient of `f` with respect to one tensor.
pub fn numerical_grad<F>(f: &mut F, x: &Tensor<f64>, eps: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let h = eps * x0.abs().max(1.0);
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Checks the analytic gradients of a scalar-valued graph builder against
/// central differences, over every element of every input.
///
/// `build` receives a fresh tape and one leaf per input tensor and returns
/// the scalar root. Errors below `abs_floor` are accepted regardless of
/// relative size, so true zeros do not produce spurious relative errors.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    abs_floor: f64,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport { max_abs_err: 0.0, max_rel_err: 0.0, worst: (0, 0) };
    let mut probes: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            let h = eps * x0.abs().max(1.0);
            probes[ti].data_mut()[i] = x0 + h;
            let fp = eval(&probes);
            probes[ti].data_mut()[i] = x0 - h;
            let fm = eval(&probes);
            probes[ti].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[ti].data()[i];
            let abs = (ana - num).abs();
            let rel = if abs <= abs_floor { 0.0 } else { abs / ana.abs().max(num.abs()) };
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, i);
            }
        }
    }
    report
}
