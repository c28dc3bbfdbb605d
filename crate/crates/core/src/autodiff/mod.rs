//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding the forward value and
//! a backward closure. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates gradients into every node that requires them.
//! Subgraphs reachable only from constants are pruned: no backward closure is
//! attached when no parent requires a gradient.
//!
//! One tape serves one forward/backward pass; build a fresh tape per step.

mod conv;
mod linalg;
mod loss;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tape<T>, &Tensor<T>) -> Vec<(Var, Tensor<T>)>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    back: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Records a computation graph and runs reverse-mode differentiation on it.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Registers a differentiable input (parameters, probed tensors).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Registers a non-differentiable input (data, detached values).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if any was produced by `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Whether gradients flow into this node.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, grad: None, back, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Registers an op node; drops the backward closure when no parent needs it.
    pub(crate) fn push_op<F>(&mut self, value: Tensor<T>, parents: &[Var], back: F) -> Var
    where
        F: Fn(&Tape<T>, &Tensor<T>) -> Vec<(Var, Tensor<T>)> + 'static,
    {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let back: Option<BackFn<T>> = if needs { Some(Box::new(back)) } else { None };
        self.push(value, needs, back)
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), contrib.shape(), "gradient shape mismatch");
        match &mut node.grad {
            Some(g) => g.add_assign(&contrib),
            slot => *slot = Some(contrib),
        }
    }

    /// Runs reverse-mode accumulation from a rank-0 root.
    ///
    /// Gradients of all contributing nodes with `needs_grad` are available
    /// through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        if !self.nodes[root.0].needs_grad {
            return;
        }
        self.accumulate(root, Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let back = match self.nodes[i].back.take() {
                Some(b) => b,
                None => continue,
            };
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = back(self, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
    }

    // ---- elementwise and scalar ops ----

    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out = self.value(a).map(f);
        let out_idx = self.nodes.len();
        self.push_op(out, &[a], move |t, g| {
            let x = t.value(a).data();
            let y = t.nodes[out_idx].value.data();
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![(a, Tensor::from_vec(t.value(a).shape(), d).unwrap())]
        })
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape);
        let back_shape = self.value(a).shape().to_vec();
        self.push_op(out, &[a], move |_, g| {
            vec![(a, g.reshaped(&back_shape))]
        })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_op(out, &[a, b], move |_, g| vec![(a, g.clone()), (b, g.clone())])
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        assert_eq!(av.len(), bv.len(), "sub shape mismatch");
        let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.value(a).shape(), d).unwrap();
        self.push_op(out, &[a, b], move |_, g| {
            vec![(a, g.clone()), (b, g.map(|x| -x))]
        })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        assert_eq!(av.len(), bv.len(), "mul shape mismatch");
        let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.value(a).shape(), d).unwrap();
        self.push_op(out, &[a, b], move |t, g| {
            let av = t.value(a).data();
            let bv = t.value(b).data();
            let da: Vec<T> = g.data().iter().zip(bv).map(|(&gi, &y)| gi * y).collect();
            let db: Vec<T> = g.data().iter().zip(av).map(|(&gi, &x)| gi * x).collect();
            vec![
                (a, Tensor::from_vec(t.value(a).shape(), da).unwrap()),
                (b, Tensor::from_vec(t.value(b).shape(), db).unwrap()),
            ]
        })
    }

    /// Elementwise negation.
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -T::one())
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    /// Adds a fixed scalar.
    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x + c, |_, _| T::one())
    }

    /// Natural logarithm; callers are responsible for keeping inputs positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| T::one() / x)
    }

    /// Exponential linear unit with unit slope.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x.exp() - T::one() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Elementwise `max(x, c)` with pass-through gradient where `x >= c`.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(
            a,
            move |x| if x < c { c } else { x },
            move |x, _| if x < c { T::zero() } else { T::one() },
        )
    }

    /// Sum of all elements as a rank-0 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let shape = self.value(a).shape().to_vec();
        self.push_op(Tensor::scalar(s), &[a], move |_, g| {
            vec![(a, Tensor::full(&shape, g.item()))]
        })
    }

    /// Mean of all elements as a rank-0 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f64c(n as f64))
    }

    /// Sum of several same-shape nodes.
    pub fn add_many(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_many needs at least one input");
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out.add_assign(self.value(*v));
        }
        let vars_own: Vec<Var> = vars.to_vec();
        self.push_op(out, vars, move |_, g| {
            vars_own.iter().map(|&v| (v, g.clone())).collect()
        })
    }

    /// Broadcast product of a rank-0 node with a tensor node.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        self.push_op(out, &[s, a], move |t, g| {
            let sv = t.value(s).item();
            let av = t.value(a).data();
            let mut ds = T::zero();
            for (&gi, &ai) in g.data().iter().zip(av) {
                ds = ds + gi * ai;
            }
            let da = g.map(|x| x * sv);
            vec![(s, Tensor::scalar(ds)), (a, da)]
        })
    }
}
