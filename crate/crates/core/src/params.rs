//! Named parameter storage shared by all trainable components.
//!
//! A [`ParamStore`] owns parameter tensors by insertion order; components
//! keep [`ParamId`] handles into it. Each forward pass registers the whole
//! store on a fresh tape ([`ParamStore::register`] for trainable leaves,
//! [`ParamStore::register_frozen`] for gradient-free evaluation), which
//! yields the `Vec<Var>` indexed by `ParamId` that forward methods consume.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Handle of one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    /// Adds a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Zero-initialised parameter.
    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Constant-initialised parameter.
    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: T) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    /// Gaussian-initialised parameter with the given standard deviation.
    pub fn add_normal(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                T::from_f64c(g * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    /// Convolution-style init: std = sqrt(2 / fan_in) where fan_in is the
    /// product of all dimensions after the first (output-channel) one.
    pub fn add_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        shape: &[usize],
    ) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(rng, name, shape, std)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    /// Index of a parameter by exact name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Registers every parameter as a trainable leaf, in store order, so
    /// that `vars[id.0]` is the variable of parameter `id`.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Registers every parameter as a constant (no gradients flow).
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Registers parameters, choosing leaf or constant per parameter.
    pub fn register_selective<F: Fn(usize, &str) -> bool>(
        &self,
        tape: &mut Tape<T>,
        trainable: F,
    ) -> Vec<Var> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| {
                if trainable(i, n) {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Copies all values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::init_rng;

    #[test]
    fn ids_match_registration_order() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add_zeros("a", &[2, 2]);
        let b = store.add_full("b", &[3], 1.5);
        assert_eq!((a.0, b.0), (0, 1));
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        assert_eq!(tape.value(vars[b.0]).data(), &[1.5, 1.5, 1.5]);
        assert!(tape.needs_grad(vars[a.0]));
        let mut frozen = Tape::new();
        let fvars = store.register_frozen(&mut frozen);
        assert!(!frozen.needs_grad(fvars[a.0]));
    }

    #[test]
    fn conv_init_scale_tracks_fan_in() {
        let mut rng = init_rng(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add_conv(&mut rng, "w", &[8, 4, 3, 3, 3]);
        let vals = store.value(w).data();
        let n = vals.len() as f64;
        let var = vals.iter().map(|v| v * v).sum::<f64>() / n;
        let expect = 2.0 / (4.0 * 27.0);
        assert!((var - expect).abs() < expect, "sample var {var} vs {expect}");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add_zeros("x", &[1]);
        store.add_zeros("x", &[1]);
    }

    #[test]
    fn find_and_selective_registration() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add_zeros("keep", &[2]);
        store.add_zeros("freeze", &[2]);
        assert_eq!(store.find("freeze"), Some(ParamId(1)));
        assert_eq!(store.find("nope"), None);
        let mut tape = Tape::new();
        let vars = store.register_selective(&mut tape, |_, n| n == "keep");
        assert!(tape.needs_grad(vars[0]));
        assert!(!tape.needs_grad(vars[1]));
    }
}
