//! Named parameters with gradient accumulators.

use super::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;

struct Slot<S: Scalar> {
    value: ArrayD<S>,
    grad: ArrayD<S>,
}

/// Map name -> (value, gradient). Iteration order is name order, which keeps
/// the optimizer and checkpoints deterministic.
pub struct ParameterSet<S: Scalar> {
    slots: BTreeMap<String, Slot<S>>,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            slots: BTreeMap::new(),
        }
    }

    /// Register a parameter. Panics on duplicate names: modules own disjoint
    /// name prefixes by construction.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<S>) {
        let name = name.into();
        let grad = ArrayD::zeros(value.raw_dim());
        let prev = self.slots.insert(name.clone(), Slot { value, grad });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<S>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&ArrayD<S>> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub(crate) fn iter_mut_with_grad(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut ArrayD<S>, &ArrayD<S>)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, &s.grad))
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.fill(S::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &ArrayD<S>) {
        let slot = self
            .slots
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        debug_assert_eq!(slot.grad.shape(), delta.shape());
        slot.grad.zip_mut_with(delta, |a, &b| *a += b);
    }

    /// Overwrite values from another set where names match; returns the
    /// number of copied parameters.
    pub fn load_matching(&mut self, other: &ParameterSet<S>) -> usize {
        let mut n = 0;
        for (name, slot) in self.slots.iter_mut() {
            if let Some(v) = other.get(name) {
                if v.shape() == slot.value.shape() {
                    slot.value.assign(v);
                    n += 1;
                }
            }
        }
        n
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> S {
        let mut acc = S::zero();
        for s in self.slots.values() {
            for &g in s.grad.iter() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn any_grad_nonfinite(&self) -> bool {
        self.slots
            .values()
            .any(|s| s.grad.iter().any(|g| !g.is_finite()))
    }
}

/// Initializers. All take the rng explicitly so construction is reproducible.
pub mod init {
    use super::*;

    pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn full<S: Scalar>(shape: &[usize], v: S) -> ArrayD<S> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    pub fn uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<S> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(rng.random_range(-bound..bound)))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<S> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| {
                // Box-Muller; two uniforms per draw keeps the stream simple.
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                S::from_f64(z * std)
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Kaiming-style fan-in uniform for conv/linear weights.
    pub fn kaiming<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<S> {
        let bound = (1.0 / fan_in as f64).sqrt();
        uniform(rng, shape, bound)
    }
}
