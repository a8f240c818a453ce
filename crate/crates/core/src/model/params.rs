use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ndcore::{Array, Gradients, Real, Rng, Tape, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Array<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array<T>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, a)| (n.clone(), a.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Put every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, a)| if trainable { tape.leaf(a.clone()) } else { tape.constant(a.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients for every parameter, zero-filled where none flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Array<T>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, a), &v)| grads.take(v).unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Override one binding, e.g. to probe a single tensor in a gradient check.
    pub fn replace(&mut self, name: &str, v: Var) {
        let i = self.index[name];
        self.vars[i] = v;
    }
}

/// Seeded initializers; every tensor draws from its own named stream so
/// adding a parameter does not perturb the others.
pub(crate) struct Init {
    pub root: Rng,
    pub proj_std: f64,
}

impl Init {
    pub fn trunc_normal<T: Real>(&self, name: &str, shape: &[usize], std: f64) -> Array<T> {
        let mut rng = self.root.child(name);
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| T::lit(rng.truncated_normal(std))).collect()).unwrap()
    }

    pub fn proj<T: Real>(&self, name: &str, shape: &[usize]) -> Array<T> {
        self.trunc_normal(name, shape, self.proj_std)
    }

    /// Fan-in scaled weights for a `fan_in x cout` matrix.
    pub fn fan_in<T: Real>(&self, name: &str, fan_in: usize, cout: usize) -> Array<T> {
        self.trunc_normal(name, &[fan_in, cout], (2.0 / fan_in as f64).sqrt())
    }
}
