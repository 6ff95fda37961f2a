use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sonotag_tensor::{Gradients, Scalar, Tape, Tensor, Var};

use crate::augment::derive_seed;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen (or
    /// trainable again).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for name in self.params.keys().filter(|n| n.starts_with(prefix)) {
            if frozen {
                self.frozen.insert(name.clone());
            } else {
                self.frozen.remove(name);
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Registers every parameter on `tape`: trainable ones as leaves, frozen
    /// ones as constants.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let v = if self.frozen.contains(name) {
                    tape.constant(value.clone())
                } else {
                    tape.leaf(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every trainable parameter, by name.
    pub fn gradients<T: Scalar>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(name, _)| !store.is_frozen(name))
            .map(|(name, &v)| (name.clone(), grads.wrt(v)))
            .collect()
    }
}

/// Initialisation rule of one parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// Glorot/Xavier uniform for a `[fan_in, fan_out]` matrix.
    Xavier,
}

/// Draws a tensor from `init`, seeded by `(seed, name)` so the value does
/// not depend on creation order.
pub fn init_tensor<T: Scalar>(shape: &[usize], init: Init, seed: u64, name: &str) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name, 0));
    let data: Vec<T> = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::of(d.sample(&mut rng))).collect()
        }
        Init::Uniform(a) => uniform(n, a, &mut rng),
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                _ => (n, n),
            };
            uniform(n, (6.0 / (fan_in + fan_out) as f64).sqrt(), &mut rng)
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform<T: Scalar>(n: usize, a: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if a == 0.0 {
        return vec![T::zero(); n];
    }
    let d = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..n).map(|_| T::of(d.sample(rng))).collect()
}
