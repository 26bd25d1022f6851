//! Named parameter storage.
//!
//! Every tensor is initialized from an RNG seeded by `(model seed, parameter
//! name)`, so a parameter's initial value does not depend on which other
//! parameter groups a configuration enables.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{PdseError, Result};
use crate::tensor::{BnUpdate, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Buffers such as batch-norm running statistics are stored but not trained.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// He initialization with fan-in computed from all but the leading dimension.
    Kaiming,
}

pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn init_tensor<T: Real>(shape: &[usize], init: Init, seed: u64, name: &str) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, T::c(v)),
        Init::Normal(_) | Init::Kaiming => {
            let std = std_of(init, shape);
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| T::c(normal.sample(&mut rng)))
        }
    }
}

fn std_of(init: Init, shape: &[usize]) -> f64 {
    match init {
        Init::Normal(s) => s,
        Init::Kaiming => {
            let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
            (2.0 / fan_in as f64).sqrt()
        }
        _ => 0.0,
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(PdseError::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => {
                if g.shape() != p.value.shape() {
                    return Err(PdseError::shape("accumulate_grad", p.value.shape(), g.shape()));
                }
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::c(momentum);
        let one_m = T::c(1.0 - momentum);
        for u in updates {
            for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
                let p = &mut self.params[id.0];
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
    }

    /// Same names and values, different element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zeroes every parameter whose name starts with one of `prefixes`.
    pub fn zero_matching(&mut self, prefixes: &[&str]) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                n += 1;
            }
        }
        n
    }
}
