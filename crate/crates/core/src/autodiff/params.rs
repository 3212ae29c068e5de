use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tensor::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Uniform with `a = sqrt(1 / fan_in)`, fan-in taken from the first axis.
    FanIn,
    Normal(f64),
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Array,
    grad: Array,
}

/// Named trainable parameters and their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::FanIn => {
                let a = (1.0 / shape.first().copied().unwrap_or(1).max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(name, Array::from_parts(shape.to_vec(), data))
    }

    pub fn insert(&mut self, name: &str, value: Array) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Array::zeros(value.shape()),
            value,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.entries[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward pass's parameter gradients to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g *= s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces values by name; every stored parameter must be present with
    /// the same shape.
    pub fn load_values(&mut self, named: Vec<(String, Array)>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint has unknown parameter {name}")))?;
            let entry = &mut self.entries[id.0];
            if entry.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "checkpoint is missing parameter {}",
                self.entries[i].name
            )));
        }
        Ok(())
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Creates parameter leaf tensors for one forward pass, once per parameter.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    cache: RefCell<HashMap<ParamId, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.cache
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| Tensor::parameter(self.store.value(id).clone(), id, self.trainable))
            .clone()
    }
}

/// Adam with linear warmup followed by inverse-square-root decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.value(id).len()])
            .collect();
        Self {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.cfg.warmup_steps.max(1) as f64;
        self.cfg.peak_lr * (s / w).min((w / s).sqrt())
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        if self.cfg.grad_clip > 0.0 {
            let norm = store.grad_norm();
            if norm > self.cfg.grad_clip {
                store.scale_grads(self.cfg.grad_clip / norm);
            }
        }
        let lr = self.learning_rate(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = entry.grad.data();
            let value = entry.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value[j] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        store.zero_grad();
    }
}
