//! Named parameter storage, initialization, and the Adam optimizer.
//!
//! Parameters live outside any [`Graph`](super::Graph); each step binds
//! them as leaves, and the optimizer consumes gradients keyed by name.
//! Iteration order is insertion order everywhere, which keeps both
//! checkpoints and update sweeps deterministic.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Weight initialization families.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    FanIn(usize),
    /// All zeros (output projections, FiLM maps).
    Zero,
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a parameter. Names must be unique.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let arr = match init {
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
            }
            Init::Zero => ArrayD::zeros(IxDyn(shape)),
            Init::Normal(std) => ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                v * std
            }),
        };
        self.params.insert(name.to_string(), arr);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Re-randomizes every tensor (tests exercising random weights).
    pub fn randomize(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        for arr in self.params.values_mut() {
            for v in arr.iter_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *v = n * std;
            }
        }
    }

    /// Binds every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let mut vars = IndexMap::new();
        for (name, arr) in &self.params {
            vars.insert(name.clone(), g.leaf(arr.clone()));
        }
        Binding { vars }
    }

    /// Replaces all parameter values (checkpoint load). Names must match.
    pub fn load_values(&mut self, values: IndexMap<String, ArrayD<f64>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: store has {}, loaded {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, arr) in values {
            let slot = self.params.get_mut(&name).ok_or_else(|| {
                Error::Checkpoint(format!("loaded parameter {name:?} not in model"))
            })?;
            if slot.shape() != arr.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    arr.shape()
                )));
            }
            *slot = arr;
        }
        Ok(())
    }
}

/// Per-step view of bound parameters.
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Serializable Adam moment state.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

/// Adam with per-step multiplicative learning-rate decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative decay applied once per completed step.
    pub gamma: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr0: f64, gamma: f64) -> Self {
        Adam {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gamma,
            state: AdamState::default(),
        }
    }

    /// Learning rate for the next update: `lr0 * gamma^steps_done`.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.gamma.powf(self.state.step as f64)
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &IndexMap<String, ArrayD<f64>>) {
        let lr = self.lr();
        let t = self.state.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else { continue };
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m = &*m * self.beta1 + &(grad * (1.0 - self.beta1));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = &*v * self.beta2 + &(grad.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*m / bc1;
            let vhat = v.mapv(|x| (x / bc2).sqrt() + self.eps);
            let delta = mhat / vhat * lr;
            let p = store.get_mut(&name);
            *p -= &delta;
        }
        self.state.step = t;
    }
}
