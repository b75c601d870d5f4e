//! Named trainable parameters and SGD with momentum.

use std::collections::BTreeMap;

use crate::error::{invalid, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether L2 weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayPolicy {
    Decay,
    /// Normalization scales/shifts and biases.
    NoDecay,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub decay: DecayPolicy,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Id of the `i`-th registered parameter.
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Registry of parameters with unique names, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, decay: DecayPolicy) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            decay,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sum of squares over decayed parameters.
    pub fn decayed_sum_of_squares(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.decay == DecayPolicy::Decay)
            .map(|p| p.value.sum_of_squares())
            .sum()
    }

    /// Copy gradients computed on `tape` into the parameters bound to `vars`.
    pub fn collect_grads(&mut self, tape: &mut Tape, vars: &[(ParamId, Var)]) {
        for &(id, var) in vars {
            let g = tape.take_grad(var);
            let slot = &mut self.params[id.0].grad;
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g),
                (None, g) => *slot = g,
                (Some(_), None) => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Hyperparameters of SGD with momentum and L2 decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.00017,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("sgd", format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("sgd", format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid("sgd", format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replace the velocity buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>, params: &ParamStore) -> Result<()> {
        if velocity.len() != params.len()
            || velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.value.shape())
        {
            return Err(invalid("sgd", "velocity buffers do not match the parameter registry"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// `v <- mu*v + grad + decay*param; param <- param - lr*v`, then clears gradients.
    ///
    /// Fails without touching any parameter if one lacks a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(invalid("sgd", "parameter registry changed since the optimizer was built"));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay,
        } = self.config;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.take().expect("checked above");
            let decay = match p.decay {
                DecayPolicy::Decay => weight_decay,
                DecayPolicy::NoDecay => 0.0,
            };
            for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vel = mu * *vel + g + decay * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, decay: DecayPolicy) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(value), decay).unwrap();
        (store, id)
    }

    #[test]
    fn plain_gradient_step() {
        let (mut store, id) = scalar_store(0.0, DecayPolicy::Decay);
        let mut sgd = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &store,
        )
        .unwrap();
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        sgd.step(&mut store).unwrap();
        assert!((store.get(id).value.item() + 0.1).abs() < 1e-15);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn momentum_two_step_unroll() {
        // v1 = 1, p1 = -1; v2 = 0.9 + 1 = 1.9, p2 = -2.9
        let (mut store, id) = scalar_store(0.0, DecayPolicy::Decay);
        let mut sgd = Sgd::new(
            SgdConfig {
                learning_rate: 1.0,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            &store,
        )
        .unwrap();
        let mut trace = Vec::new();
        for _ in 0..2 {
            store.get_mut(id).grad = Some(Tensor::scalar(1.0));
            sgd.step(&mut store).unwrap();
            trace.push(store.get(id).value.item());
        }
        assert!((trace[0] + 1.0).abs() < 1e-12);
        assert!((trace[1] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let (lr, decay, w0) = (0.5, 0.00017, 3.0);
        let (mut store, id) = scalar_store(w0, DecayPolicy::Decay);
        let mut sgd = Sgd::new(
            SgdConfig {
                learning_rate: lr,
                momentum: 0.9,
                weight_decay: decay,
            },
            &store,
        )
        .unwrap();
        store.get_mut(id).grad = Some(Tensor::scalar(0.0));
        sgd.step(&mut store).unwrap();
        assert!((store.get(id).value.item() - (w0 - lr * decay * w0)).abs() < 1e-15);
    }

    #[test]
    fn normalization_params_skip_decay() {
        let (mut store, id) = scalar_store(3.0, DecayPolicy::NoDecay);
        let mut sgd = Sgd::new(SgdConfig::default(), &store).unwrap();
        store.get_mut(id).grad = Some(Tensor::scalar(0.0));
        sgd.step(&mut store).unwrap();
        assert_eq!(store.get(id).value.item(), 3.0);
    }

    #[test]
    fn missing_gradient_rejected() {
        let (mut store, _) = scalar_store(1.0, DecayPolicy::Decay);
        let mut sgd = Sgd::new(SgdConfig::default(), &store).unwrap();
        let err = sgd.step(&mut store).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("w".into()));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut store, _) = scalar_store(1.0, DecayPolicy::Decay);
        assert!(store.register("w", Tensor::scalar(0.0), DecayPolicy::Decay).is_err());
    }
}
