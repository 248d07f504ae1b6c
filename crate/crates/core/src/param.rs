//! Named, trainable parameters and the update rules applied to them.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A tensor with a unique dotted name such as `backbone.block3.conv1.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Frozen parameters are excluded from gradient computation and updates.
    pub frozen: bool,
}

/// Ordered collection of parameters. Enumeration order is insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            bail!(InvalidArgument, "duplicate parameter name `{name}`");
        }
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    /// He-style initialisation: N(0, 2 / fan_in).
    pub fn add_he(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let shape = shape.into();
        let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        });
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: &str, shape: impl Into<Shape>, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::from_f64(v)))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Give every trainable parameter that did not take part in the last
    /// backward pass an explicit zero gradient.
    pub fn fill_missing_grads(&mut self, prefix: &str) {
        for p in &mut self.params {
            if !p.frozen && p.grad.is_none() && p.name.starts_with(prefix) {
                p.grad = Some(vec![T::ZERO; p.value.len()]);
            }
        }
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Plain gradient descent: `p <- p - lr * grad`, then clear the gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        sgd_step(&mut self.params, lr)
    }

    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum();
        libm::sqrt(sq)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// `p <- p - lr * grad` for every trainable parameter; gradients are then cleared.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let lr = T::from_f64(lr);
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let g = p.grad.take().expect("checked above");
        for (v, gi) in p.value.data_mut().iter_mut().zip(g) {
            *v -= lr * gi;
        }
    }
    Ok(())
}

/// Update rule used by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

/// Optimizer moments, kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        OptimizerState {
            step: 0,
            first: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Apply one update and clear gradients. `lr_scale` multiplies the
    /// configured learning rate.
    pub fn step<T: Scalar>(
        &mut self,
        cfg: &OptimizerConfig,
        store: &mut ParamStore<T>,
        lr_scale: f64,
    ) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.first.len() != store.len() {
            bail!(
                InvalidArgument,
                "optimizer state has {} slots for {} parameters",
                self.first.len(),
                store.len()
            );
        }
        self.step += 1;
        match *cfg {
            OptimizerConfig::Sgd { lr, momentum } => {
                let lr = lr * lr_scale;
                if momentum == 0.0 {
                    return store.sgd_step(lr);
                }
                for (i, p) in store.iter_mut().enumerate().filter(|(_, p)| !p.frozen) {
                    let g = p.grad.take().expect("checked above");
                    let m = &mut self.first[i];
                    for ((v, gi), mi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = (momentum * *mi as f64 + gi.to_f64()) as f32;
                        *v -= T::from_f64(lr * *mi as f64);
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let lr = lr * lr_scale;
                let t = self.step as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for (i, p) in store.iter_mut().enumerate().filter(|(_, p)| !p.frozen) {
                    let g = p.grad.take().expect("checked above");
                    let (m, s) = (&mut self.first[i], &mut self.second[i]);
                    for (((v, gi), mi), si) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        let gf = gi.to_f64();
                        let mn = beta1 * *mi as f64 + (1.0 - beta1) * gf;
                        let sn = beta2 * *si as f64 + (1.0 - beta2) * gf * gf;
                        *mi = mn as f32;
                        *si = sn as f32;
                        let upd = lr * (mn / c1) / (libm::sqrt(sn / c2) + eps);
                        *v -= T::from_f64(upd);
                    }
                }
            }
        }
        Ok(())
    }
}
