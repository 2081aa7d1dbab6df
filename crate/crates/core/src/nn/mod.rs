//! Parameter storage, initialization and the forward-pass context shared by
//! every layer.

mod attention;
mod blocks;
mod layers;

pub use attention::{Attention, Partition, TransformerLayer};
pub use blocks::{MBConv, MBConvParams, ResidualBlock, ResidualBlockParams, SqueezeExcite};
pub use layers::{dense, BatchNorm, Conv2d, LayerNorm, Linear, Mlp};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated by forward passes in training mode.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named, ordered collection of every array a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: String, kind: ParamKind, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, kind, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Replaces every tensor's `grad` with the given gradients; parameters
    /// not listed end up with `grad = None`.
    pub fn set_grads(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for p in &mut self.entries {
            p.tensor.grad = None;
        }
        for (id, g) in grads {
            self.entries[id.0].tensor.grad = Some(g);
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, data) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(&data);
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, tensor: p.tensor.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in: `N(0, 2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break std * z;
                    }
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix while a model is built.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> Builder<'_, T> {
        let prefix = self.qualify(name.as_ref());
        Builder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.register(name, shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.register(name, shape, init, ParamKind::Buffer)
    }

    fn register(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = init.sample(n, self.rng);
        let tensor = Tensor::from_f64(shape, &values)?;
        self.store.insert(self.qualify(name), kind, tensor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-average updates, gradients on parameters.
    Train,
    /// Running statistics; parameters still bound as variables so callers
    /// may differentiate an eval-mode forward.
    Eval,
}

/// State for one forward (and optional backward) pass.
pub struct Ctx<'a, T: Element> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<(ParamId, Vec<T>)>,
    capture_attention: bool,
    attention: Vec<Var>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            updates: Vec::new(),
            capture_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Records every attention weight matrix computed from now on.
    pub fn capture_attention(&mut self, on: bool) {
        self.capture_attention = on;
    }

    pub fn attention_weights(&self) -> &[Var] {
        &self.attention
    }

    pub(crate) fn record_attention(&mut self, weights: Var) {
        if self.capture_attention {
            self.attention.push(weights);
        }
    }

    /// The tape variable for a parameter, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let trainable = param.kind == ParamKind::Trainable;
        let v = self.tape.leaf(param.tensor.clone().with_requires_grad(trainable));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub(crate) fn push_buffer_update(&mut self, id: ParamId, data: Vec<T>) {
        self.updates.push((id, data));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of every bound trainable parameter after backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }

    /// Parameters that were bound during the forward pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut s = b.scope("stem");
        let mut c = s.scope("conv");
        c.param("weight", &[2, 2], Init::Zeros).unwrap();
        assert!(store.find("stem.conv.weight").is_some());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        b.param("w", &[1], Init::Zeros).unwrap();
        assert!(b.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Init::TruncNormal { std: 0.02 }.sample(10_000, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }
}
