use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// All parameters of a model, in registration order. Names are
/// dot-separated paths and unique within a store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(id)
    }

    /// Registers a parameter drawn from N(0, std²).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::from_fn(shape, |_| value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Freezes every parameter whose name starts with one of `prefixes` and
    /// unfreezes the rest.
    pub fn apply_freeze(&mut self, prefixes: &[String]) {
        for p in &mut self.params {
            p.frozen = prefixes.iter().any(|pre| p.name.starts_with(pre.as_str()));
        }
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter> + 'a {
        self.params.iter().filter(move |p| p.name.starts_with(prefix))
    }
}

/// One forward pass: a fresh [`Graph`] plus lazy bindings of store
/// parameters to graph leaves.
///
/// Frozen parameters are bound as constants unless `track_frozen` is set, in
/// which case they receive gradients like any other leaf (the optimizer still
/// skips them). Either way gradients flow *through* them to their inputs.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_frozen: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_frozen: false,
        }
    }

    pub fn tracking_frozen(mut self, track: bool) -> Self {
        self.track_frozen = track;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let rg = !p.frozen || self.track_frozen;
        let v = self
            .graph
            .leaf(p.tensor.clone().with_requires_grad(rg));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter that received one, by id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                v.and_then(|v| self.graph.grad(v))
                    .map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
