//! Named parameter storage shared by every module.

use std::collections::HashMap;

use deer_tensor::{Float, Graph, Grads, Tensor, Var};
use rand::Rng;

use crate::error::{DeerError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat list of named tensors; modules keep [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor<F>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites every parameter from a named list. Names and shapes must
    /// match exactly; extra entries are ignored only if `allow_extra`.
    pub fn load_named(&mut self, named: &[(String, Tensor<F>)], allow_extra: bool) -> Result<()> {
        let map: HashMap<&str, &Tensor<F>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| DeerError::Input(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != value.shape() {
                return Err(DeerError::Input(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = (*t).clone();
        }
        if !allow_extra && named.len() != self.values.len() {
            return Err(DeerError::Input(format!(
                "checkpoint has {} tensors, model has {}",
                named.len(),
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    pub fn uniform<F: Float, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::from_f64c(rng.random_range(-bound..=bound)))
    }

    /// Glorot-uniform for a `fan_in x fan_out` map.
    pub fn xavier<F: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, bound)
    }

    /// He-uniform for layers followed by a ReLU.
    pub fn kaiming<F: Float, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
        uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
    }
}

/// A recording session: a fresh [`Graph`] plus lazily bound parameters.
pub struct Ctx<'a, F: Float> {
    pub g: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, F: Float> Ctx<'a, F> {
    /// Parameters are recorded as trainable leaves when `trainable`, as
    /// constants otherwise.
    pub fn new(store: &'a ParamStore<F>, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Continues recording on `g` with parameter `i` bound to `params[i]`;
    /// lets gradient checks treat parameters as graph inputs.
    pub fn on_graph(store: &'a ParamStore<F>, g: Graph<F>, params: &[Var]) -> Result<Self> {
        if params.len() != store.len() {
            return Err(DeerError::Input(format!("{} bindings for {} parameters", params.len(), store.len())));
        }
        Ok(Self {
            g,
            store,
            bound: params.iter().map(|&v| Some(v)).collect(),
            trainable: true,
        })
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that took part in the recording.
    pub fn param_grads(&self, grads: &Grads<F>) -> Vec<(ParamId, Vec<F>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.data(v)).map(|g| (ParamId(i), g.to_vec())))
            .collect()
    }
}
