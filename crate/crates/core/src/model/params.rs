use latpfn_autodiff::{Graph, Real, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type ParamId = usize;

/// Which optimizer stream owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Embedder,
    Pool,
    Predictor,
    Si,
    Decoder,
}

impl Group {
    pub fn is_decoder(self) -> bool {
        self == Group::Decoder
    }
}

/// Named `f32` parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<f32>] {
        &self.values
    }

    pub fn ids(&self, pred: impl Fn(Group) -> bool) -> Vec<ParamId> {
        (0..self.len()).filter(|&i| pred(self.groups[i])).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub(crate) fn add(&mut self, name: String, value: Tensor<f32>, group: Group) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        if value.shape() != self.values[id].shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                self.names[id],
                self.values[id].shape(),
                value.shape()
            )));
        }
        self.values[id] = value;
        Ok(())
    }
}

/// Graph variables for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new<T: Real>(g: &mut Graph<T>, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .values
            .iter()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    g.param(v)
                } else {
                    g.constant(v)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    /// Weight drawn from `N(0, std^2)`.
    pub fn normal(&mut self, name: String, shape: &[usize], std: f64, group: Group) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(self.rng) as f32);
        self.store.add(name, t, group)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize], group: Group) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), group)
    }
}
