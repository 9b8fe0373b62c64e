use std::collections::BTreeMap;

use rand::Rng;

use super::{lit, Real, Tensor};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

/// Named parameter collection. Names are unique; iteration by
/// [`ParamStore::sorted`] follows lexicographic name order, which is also
/// the on-disk checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !name.is_empty() && !name.contains(['\t', '\n']),
            InvalidArgument,
            "parameter name {name:?} must be non-empty without tabs or newlines"
        );
        ensure!(
            !self.by_name.contains_key(&name),
            InvalidArgument,
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(id)
    }

    /// Inserts a `[fan_in, fan_out]`-style tensor drawn uniformly from
    /// `±gain·sqrt(3 / fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lit::<T>(rng.random_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::filled(shape, lit(value)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|id| &self.entries[id.0])
    }

    /// Parameters in insertion order with their ids.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in lexicographic name order.
    pub fn sorted(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.by_name.values().map(|id| &self.entries[id.0])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.entries {
            p.frozen = frozen;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Coordinatewise mean of stores sharing one name set.
    ///
    /// Uses a running mean, so averaging identical stores reproduces them
    /// bit for bit.
    pub fn average(stores: &[ParamStore<T>]) -> Result<ParamStore<T>> {
        let first = stores
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero checkpoints".into()))?;
        let mut out = first.clone();
        for (k, store) in stores.iter().enumerate().skip(1) {
            ensure!(
                store.names().eq(first.names()),
                Data,
                "checkpoint {k} has a different parameter name set"
            );
            let weight = lit::<T>(1.0 / (k as f64 + 1.0));
            for (name, id) in &out.by_name {
                let src = store.by_name(name).expect("name sets equal");
                let dst = &mut out.entries[id.0].tensor;
                ensure!(
                    src.tensor.shape() == dst.shape(),
                    Shape,
                    "parameter {name:?} differs in shape across checkpoints"
                );
                for (d, &s) in dst.data_mut().iter_mut().zip(src.tensor.data()) {
                    *d += (s - *d) * weight;
                }
            }
        }
        Ok(out)
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss did not
/// reach or that are frozen.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` coordinatewise.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
                        *a += b;
                    }
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}
