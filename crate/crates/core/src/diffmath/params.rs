use std::collections::HashMap;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor2::len).sum()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<Tensor2>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::dim("gradient sets of different length"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if !a.same_shape(b) {
                return Err(Error::dim("gradient shape mismatch"));
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.scale_in_place(factor);
        }
    }

    pub fn clear(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor2::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }
}

/// Registers `{prefix}.w` (fan_in×fan_out) and `{prefix}.b` (1×fan_out), both
/// drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_linear<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = init_uniform(store, &format!("{prefix}.w"), fan_in, fan_out, bound, rng)?;
    let b = init_uniform(store, &format!("{prefix}.b"), 1, fan_out, bound, rng)?;
    Ok((w, b))
}

pub fn init_uniform<R: rand::Rng>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    store.insert(name, Tensor2::from_vec(rows, cols, data)?)
}
