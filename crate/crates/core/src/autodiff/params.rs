use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::container::{read_container, write_container, Payload, Record};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Named trainable tensors plus their optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f64> {
    pub(crate) entries: BTreeMap<String, Entry<T>>,
    pub(crate) step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let n = value.numel();
        self.entries.insert(
            name,
            Entry {
                value,
                grad: None,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    /// Glorot-uniform `[rows, cols]` matrix.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let t = Tensor::from_fn(&[rows, cols], |_| T::of(rng.random_range(-bound..=bound)));
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<Option<&[T]>> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_deref())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn add_grad(&mut self, name: &str, g: &[T], scale: T) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if g.len() != e.value.numel() {
            return Err(Error::shape("add_grad", format!("`{name}`: {} vs {}", g.len(), e.value.numel())));
        }
        let acc = e.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b * scale);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|e| e.grad = None);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copy converted to another element type, optimizer state reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, e) in &self.entries {
            out.insert(k.clone(), e.value.cast()).expect("names are unique");
        }
        out
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.entries
            .iter()
            .map(|(k, e)| {
                Record::real(
                    k.clone(),
                    e.value.shape().to_vec(),
                    e.value.data().iter().map(|x| x.f64()).collect(),
                )
            })
            .collect()
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut store = ParamStore::new();
        for r in records {
            let Payload::Real(data) = r.data else {
                return Err(Error::Container(format!("parameter `{}` is not real", r.name)));
            };
            let t = Tensor::new(r.dims, data.into_iter().map(T::of).collect())?;
            store.insert(r.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(read_container(path)?)
    }

    /// Overwrites values of every parameter present in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (k, e) in &other.entries {
            let dst = self.value_mut(k)?;
            if dst.shape() != e.value.shape() {
                return Err(Error::shape("copy_values_from", format!("`{k}`")));
            }
            *dst = e.value.clone();
        }
        Ok(())
    }
}
