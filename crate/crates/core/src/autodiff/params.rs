use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Ordered, named tensor collection. Model parameters, their gradients and
/// checkpoint contents all use this type; names are unique.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from `(name, tensor)` pairs; a repeated name replaces the earlier entry.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        let mut p = Params::new();
        for (name, t) in entries {
            p.insert(name, t);
        }
        p
    }

    /// Inserts or replaces, keeping the original position on replacement.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Fresh trainable leaves holding the same values.
    pub fn to_leaves(&self) -> Params {
        self.map_tensors(Tensor::to_leaf)
    }

    /// Constants holding the same values.
    pub fn detached(&self) -> Params {
        self.map_tensors(Tensor::detach)
    }

    fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), f(t)))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Overwrites entries from `other`. Every name in `other` must already
    /// exist here with an identical shape.
    pub fn overwrite_from(&mut self, other: &Params) -> Result<()> {
        for (name, t) in other.iter() {
            let current = self.get(name)?;
            if current.shape() != t.shape() {
                return Err(Error::shape(
                    "overwrite_from",
                    format!("`{name}`: have {:?}, got {:?}", current.shape(), t.shape()),
                ));
            }
            self.insert(name, t.clone());
        }
        Ok(())
    }

    /// `self - step * other`, entry by entry (graph-recording when either side is tracked).
    pub fn sub_scaled(&self, other: &Params, step: f64) -> Result<Params> {
        let mut out = Params::new();
        for (name, t) in self.iter() {
            let g = other.get(name)?;
            out.insert(name, t.sub(&g.scale(step)?)?);
        }
        Ok(out)
    }

    /// Entry-wise sum of two collections with identical names.
    pub fn add(&self, other: &Params) -> Result<Params> {
        let mut out = Params::new();
        for (name, t) in self.iter() {
            out.insert(name, t.add(other.get(name)?)?);
        }
        Ok(out)
    }

    /// Flattened copy of every value, in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    /// True when names, shapes and every value match bit for bit.
    pub fn bit_equal(&self, other: &Params) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.values()
                        .iter()
                        .zip(b.values())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
