use std::collections::HashMap;

use crate::autodiff::{NdArray, TensorError};
use crate::real::Real;

/// Ordered collection of named trainable arrays with a flat-vector view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, NdArray<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Add a parameter; names must be unique.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: NdArray<T>,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::ShapeMismatch(format!(
                "duplicate parameter {name:?}"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, v) in &self.entries {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Overwrite every parameter from a flat vector produced by [`Self::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) -> Result<(), TensorError> {
        if flat.len() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "flat vector has {} entries, parameters need {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for (_, v) in self.entries.iter_mut() {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_identity(a in prop::collection::vec(-1e3f32..1e3, 1..20),
                                      b in prop::collection::vec(-1e3f32..1e3, 1..20)) {
            let mut set = ParamSet::new();
            set.insert("a", NdArray::new(vec![a.len()], a.clone()).unwrap()).unwrap();
            set.insert("b", NdArray::new(vec![b.len()], b.clone()).unwrap()).unwrap();
            let flat = set.flatten();
            let mut other = set.clone();
            for v in other.entries.iter_mut() { v.1.data_mut().fill(0.0); }
            other.unflatten(&flat).unwrap();
            prop_assert_eq!(other, set);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f32>::new();
        set.insert("w", NdArray::zeros(&[1])).unwrap();
        assert!(set.insert("w", NdArray::zeros(&[2])).is_err());
    }
}
